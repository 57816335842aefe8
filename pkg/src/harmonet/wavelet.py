"""Single-level orthonormal 2-D Haar transform on channel-first maps.

For each 2x2 block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2      LH = (a + b - c - d) / 2
    HL = (a - b + c - d) / 2      HH = (a - b - c + d) / 2

so LH responds to top/bottom differences and HL to left/right differences.
The transform is orthonormal: analysis and synthesis are each other's adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.ops import ShapeError
from .autodiff.tensor import as_tensor, record


@dataclass
class FrequencyBands:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def high(self) -> Tensor:
        """High-frequency bands concatenated on the channel axis ``[LH, HL, HH]``."""
        return ops.concat([self.lh, self.hl, self.hh], axis=-3)

    def energy(self) -> float:
        return float(sum((b.data ** 2).sum() for b in (self.ll, self.lh, self.hl, self.hh)))


def _analysis(x: np.ndarray) -> np.ndarray:
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return 0.5 * np.stack([a + b + c + d, a + b - c - d, a - b + c - d, a - b - c + d])


def _synthesis(bands: np.ndarray) -> np.ndarray:
    ll, lh, hl, hh = bands
    out = np.empty(ll.shape[:-2] + (2 * ll.shape[-2], 2 * ll.shape[-1]))
    out[..., 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
    out[..., 0::2, 1::2] = 0.5 * (ll + lh - hl - hh)
    out[..., 1::2, 0::2] = 0.5 * (ll - lh + hl - hh)
    out[..., 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
    return out


def haar_analysis(x) -> Tensor:
    """Stacked bands ``[4, ..., C, H/2, W/2]`` in the order LL, LH, HL, HH."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"dwt needs at least 2 dims, got {x.shape}")
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"dwt needs even spatial extents, got {H}x{W}")
    return record(_analysis(x.data), (x,), lambda g: (_synthesis(g),), "haar_analysis")


def haar_synthesis(stacked) -> Tensor:
    stacked = as_tensor(stacked)
    if stacked.shape[0] != 4:
        raise ShapeError(f"idwt expects 4 stacked bands on axis 0, got {stacked.shape[0]}")
    return record(_synthesis(stacked.data), (stacked,), lambda g: (_analysis(g),), "haar_synthesis")


def dwt_haar2d(x) -> FrequencyBands:
    s = haar_analysis(x)
    return FrequencyBands(s[0], s[1], s[2], s[3])


def idwt_haar2d(bands: FrequencyBands) -> Tensor:
    shapes = {b.shape for b in (bands.ll, bands.lh, bands.hl, bands.hh)}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent band shapes: {sorted(shapes)}")
    return haar_synthesis(ops.stack([bands.ll, bands.lh, bands.hl, bands.hh], axis=0))
