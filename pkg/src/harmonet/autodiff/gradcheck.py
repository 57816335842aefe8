"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(f: Callable[[], float], t: Tensor, indices: Optional[Sequence[tuple]] = None,
                   h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t.data``.

    Returns the full gradient when ``indices`` is None, otherwise a vector with
    one entry per index.
    """
    if indices is None:
        indices = list(np.ndindex(t.shape))
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = f()
        t.data[idx] = orig - h
        fm = f()
        t.data[idx] = orig
        out[n] = (fp - fm) / (2 * h)
    if len(indices) == t.size and indices == list(np.ndindex(t.shape)):
        return out.reshape(t.shape)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def analytic_grads(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [t.grad.copy() for t in tensors]


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> list[float]:
    """Relative error between tape gradients and central differences, per tensor.

    With ``max_entries`` only that many randomly chosen coordinates of each
    tensor are probed.
    """
    grads = analytic_grads(loss_fn, tensors)
    rng = rng or np.random.default_rng(0)

    def f():
        return loss_fn().item()

    errs = []
    for t, g in zip(tensors, grads):
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in sorted(pick)]
        else:
            idx = all_idx
        num = numerical_grad(f, t, idx, h)
        ana = np.array([g[i] for i in idx])
        errs.append(relative_error(ana, num))
    return errs
