"""Rater personalization in the Haar wavelet domain.

Pipeline for one feature map ``X [B, C, H, W]`` (C divisible by 4)::

    X~ = W_d X                               1x1, C -> C/4
    LL, LH, HL, HH = dwt(X~);  X_H = [LH, HL, HH]   (C' = 3C/4 channels)
    w = softmax(GAP(pwc(X_H)))               weights over N prompt components
    P = conv3x3(sum_c w_c * styles[rater, c] * P_c)
    X'_H = conv1x1(lka(X_H + P) * X_H)       large-kernel attention gating
    X_d = GAP(conv3x3([X'_H, LL]))           width = latent dim
    a = attention(query = X_d + s(z), keys = s(bank), values = bank)
    r = GAP(lrelu(conv1x1(idwt([LL, X'_H]))))   width = latent dim
    z' = affine(a + r)

``s`` standardizes a latent by the image's prior (identity when the bank
carries no prior statistics). Maps are channel-first throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Conv2d, Linear, Module, Parameter, Tensor, ops
from .autodiff.ops import ShapeError
from .wavelet import FrequencyBands, dwt_haar2d, idwt_haar2d


@dataclass
class PriorBank:
    """Latent samples ``[B, M_z, D]`` drawn from the frozen prior of each image.

    With ``mu`` and ``sigma`` (``[B, D]``) attention scores are computed in the
    prior's standardized coordinates; the attended values stay raw samples.
    """

    samples: Tensor
    mu: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.samples.shape[-2]

    def standardize(self, z: Tensor) -> Tensor:
        if self.mu is None:
            return z
        shape = (z.shape[0],) + (1,) * (z.ndim - 2) + (z.shape[-1],)
        return (z - Tensor(self.mu.reshape(shape))) * Tensor(1.0 / self.sigma.reshape(shape))

    def keys(self) -> Tensor:
        return self.standardize(self.samples)


class Personalizer(Module):
    def __init__(self, rng: np.random.Generator, channels: int, latent_dim: int, num_raters: int,
                 spatial: int, num_prompts: int = 4):
        if channels % 4:
            raise ShapeError(f"personalizer input channels {channels} not divisible by 4")
        if spatial % 2:
            raise ShapeError(f"personalizer spatial size {spatial} must be even")
        if num_prompts < 2:
            raise ValueError("need at least two prompt components")
        c4 = channels // 4
        dp = 3 * c4
        half = spatial // 2
        self.reduce = Conv2d(rng, channels, c4, 1, bias=False)
        self.prompt_pwc = Conv2d(rng, dp, num_prompts, 1)
        self.prompts = Parameter(rng.normal(0.0, 0.5, size=(num_prompts, dp, half, half)))
        self.styles = Parameter(rng.normal(1.0, 0.5, size=(num_raters, num_prompts)))
        self.prompt_conv = Conv2d(rng, dp, dp, 3)
        self.lka_dw = Conv2d(rng, dp, dp, 3, groups=dp)
        self.lka_dwd = Conv2d(rng, dp, dp, 3, dilation=2, groups=dp)
        self.lka_pw = Conv2d(rng, dp, dp, 1)
        self.lka_out = Conv2d(rng, dp, dp, 1)
        self.context = Conv2d(rng, dp + c4, latent_dim, 3)
        self.resynth = Conv2d(rng, c4, latent_dim, 1)
        self.out = Linear(rng, latent_dim, latent_dim)
        self.channels = channels
        self.latent_dim = latent_dim
        self.num_raters = num_raters
        self.num_prompts = num_prompts

    # -- stages ------------------------------------------------------------

    def project_reduce(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[-3]}")
        return self.reduce(x)

    def prompt_weights(self, xh: Tensor) -> Tensor:
        """Softmax over the N prompt components, ``[B, N]``."""
        return ops.softmax(ops.global_avg_pool(self.prompt_pwc(xh)), axis=-1)

    def compose_prompt(self, rater, w: Tensor) -> Tensor:
        ids = np.asarray(rater, dtype=int).reshape(-1)
        if np.any(ids < 0) or np.any(ids >= self.num_raters):
            raise ValueError(f"rater id out of range [0, {self.num_raters}): {rater}")
        B = w.shape[0]
        ids = np.broadcast_to(ids, (B,))
        coef = w * ops.index(self.styles, ids)  # [B, N]
        N, dp, h, ww = self.prompts.shape
        mixed = ops.reshape(ops.matmul(coef, ops.reshape(self.prompts, (N, dp * h * ww))), (B, dp, h, ww))
        return self.prompt_conv(mixed)

    def lka_recalibrate(self, xh: Tensor, prompt: Tensor) -> Tensor:
        if xh.shape != prompt.shape:
            raise ShapeError(f"prompt shape {prompt.shape} != high-frequency shape {xh.shape}")
        a = self.lka_pw(self.lka_dwd(self.lka_dw(xh + prompt)))
        return self.lka_out(a * xh)

    def local_context(self, xh_refined: Tensor, ll: Tensor) -> Tensor:
        return ops.global_avg_pool(self.context(ops.concat([xh_refined, ll], axis=-3)))

    @staticmethod
    def prior_cross_attend(query: Tensor, bank: PriorBank) -> Tensor:
        """Scaled dot-product attention of ``query [B, D]`` over bank rows ``[B, M_z, D]``."""
        if bank.size < 1:
            raise ShapeError("prior bank is empty")
        q = ops.reshape(query, (query.shape[0], 1, query.shape[-1]))
        out = ops.scaled_dot_attention(q, bank.keys(), bank.samples)
        return ops.reshape(out, (query.shape[0], query.shape[-1]))

    def resynthesize(self, bands: FrequencyBands, xh_refined: Tensor) -> Tensor:
        c4 = bands.ll.shape[-3]
        refined = FrequencyBands(bands.ll, xh_refined[:, :c4], xh_refined[:, c4:2 * c4], xh_refined[:, 2 * c4:])
        # the nonlinearity matters: a linear map of the IDWT averages out every high band
        return ops.global_avg_pool(ops.leaky_relu(self.resynth(idwt_haar2d(refined)), 0.01))

    # -- full chain ----------------------------------------------------------

    def personalize_latent(self, feat: Tensor, z, rater, bank: PriorBank,
                           return_parts: bool = False):
        """Rater-adaptive latent ``z' [B, D]`` from harmonized features and a prior draw."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent dimension {z.shape[-1]} != {self.latent_dim}")
        bands = dwt_haar2d(self.project_reduce(feat))
        xh = bands.high()
        w = self.prompt_weights(xh)
        prompt = self.compose_prompt(rater, w)
        xh_refined = self.lka_recalibrate(xh, prompt)
        xd = self.local_context(xh_refined, bands.ll)
        attended = self.prior_cross_attend(xd + bank.standardize(z), bank)
        resynth = self.resynthesize(bands, xh_refined)
        z_prime = self.out(attended + resynth)
        if return_parts:
            return z_prime, {"weights": w, "prompt": prompt, "x_d": xd, "attended": attended,
                             "resynth": resynth, "bands": bands, "x_h_refined": xh_refined}
        return z_prime
