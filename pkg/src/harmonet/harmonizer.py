"""Noise harmonizer: artifact-token attention driving channel-wise affine modulation.

Learnable artifact tokens query each decoder feature map; the pooled token
summaries pass through an MLP shared across layers, and a per-layer head emits
``(delta_gamma, beta)``. Layers of different width share the attention and MLP
through per-layer 1x1 projections into a common token width.

Heads start at zero, so a fresh harmonizer is the exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2d, Linear, Module, Parameter, Tensor, ops
from .autodiff.ops import ShapeError

LEAK = 0.01


@dataclass
class ModulationPair:
    gamma: Tensor  # [B, C]
    beta: Tensor  # [B, C]


class NoiseHarmonizer(Module):
    def __init__(self, rng: np.random.Generator, channels: list[int], num_tokens: int = 4,
                 token_dim: int = 16):
        if num_tokens < 1:
            raise ValueError("need at least one artifact token")
        self.tokens = Parameter(rng.normal(0.0, 1.0, size=(num_tokens, token_dim)))
        self.proj = [Conv2d(rng, c, token_dim, 1) for c in channels]
        self.wq = Linear(rng, token_dim, token_dim, bias=False)
        self.wk = Linear(rng, token_dim, token_dim, bias=False)
        self.wv = Linear(rng, token_dim, token_dim, bias=False)
        self.w1 = Linear(rng, token_dim, token_dim)
        self.w2 = Linear(rng, token_dim, token_dim)
        self.heads = [Linear(rng, token_dim, 2 * c, zero_init=True) for c in channels]
        self.channels = list(channels)
        self.token_dim = token_dim

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    def token_attend(self, f: Tensor, layer: int) -> Tensor:
        """Token summaries ``[B, M, Dh]``: softmax over spatial positions of the layer's keys."""
        single = f.ndim == 3
        if single:
            f = ops.reshape(f, (1,) + f.shape)
        B, C, H, W = f.shape
        if H * W == 0:
            raise ShapeError("token attention over an empty spatial extent")
        if C != self.channels[layer]:
            raise ShapeError(f"layer {layer} expects {self.channels[layer]} channels, got {C}")
        seq = ops.transpose(ops.reshape(self.proj[layer](f), (B, self.token_dim, H * W)), (0, 2, 1))
        q = self.wq(self.tokens)
        out = ops.scaled_dot_attention(q, self.wk(seq), self.wv(seq))
        return out[0] if single else out

    def predict_modulation(self, summary: Tensor, layer: int) -> ModulationPair:
        if summary.ndim == 2:
            summary = ops.reshape(summary, (1,) + summary.shape)
        pooled = ops.mean(summary, axis=1)  # average over tokens
        h = ops.leaky_relu(self.w1(pooled), LEAK)
        h = ops.leaky_relu(self.w2(h), LEAK)
        out = self.heads[layer](h)
        c = self.channels[layer]
        return ModulationPair(1.0 + out[:, :c], out[:, c:])

    def modulation(self, f: Tensor, layer: int) -> ModulationPair:
        return self.predict_modulation(self.token_attend(f, layer), layer)

    @staticmethod
    def apply_modulation(f: Tensor, m: ModulationPair) -> Tensor:
        return apply_modulation(f, m)


def apply_modulation(f: Tensor, m: ModulationPair) -> Tensor:
    """``gamma * f + beta`` per channel, broadcast over space."""
    single = f.ndim == 3
    gamma, beta = m.gamma, m.beta
    if gamma.ndim == 1:
        gamma = ops.reshape(gamma, (1, -1))
        beta = ops.reshape(beta, (1, -1))
    C = f.shape[-3]
    if gamma.shape[-1] != C or beta.shape[-1] != C:
        raise ShapeError(f"modulation width {gamma.shape[-1]} != feature channels {C}")
    g4 = ops.reshape(gamma, gamma.shape + (1, 1))
    b4 = ops.reshape(beta, beta.shape + (1, 1))
    if single:
        g4, b4 = g4[0], b4[0]
    return f * g4 + b4


def harmonization_penalty(mods: list[ModulationPair]) -> Tensor:
    """``sum_l ||gamma_l - 1||^2 + ||beta_l||^2``, per sample when batched."""
    if not mods:
        raise ValueError("harmonization penalty needs at least one layer")
    total = None
    for m in mods:
        term = ops.sum((m.gamma - 1.0) ** 2, axis=-1) + ops.sum(m.beta ** 2, axis=-1)
        total = term if total is None else total + term
    return total
