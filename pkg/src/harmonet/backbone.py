"""Probabilistic U-Net backbone: encoder, decoder, prior and posterior nets.

The decoder is split in two. The *trunk* upsamples the encoder pyramid back to
full resolution and does not depend on the latent code, so it runs once per
image; a harmonizer (if given) modulates every trunk stage. The *head* injects
the spatially broadcast latent ``z`` (and optionally a rater one-hot block)
with 1x1 convolutions, which is cheap enough to evaluate for many samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Conv2d, Linear, Module, Parameter, Tensor, ops
from .autodiff.ops import ShapeError

LOG_SIGMA_BOUND = 10.0
LEAK = 0.01


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    in_channels: int = 1
    base_width: int = 8
    depth: int = 3
    latent_dim: int = 6
    num_raters: int = 4
    latent_width: Optional[int] = None  # prior/posterior trunk width; default base_width // 2

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.base_width < 4:
            raise ConfigError("base_width must be >= 4")
        if self.latent_dim < 1 or self.num_raters < 1 or self.in_channels < 1:
            raise ConfigError("latent_dim, num_raters and in_channels must be positive")
        if self.latent_width is None:
            self.latent_width = max(self.base_width // 2, 2)

    def widths(self, base: Optional[int] = None) -> list[int]:
        base = self.base_width if base is None else base
        return [base * 2 ** s for s in range(self.depth)]

    def check_image(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected image [B,{self.in_channels},H,W], got {x.shape}")
        H, W = x.shape[-2:]
        step = 2 ** self.depth
        if H % step or W % step:
            raise ShapeError(f"image size {H}x{W} not divisible by 2^depth = {step}")


@dataclass
class GaussianLatent:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)


@dataclass
class EncoderFeatures:
    """Stage ``s`` (1-based) has spatial size ``(H / 2^s, W / 2^s)``; coarsest last."""

    stages: list[Tensor]
    image: Tensor = field(repr=False)


def as_batch(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


class ConvBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        self.conv_a = Conv2d(rng, c_in, c_out, 3)
        self.conv_b = Conv2d(rng, c_out, c_out, 3)

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.leaky_relu(self.conv_a(x), LEAK)
        return ops.leaky_relu(self.conv_b(x), LEAK)


class Trunk(Module):
    """Conv block then 2x average pooling per stage."""

    def __init__(self, rng, c_in: int, widths: list[int]):
        chans = [c_in] + widths
        self.blocks = [ConvBlock(rng, chans[i], chans[i + 1]) for i in range(len(widths))]

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for block in self.blocks:
            x = ops.avg_pool2d(block(x), 2)
            feats.append(x)
        return feats


class LatentNet(Module):
    """Trunk + global average pooling + affine head to ``(mu, log_sigma)``."""

    def __init__(self, rng, c_in: int, widths: list[int], latent_dim: int):
        self.trunk = Trunk(rng, c_in, widths)
        self.head = Linear(rng, widths[-1], 2 * latent_dim)
        self.latent_dim = latent_dim

    def __call__(self, x: Tensor) -> GaussianLatent:
        h = ops.global_avg_pool(self.trunk(x)[-1])
        out = self.head(h)
        d = self.latent_dim
        return GaussianLatent(out[:, :d], ops.clamp(out[:, d:], -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.widths()
        self.encoder = Trunk(rng, cfg.in_channels, w)
        # decoder trunk stage for level s consumes up(level s+1) ++ skip(level s)
        self.decoder = [ConvBlock(rng, w[s + 1] + w[s], w[s]) for s in range(cfg.depth - 2, -1, -1)]
        self.decoder_top = ConvBlock(rng, w[0] + cfg.in_channels, w[0])
        c, d, r = w[0], cfg.latent_dim, cfg.num_raters
        self.head_in = Parameter(rng.uniform(-1, 1, (c, c + d, 1, 1)) * np.sqrt(6.0 / (c + d)))
        self.head_rater = Parameter(np.zeros((c, r, 1, 1)))
        self.head_in_bias = Parameter(np.zeros(c))
        self.head_mid = Conv2d(rng, c, c, 1)
        self.head_out = Conv2d(rng, c, 1, 1)
        lw = cfg.widths(cfg.latent_width)
        self.prior = LatentNet(rng, cfg.in_channels, lw, cfg.latent_dim)
        self.posterior = LatentNet(rng, cfg.in_channels + 1, lw, cfg.latent_dim)

    # -- encoder / latent nets -------------------------------------------

    def encode(self, x) -> EncoderFeatures:
        x, _ = as_batch(x)
        self.cfg.check_image(x)
        return EncoderFeatures(self.encoder(x), x)

    def prior_params(self, x) -> GaussianLatent:
        x, _ = as_batch(x)
        self.cfg.check_image(x)
        return self.prior(x)

    def posterior_params(self, x, annotation) -> GaussianLatent:
        x, _ = as_batch(x)
        self.cfg.check_image(x)
        a = annotation if isinstance(annotation, Tensor) else Tensor(annotation)
        if a.ndim == 2:
            a = ops.reshape(a, (1, 1) + a.shape)
        elif a.ndim == 3:
            a = ops.reshape(a, (a.shape[0], 1) + a.shape[1:])
        if a.shape[0] != x.shape[0] or a.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"annotation shape {a.shape} does not match image {x.shape}")
        return self.posterior(ops.concat([x, a], axis=1))

    # -- decoder -----------------------------------------------------------

    def decode_trunk(self, f: EncoderFeatures, harmonizer=None) -> tuple[Tensor, list]:
        """Full-resolution decoder features and the modulations applied on the way."""
        mods = []
        h = f.stages[-1]
        layer = 0
        for block, skip in zip(self.decoder, reversed(f.stages[:-1])):
            h = block(ops.concat([ops.upsample_nearest(h, 2), skip], axis=1))
            h, layer = self._harmonize(h, harmonizer, layer, mods)
        h = self.decoder_top(ops.concat([ops.upsample_nearest(h, 2), f.image], axis=1))
        h, _ = self._harmonize(h, harmonizer, layer, mods)
        return h, mods

    @staticmethod
    def _harmonize(h, harmonizer, layer, mods):
        if harmonizer is None:
            return h, layer + 1
        m = harmonizer.modulation(h, layer)
        mods.append(m)
        return harmonizer.apply_modulation(h, m), layer + 1

    def head_input(self, feat: Tensor, z: Tensor, rater_id=None) -> Tensor:
        """Channel concatenation ``[features, broadcast z, (rater one-hot)]``."""
        B, _, H, W = feat.shape
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim == 1:
            z = ops.reshape(z, (1, -1))
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"latent dimension {z.shape[-1]} != {self.cfg.latent_dim}")
        if z.shape[0] != B:
            z = ops.broadcast_to(z, (B, z.shape[-1]))
        zmap = ops.broadcast_to(ops.reshape(z, z.shape + (1, 1)), (B, z.shape[-1], H, W))
        parts = [feat, zmap]
        if rater_id is not None:
            parts.append(Tensor(self.rater_onehot(rater_id, B, H, W)))
        return ops.concat(parts, axis=1)

    def rater_onehot(self, rater_id, B: int, H: int, W: int) -> np.ndarray:
        ids = np.broadcast_to(np.asarray(rater_id, dtype=int), (B,))
        if np.any(ids < 0) or np.any(ids >= self.cfg.num_raters):
            raise ValueError(f"rater id out of range [0, {self.cfg.num_raters}): {rater_id}")
        onehot = np.zeros((B, self.cfg.num_raters, H, W))
        onehot[np.arange(B), ids] = 1.0
        return onehot

    def decode_head(self, feat: Tensor, z, rater_id=None, return_feature: bool = False):
        x = self.head_input(feat, z, rater_id)
        w = self.head_in if rater_id is None else ops.concat([self.head_in, self.head_rater], axis=1)
        h = ops.leaky_relu(ops.conv2d(x, w, self.head_in_bias), LEAK)
        h = ops.leaky_relu(self.head_mid(h), LEAK)
        logits = self.head_out(h)
        return (logits, h) if return_feature else logits

    def decode(self, f: EncoderFeatures, z, rater_id=None, harmonizer=None) -> Tensor:
        feat, _ = self.decode_trunk(f, harmonizer)
        return self.decode_head(feat, z, rater_id)

    def groups(self) -> dict[str, list[str]]:
        names = list(self.parameters())
        out = {"encoder": [], "decoder": [], "prior": [], "posterior": []}
        for n in names:
            top = n.split(".")[0]
            key = {"encoder": "encoder", "prior": "prior", "posterior": "posterior"}.get(top, "decoder")
            out[key].append(n)
        return out


def sample_latent(g: GaussianLatent, epsilon) -> Tensor:
    """Reparameterized draw ``mu + exp(log_sigma) * epsilon``."""
    eps = epsilon if isinstance(epsilon, Tensor) else Tensor(epsilon)
    if eps.shape[-1] != g.mu.shape[-1]:
        raise ShapeError(f"epsilon dimension {eps.shape[-1]} != latent dimension {g.mu.shape[-1]}")
    return g.mu + ops.exp(g.log_sigma) * eps


def kl_divergence(q: GaussianLatent, p: GaussianLatent) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the last axis."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ShapeError("KL between latents of different dimension")
    var_ratio = ops.exp(2.0 * (q.log_sigma - p.log_sigma))
    mean_term = (q.mu - p.mu) ** 2 * ops.exp(-2.0 * p.log_sigma)
    terms = p.log_sigma - q.log_sigma + 0.5 * (var_ratio + mean_term) - 0.5
    return ops.sum(terms, axis=-1)
