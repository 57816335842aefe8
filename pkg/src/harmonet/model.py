"""The full network: backbone, optional noise harmonizer, personalizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .autodiff import Module, Tensor, ops
from .backbone import Backbone, BackboneConfig, GaussianLatent, as_batch, sample_latent
from .harmonizer import NoiseHarmonizer
from .personalizer import Personalizer, PriorBank


@dataclass
class ModelConfig:
    in_channels: int = 1
    image_size: int = 32
    base_width: int = 8
    depth: int = 3
    latent_dim: int = 6
    num_raters: int = 4
    latent_width: Optional[int] = None
    harmonizer: bool = True
    num_tokens: int = 4
    token_dim: int = 16
    num_prompts: int = 4
    bank_size: int = 16

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.in_channels, self.base_width, self.depth, self.latent_dim,
                              self.num_raters, self.latent_width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PredictionSet:
    """``K`` soft masks for one image."""

    masks: np.ndarray  # [K, H, W]
    seed: int

    @property
    def K(self) -> int:
        return self.masks.shape[0]


class HarmonizerNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bcfg = cfg.backbone()
        self.backbone = Backbone(bcfg, rng)
        widths = bcfg.widths()
        harm_channels = [widths[s] for s in range(cfg.depth - 2, -1, -1)] + [widths[0]]
        # built even when disabled so parameter streams stay aligned across ablations
        self.harmonizer = NoiseHarmonizer(rng, harm_channels, cfg.num_tokens, cfg.token_dim)
        self.personalizer = Personalizer(rng, widths[0], cfg.latent_dim, cfg.num_raters,
                                         cfg.image_size, cfg.num_prompts)
        self.use_harmonizer = cfg.harmonizer

    # -- parameter groups ------------------------------------------------------

    def group_names(self) -> dict[str, list[str]]:
        names = list(self.parameters())
        groups = {k: [f"backbone.{n}" for n in v] for k, v in self.backbone.groups().items()}
        groups["harmonizer"] = [n for n in names if n.startswith("harmonizer.")]
        groups["personalizer"] = [n for n in names if n.startswith("personalizer.")]
        return groups

    def phase1_parameters(self) -> dict:
        params = self.parameters()
        g = self.group_names()
        names = g["encoder"] + g["decoder"] + g["prior"] + g["posterior"]
        if self.use_harmonizer:
            names += g["harmonizer"]
        return {n: params[n] for n in names}

    def phase2_parameters(self) -> dict:
        params = self.parameters()
        return {n: params[n] for n in self.group_names()["personalizer"]}

    def freeze_mask(self) -> set[str]:
        g = self.group_names()
        return set(g["encoder"] + g["decoder"] + g["prior"] + g["posterior"] + g["harmonizer"])

    # -- forward pieces ----------------------------------------------------

    @property
    def active_harmonizer(self) -> Optional[NoiseHarmonizer]:
        return self.harmonizer if self.use_harmonizer else None

    def features(self, x) -> tuple[Tensor, list]:
        """Harmonized full-resolution decoder features for a batch of images."""
        f = self.backbone.encode(x)
        return self.backbone.decode_trunk(f, self.active_harmonizer)

    def prior(self, x) -> GaussianLatent:
        return self.backbone.prior_params(x)

    def decode_samples(self, feat: Tensor, z: Tensor, rater_id=None, return_feature=False):
        """Decode ``z [B, K, D]`` against ``feat [B, C, H, W]``; logits ``[B, K, H, W]``."""
        B, K, D = z.shape
        C, H, W = feat.shape[1:]
        tiled = ops.reshape(ops.broadcast_to(ops.reshape(feat, (B, 1, C, H, W)), (B, K, C, H, W)),
                            (B * K, C, H, W))
        rid = None
        if rater_id is not None:
            rid = np.repeat(np.broadcast_to(np.asarray(rater_id, dtype=int), (B,)), K)
        out = self.backbone.decode_head(tiled, ops.reshape(z, (B * K, D)), rid, return_feature)
        if return_feature:
            logits, h = out
            return ops.reshape(logits, (B, K, H, W)), ops.reshape(h, (B, K) + h.shape[1:])
        return ops.reshape(out, (B, K, H, W))

    def sample_prior(self, prior: GaussianLatent, K: int, rng: np.random.Generator) -> Tensor:
        B, D = prior.mu.shape
        eps = rng.standard_normal((B, K, D))
        mu = ops.reshape(prior.mu, (B, 1, D))
        ls = ops.reshape(prior.log_sigma, (B, 1, D))
        return sample_latent(GaussianLatent(mu, ls), Tensor(eps))

    def prior_bank(self, prior: GaussianLatent, rng: np.random.Generator,
                   size: Optional[int] = None) -> PriorBank:
        samples = self.sample_prior(prior, size or self.cfg.bank_size, rng).detach()
        return PriorBank(samples, prior.mu.data.copy(), np.exp(prior.log_sigma.data))

    def personalize(self, feat: Tensor, z: Tensor, rater, bank: PriorBank) -> Tensor:
        return self.personalizer.personalize_latent(feat, z, rater, bank)

    # -- inference -------------------------------------------------------------

    def sample_probs(self, x, K: int, rng: np.random.Generator) -> np.ndarray:
        """Sigmoid masks from ``K`` prior draws, ``[B, K, H, W]`` (no personalization)."""
        if K < 1:
            raise ValueError("K must be >= 1")
        x, _ = as_batch(x)
        feat, _ = self.features(x)
        z = self.sample_prior(self.prior(x), K, rng)
        return ops.sigmoid(self.decode_samples(feat, z)).data

    def predict_set(self, x, K: int, seed: int) -> PredictionSet:
        probs = self.sample_probs(x, K, np.random.default_rng(seed))
        return PredictionSet(probs[0], seed)

    def mean_prediction(self, x) -> np.ndarray:
        """Sigmoid mask decoded at the prior mean, ``[B, H, W]``."""
        x, _ = as_batch(x)
        feat, _ = self.features(x)
        mu = self.prior(x).mu
        z = ops.reshape(mu, (mu.shape[0], 1, mu.shape[1]))
        return ops.sigmoid(self.decode_samples(feat, z)).data[:, 0]

    def personalized_probs(self, x, raters, rng: np.random.Generator, samples: int = 1,
                           return_feature: bool = False):
        """Per-rater soft masks ``[B, R, H, W]`` for the listed rater ids.

        Each rater's mask averages ``samples`` personalized decodes.
        """
        x, _ = as_batch(x)
        feat, _ = self.features(x)
        prior = self.prior(x)
        bank = self.prior_bank(prior, rng)
        raters = list(raters)
        B = x.shape[0]
        out = np.zeros((B, len(raters)) + x.shape[-2:])
        feats = []
        for j, r in enumerate(raters):
            acc = 0.0
            for _ in range(samples):
                z = self.sample_prior(prior, 1, rng)
                zp = self.personalize(feat, ops.reshape(z, (B, -1)), r, bank)
                logits, h = self.decode_samples(feat, ops.reshape(zp, (B, 1, -1)), r, return_feature=True)
                acc = acc + ops.sigmoid(logits).data[:, 0]
                feats.append(h.data[:, 0])
            out[:, j] = acc / samples
        if return_feature:
            return out, np.stack(feats, axis=1)
        return out
