"""Training objectives.

``ged_loss`` is the two-term sample estimator with distance ``1 - softIoU``;
``total_loss_phase1`` combines reconstruction, KL, harmonization and GED terms;
``phase2_loss`` is the per-rater personalized segmentation loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .backbone import kl_divergence, sample_latent
from .harmonizer import harmonization_penalty

IOU_EPS = 1e-6
DICE_EPS = 1e-6


@dataclass
class LossWeights:
    lambda_kl: float = 2e-3
    lambda_harm: float = 3e-4
    lambda_ged: float = 1.0
    dice_ce_mix: float = 0.5

    def __post_init__(self):
        if min(self.lambda_kl, self.lambda_harm, self.lambda_ged) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.dice_ce_mix <= 1.0:
            raise ValueError("dice_ce_mix must lie in [0, 1]")


@dataclass
class LossReport:
    seg: float
    kl: float
    harm: float
    ged: float
    total: float

    def as_row(self) -> dict:
        return {"seg": self.seg, "kl": self.kl, "harm": self.harm, "ged": self.ged, "total": self.total}


def _flat(t: Tensor, lead: int) -> Tensor:
    return ops.reshape(t, t.shape[:lead] + (-1,))


def iou_distance(a, b) -> Tensor:
    """``1 - (sum ab + eps) / (sum a + sum b - sum ab + eps)`` over trailing spatial axes."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = ops.sum(a * b, axis=(-2, -1))
    union = ops.sum(a, axis=(-2, -1)) + ops.sum(b, axis=(-2, -1)) - inter
    return 1.0 - (inter + IOU_EPS) / (union + IOU_EPS)


def pairwise_iou_distance(p: Tensor, q: Tensor) -> Tensor:
    """Distances between every mask of ``p [.., K, H, W]`` and ``q [.., N, H, W]`` -> ``[.., K, N]``."""
    lead = p.ndim - 2
    pf, qf = _flat(p, lead), _flat(q, lead)
    axes = tuple(range(qf.ndim - 2)) + (qf.ndim - 1, qf.ndim - 2)
    inter = ops.matmul(pf, ops.transpose(qf, axes))
    sp = ops.reshape(ops.sum(pf, axis=-1), pf.shape[:-1] + (1,))
    sq = ops.reshape(ops.sum(qf, axis=-1), qf.shape[:-2] + (1, qf.shape[-2]))
    return 1.0 - (inter + IOU_EPS) / (sp + sq - inter + IOU_EPS)


def ged_loss(preds, annots) -> Tensor:
    """``2/(KN) sum d(P_k, A_i) - 2/(K(K-1)) sum_{k<k'} d(P_k, P_k')``.

    ``preds [.., K, H, W]`` (differentiable), ``annots [.., N, H, W]``; one value
    per leading index.
    """
    preds = preds if isinstance(preds, Tensor) else Tensor(preds)
    annots = annots if isinstance(annots, Tensor) else Tensor(annots)
    K, N = preds.shape[-3], annots.shape[-3]
    if K < 2:
        raise ValueError(f"GED loss needs K >= 2 prediction samples for its pairwise term, got K={K}; "
                         "raise the sample count")
    if N < 1:
        raise ValueError("GED loss needs at least one annotation")
    cross = pairwise_iou_distance(preds, annots)
    self_d = pairwise_iou_distance(preds, preds)
    fidelity = ops.sum(cross, axis=(-2, -1)) * (2.0 / (K * N))
    # full matrix counts each unordered pair twice; the diagonal is excluded explicitly
    diag = ops.sum(self_d * Tensor(np.eye(K)), axis=(-2, -1))
    diversity = (ops.sum(self_d, axis=(-2, -1)) - diag) * (1.0 / (K * (K - 1)))
    return fidelity - diversity


def dice_ce_loss(logits, target, mix: float = 0.5) -> Tensor:
    """``mix * softDice + (1 - mix) * BCE`` per mask (trailing ``H, W`` reduced)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if logits.shape != target.shape:
        raise ValueError(f"logits {logits.shape} and target {target.shape} differ")
    p = ops.sigmoid(logits)
    inter = ops.sum(p * target, axis=(-2, -1))
    denom = ops.sum(p, axis=(-2, -1)) + ops.sum(target, axis=(-2, -1))
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    ce = ops.mean(ops.bce_with_logits(logits, target), axis=(-2, -1))
    return dice * mix + ce * (1.0 - mix)


def total_loss_phase1(model, x: np.ndarray, annots: np.ndarray, rng: np.random.Generator,
                      weights: Optional[LossWeights] = None, K: int = 4, use_ged: bool = True,
                      rater_index: Optional[np.ndarray] = None, memory=None) -> tuple[Tensor, LossReport]:
    """Batch-mean Phase-1 objective.

    ``x [B, 1, H, W]``, ``annots [B, N, H, W]``. Each sample reconstructs one
    uniformly drawn rater's mask through the posterior path; GED uses ``K``
    prior draws against all annotations. Prior draws are appended to
    ``memory`` (any object with ``extend``) when given.
    """
    weights = weights or LossWeights()
    B, N = annots.shape[:2]
    xt = Tensor(x)
    k = rng.integers(0, N, size=B) if rater_index is None else np.asarray(rater_index)
    target = annots[np.arange(B), k]

    feat, mods = model.features(xt)
    prior = model.prior(xt)
    post = model.backbone.posterior_params(xt, Tensor(target))
    eps_post = rng.standard_normal(post.mu.shape)
    z_post = sample_latent(post, Tensor(eps_post))
    logits = model.decode_samples(feat, ops.reshape(z_post, (B, 1, -1)))
    seg = ops.mean(dice_ce_loss(logits[:, 0], Tensor(target), weights.dice_ce_mix))
    kl = ops.mean(kl_divergence(post, prior))
    harm = ops.mean(harmonization_penalty(mods)) if mods else Tensor(0.0)

    total = seg + kl * weights.lambda_kl + harm * weights.lambda_harm
    ged_val = 0.0
    if use_ged:
        z = model.sample_prior(prior, K, rng)
        if memory is not None:
            memory.extend(z.data.reshape(-1, z.shape[-1]))
        preds = ops.sigmoid(model.decode_samples(feat, z))
        ged = ops.mean(ged_loss(preds, Tensor(annots)))
        total = total + ged * weights.lambda_ged
        ged_val = ged.item()
    report = LossReport(seg.item(), kl.item(), harm.item(), ged_val, total.item())
    return total, report


def phase2_loss(model, x: np.ndarray, annots: np.ndarray, rng: np.random.Generator, samples: int = 1,
                mix: float = 0.5, raters: Optional[list[int]] = None, frozen=None) -> Tensor:
    """``sum_i E_z[seg(y_i, A_i)]``, batch-averaged, with ``samples`` prior draws per rater.

    ``frozen`` may carry precomputed ``(features, prior)`` for the batch; the
    backbone and harmonizer are never differentiated here.
    """
    B, N = annots.shape[:2]
    xt = Tensor(x)
    feat, prior = frozen if frozen is not None else frozen_forward(model, xt)
    bank = model.prior_bank(prior, rng)
    raters = list(range(N)) if raters is None else list(raters)
    total = None
    for r in raters:
        acc = None
        for _ in range(samples):
            z = model.sample_prior(prior, 1, rng)
            zp = model.personalize(feat, ops.reshape(z, (B, -1)), r, bank)
            logits = model.decode_samples(feat, ops.reshape(zp, (B, 1, -1)), r)[:, 0]
            term = ops.mean(dice_ce_loss(logits, Tensor(annots[:, r]), mix))
            acc = term if acc is None else acc + term
        acc = acc * (1.0 / samples)
        total = acc if total is None else total + acc
    return total


def frozen_forward(model, xt: Tensor):
    """Backbone features and prior evaluated off-tape (no gradient reaches them)."""
    with no_grad():
        feat, _ = model.features(xt)
        prior = model.prior(xt)
    return feat, prior
