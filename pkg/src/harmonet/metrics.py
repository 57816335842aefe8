"""Evaluation metrics for sets of stochastic and per-rater segmentations.

Masks are ``[K, H, W]`` (predictions, soft in [0, 1]) and ``[N, H, W]``
(annotations, binary). Hard Dice binarizes predictions at 0.5; the Dice of
two empty masks is 1.
"""

from __future__ import annotations

import csv
import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

SOFT_DICE_EPS = 1e-6
DICE_SOFT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
ECE_BINS = 10
AGREEMENT_DELTA = 0.1
CORRECTNESS_CLASSES = ("TP", "FP", "FN", "TN")
AGREEMENT_REGIMES = ("agree", "somewhat", "disagree")
K_SWEEP = (1, 4, 8, 16, 32)


class MetricWarning(UserWarning):
    pass


def _stack(masks, name: str) -> np.ndarray:
    m = np.asarray(masks, dtype=float)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise ValueError(f"{name} must be [n, H, W], got shape {m.shape}")
    if m.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return m


# -- GED ---------------------------------------------------------------------

def soft_dice_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``1 - (2 sum ab + eps) / (sum a + sum b + eps)`` for every pair, ``[n_a, n_b]``."""
    af = a.reshape(a.shape[0], -1)
    bf = b.reshape(b.shape[0], -1)
    inter = af @ bf.T
    denom = af.sum(1)[:, None] + bf.sum(1)[None, :]
    return 1.0 - (2.0 * inter + SOFT_DICE_EPS) / (denom + SOFT_DICE_EPS)


def _pair_mean(d: np.ndarray, what: str) -> float:
    n = d.shape[0]
    if n < 2:
        warnings.warn(f"{what} has a single member; its self-distance term is taken as 0 (biased)",
                      MetricWarning, stacklevel=3)
        return 0.0
    return float(d[np.triu_indices(n, 1)].mean())


def ged_metric(preds, annots, estimator: str = "all") -> float:
    """Squared generalized energy distance ``2E d(P,A) - E d(P,P') - E d(A,A')``.

    ``estimator="all"`` averages every term over all ordered pairs, the
    diagonal included, so ``ged_metric(S, S) == 0`` for any set ``S``.
    ``estimator="pairs"`` averages the self terms over distinct unordered pairs
    instead; with a single member that term falls back to 0 with a warning.
    """
    p = _stack(preds, "predictions")
    a = _stack(annots, "annotations")
    if p.shape[1:] != a.shape[1:]:
        raise ValueError(f"prediction masks {p.shape[1:]} and annotation masks {a.shape[1:]} differ")
    cross = soft_dice_distance_matrix(p, a).mean()
    dpp = soft_dice_distance_matrix(p, p)
    daa = soft_dice_distance_matrix(a, a)
    if estimator == "all":
        return float(2.0 * cross - dpp.mean() - daa.mean())
    if estimator == "pairs":
        return float(2.0 * cross - _pair_mean(dpp, "prediction set") - _pair_mean(daa, "annotation set"))
    raise ValueError(f"unknown GED estimator {estimator!r}")


# -- Dice family -------------------------------------------------------------

def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    s = a.sum() + b.sum()
    if s == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / s)


def dice_matrix(preds, annots) -> np.ndarray:
    """Hard Dice for every (prediction, annotation) pair, ``[K, N]``."""
    p = _stack(preds, "predictions") >= 0.5
    a = _stack(annots, "annotations") >= 0.5
    pf = p.reshape(p.shape[0], -1).astype(float)
    af = a.reshape(a.shape[0], -1).astype(float)
    inter = pf @ af.T
    denom = pf.sum(1)[:, None] + af.sum(1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(denom > 0, 2.0 * inter / np.maximum(denom, 1e-300), 1.0)
    return d


def dice_soft(preds, annots, thresholds: Sequence[float] = DICE_SOFT_THRESHOLDS) -> float:
    pm = _stack(preds, "predictions").mean(0)
    am = _stack(annots, "annotations").mean(0)
    return float(np.mean([dice(pm >= t, am >= t) for t in thresholds]))


def dice_max(preds, annots) -> float:
    return float(dice_matrix(preds, annots).max(axis=0).mean())


def match_assignment(dice_mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Optimal one-to-one assignment covering every annotation (column).

    When there are fewer predictions than annotations, zero-Dice dummy rows
    are appended. Returns ``(rows, cols, cost)`` with cost ``sum(1 - Dice)``.
    """
    d = np.asarray(dice_mat, dtype=float)
    K, N = d.shape
    if K < N:
        d = np.vstack([d, np.zeros((N - K, N))])
    rows, cols = linear_sum_assignment(1.0 - d)
    return rows, cols, float((1.0 - d[rows, cols]).sum())


def brute_force_assignment_cost(dice_mat: np.ndarray) -> float:
    """Reference: minimum over all injective annotation->prediction maps."""
    d = np.asarray(dice_mat, dtype=float)
    K, N = d.shape
    if K < N:
        d = np.vstack([d, np.zeros((N - K, N))])
        K = N
    best = np.inf
    for perm in itertools.permutations(range(K), N):
        best = min(best, sum(1.0 - d[perm[j], j] for j in range(N)))
    return float(best)


def dice_match(preds, annots) -> float:
    d = dice_matrix(preds, annots)
    N = d.shape[1]
    _, _, cost = match_assignment(d)
    return float(1.0 - cost / N)


def dice_match_from_matrix(d: np.ndarray) -> float:
    _, _, cost = match_assignment(d)
    return float(1.0 - cost / d.shape[1])


def dice_per_rater(personalized, annots) -> tuple[np.ndarray, float]:
    p = _stack(personalized, "personalized predictions")
    a = _stack(annots, "annotations")
    if p.shape[0] != a.shape[0]:
        raise ValueError(f"{p.shape[0]} personalized predictions for {a.shape[0]} raters")
    vec = np.array([dice(p[i] >= 0.5, a[i] >= 0.5) for i in range(a.shape[0])])
    return vec, float(vec.mean())


# -- calibration -------------------------------------------------------------

@dataclass
class CalibrationBins:
    counts: np.ndarray
    confidence: np.ndarray  # mean probability per bin (0 when empty)
    frequency: np.ndarray  # empirical positive rate per bin (0 when empty)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def calibration_bins(probs, labels, n_bins: int = ECE_BINS) -> CalibrationBins:
    p = np.asarray(probs, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{p.size} probabilities for {y.size} labels")
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    idx = np.minimum((p * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(float)
    psum = np.bincount(idx, weights=p, minlength=n_bins)
    ysum = np.bincount(idx, weights=y, minlength=n_bins)
    safe = np.maximum(counts, 1)
    return CalibrationBins(counts.astype(int), np.where(counts > 0, psum / safe, 0.0),
                           np.where(counts > 0, ysum / safe, 0.0))


def ece(probs, labels, n_bins: int = ECE_BINS) -> float:
    b = calibration_bins(probs, labels, n_bins)
    if b.total == 0:
        return 0.0
    return float(np.sum(b.counts / b.total * np.abs(b.frequency - b.confidence)))


def brier(probs, labels) -> float:
    p = np.asarray(probs, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{p.size} probabilities for {y.size} labels")
    return float(np.mean((p - y) ** 2))


# -- uncertainty -------------------------------------------------------------

def binary_entropy(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(p < 1, (1 - p) * np.log2(1 - p), 0.0))
    return np.clip(h, 0.0, 1.0)


def entropy_map(preds) -> np.ndarray:
    """Binary entropy (bits) of the mean prediction, ``[H, W]`` in [0, 1]."""
    return binary_entropy(_stack(preds, "predictions").mean(0))


def correctness_partition(preds, annots) -> dict[str, np.ndarray]:
    """Entropy values of unanimous-consensus pixels split into TP/FP/FN/TN.

    The mean prediction is thresholded at 0.5 (ties count as foreground);
    pixels where raters disagree are dropped.
    """
    p = _stack(preds, "predictions")
    a = _stack(annots, "annotations")
    pbar = p.mean(0)
    h = binary_entropy(pbar)
    amean = a.mean(0)
    unanimous = (amean == 0) | (amean == 1)
    if not unanimous.any():
        warnings.warn("no unanimous pixels; correctness report is empty", MetricWarning, stacklevel=2)
    gt = amean == 1
    pred = pbar >= 0.5
    classes = {
        "TP": pred & gt, "FP": pred & ~gt, "FN": ~pred & gt, "TN": ~pred & ~gt,
    }
    return {k: h[v & unanimous] for k, v in classes.items()}


def agreement_regimes(annots, delta: float = AGREEMENT_DELTA) -> dict[str, np.ndarray]:
    """Boolean pixel masks for the agree / somewhat / disagree regimes of ``p_A``."""
    a = _stack(annots, "annotations")
    if a.shape[0] < 2:
        raise ValueError("agreement regimes need at least two raters")
    pa = a.mean(0)
    tol = 1e-12
    agree = (pa <= delta + tol) | (pa >= 1 - delta - tol)
    disagree = np.abs(pa - 0.5) <= delta + tol
    return {"agree": agree, "somewhat": ~agree & ~disagree, "disagree": disagree & ~agree}


def agreement_bins(annots, entropy, delta: float = AGREEMENT_DELTA) -> dict[str, np.ndarray]:
    """Entropy values grouped by rater agreement regime."""
    h = np.asarray(entropy, dtype=float)
    return {k: h[m] for k, m in agreement_regimes(annots, delta).items()}


def summarize(values: np.ndarray) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"count": 0, "median": float("nan"), "mean": float("nan")}
    return {"count": int(v.size), "median": float(np.median(v)), "mean": float(v.mean())}


def size_stratify(cases: Sequence[tuple[float, float]]) -> list[dict]:
    """Split ``(consensus_area, dice)`` cases into three equally populated area bins.

    Cases are ordered by area with a stable sort (ties keep input order);
    when the count is not a multiple of 3 the earlier bins get the extra case.
    """
    if len(cases) < 3:
        raise ValueError(f"size stratification needs at least 3 cases, got {len(cases)}")
    arr = np.asarray(cases, dtype=float)
    order = np.argsort(arr[:, 0], kind="stable")
    out = []
    for name, idx in zip(("small", "medium", "large"), np.array_split(order, 3)):
        out.append({"bin": name, "count": int(idx.size), "area_min": float(arr[idx, 0].min()),
                    "area_max": float(arr[idx, 0].max()), "mean_dice": float(arr[idx, 1].mean()),
                    "cases": idx.tolist()})
    return out


def spectral_response(feature) -> np.ndarray:
    """``log(1 + |rfft|)`` of the central row, magnitude averaged over channels.

    ``feature [C, H, W]`` (or ``[H, W]``); returns ``W // 2 + 1`` bins.
    """
    f = np.asarray(feature, dtype=float)
    if f.ndim == 2:
        f = f[None]
    if f.shape[-2] < 2:
        raise ValueError("spectral response needs H >= 2")
    row = f[:, f.shape[-2] // 2, :]
    return np.log1p(np.abs(np.fft.rfft(row, axis=-1)).mean(0))


def upper_quartile_mean(spectrum: np.ndarray) -> float:
    """Mean of the top quarter of frequency bins (rounded up to at least one bin)."""
    s = np.asarray(spectrum, dtype=float)
    n = max(1, int(np.ceil(s.shape[-1] / 4)))
    return float(s[..., -n:].mean())


# -- dataset-level evaluation ----------------------------------------------

@dataclass
class MetricsReport:
    ged: float
    dice_soft: float
    dice_max: float
    dice_match: float
    dice_per_rater: list
    dice_mean: float
    ece_per_rater: list
    brier_per_rater: list
    entropy_by_class: dict
    entropy_by_regime: dict
    size_bins: list
    k: int
    seed: int
    cases: list = field(default_factory=list)

    def __post_init__(self):
        if self.dice_match > self.dice_max + 1e-12:
            raise AssertionError("dice_match exceeded dice_max")

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("cases")
        return d

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        write_csv(csv_path, case_columns(len(self.dice_per_rater)), self.cases)


def case_columns(num_raters: int) -> list[str]:
    return (["case", "domain", "ged", "dice_soft", "dice_max", "dice_match", "consensus_area", "dice_consensus"]
            + [f"dice_r{i}" for i in range(num_raters)] + ["dice_mean"])


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def clamp_ged(value: float) -> float:
    if value < -1e-9:
        warnings.warn(f"negative GED estimate {value:.3e} clamped to 0", MetricWarning, stacklevel=2)
    return max(value, 0.0)


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield np.arange(s, min(n, s + size))


def evaluate(model, images: np.ndarray, masks: np.ndarray, K: int = 16, seed: int = 0,
             domains: Optional[np.ndarray] = None, batch: int = 16, personalized: bool = True) -> MetricsReport:
    """Full metric suite over a split: ``images [n, 1, H, W]``, ``masks [n, N, H, W]``."""
    n, N = masks.shape[:2]
    rng = np.random.default_rng(seed)
    sample_probs = np.concatenate([model.sample_probs(images[i], K, rng) for i in _batches(n, batch)])
    if personalized:
        pers = np.concatenate([model.personalized_probs(images[i], range(N), rng) for i in _batches(n, batch)])
    else:
        pers = np.repeat(sample_probs.mean(1, keepdims=True), N, axis=1)
    cases, classes, regimes = [], {c: [] for c in CORRECTNESS_CLASSES}, {r: [] for r in AGREEMENT_REGIMES}
    for i in range(n):
        P, A = sample_probs[i], masks[i]
        dm = dice_matrix(P, A)
        per, mean = dice_per_rater(pers[i], A)
        cons = A.mean(0) >= 0.5
        row = {"case": i, "domain": int(domains[i]) if domains is not None else -1,
               "ged": ged_metric(P, A), "dice_soft": dice_soft(P, A), "dice_max": float(dm.max(0).mean()),
               "dice_match": dice_match_from_matrix(dm), "consensus_area": int(cons.sum()),
               "dice_consensus": dice(P.mean(0) >= 0.5, cons), "dice_mean": mean}
        row.update({f"dice_r{r}": float(per[r]) for r in range(N)})
        cases.append(row)
        for c, v in correctness_partition(P, A).items():
            classes[c].append(v)
        if N >= 2:
            h = entropy_map(P)
            for r, v in agreement_bins(A, h).items():
                regimes[r].append(v)
    per_rater = np.array([[c[f"dice_r{r}"] for r in range(N)] for c in cases])
    return MetricsReport(
        ged=clamp_ged(float(np.mean([c["ged"] for c in cases]))),
        dice_soft=float(np.mean([c["dice_soft"] for c in cases])),
        dice_max=float(np.mean([c["dice_max"] for c in cases])),
        dice_match=float(np.mean([c["dice_match"] for c in cases])),
        dice_per_rater=per_rater.mean(0).tolist(),
        dice_mean=float(per_rater.mean()),
        ece_per_rater=[ece(pers[:, r], masks[:, r]) for r in range(N)],
        brier_per_rater=[brier(pers[:, r], masks[:, r]) for r in range(N)],
        entropy_by_class={c: summarize(np.concatenate(v)) for c, v in classes.items()},
        entropy_by_regime={r: summarize(np.concatenate(v)) if v else summarize(np.array([]))
                           for r, v in regimes.items()},
        size_bins=[{k: v for k, v in b.items() if k != "cases"}
                   for b in size_stratify([(c["consensus_area"], c["dice_consensus"]) for c in cases])]
        if n >= 3 else [],
        k=K, seed=seed, cases=cases,
    )


def ged_vs_samples(model, images: np.ndarray, masks: np.ndarray, k_list: Sequence[int] = K_SWEEP,
                   seed: int = 0, batch: int = 16) -> list[dict]:
    """Mean, std and standard error of per-case GED for each sample count."""
    rows = []
    for K in k_list:
        rng = np.random.default_rng([seed, K])
        vals = []
        for idx in _batches(len(images), batch):
            probs = model.sample_probs(images[idx], K, rng)
            vals.extend(ged_metric(probs[j], masks[i]) for j, i in enumerate(idx))
        v = np.array(vals)
        rows.append({"K": int(K), "mean": float(v.mean()), "std": float(v.std()),
                     "sem": float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0,
                     "n": int(v.size)})
    return rows
