"""Two-phase training, checkpoints and inference entry points."""

from __future__ import annotations

import json
import logging
import struct
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Adam, NonFiniteError, Tape, Tensor
from .losses import LossReport, LossWeights, phase2_loss, total_loss_phase1, frozen_forward
from .metrics import dice, spectral_response
from .model import HarmonizerNet, ModelConfig, PredictionSet
from .synthdata import Split, consensus_mask, perturb

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HZCK"
CKPT_SCHEMA = 1


class TrainingError(RuntimeError):
    """Training aborted; ``checkpoint`` holds the last good state."""

    def __init__(self, msg: str, checkpoint: Optional["Checkpoint"] = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase1_epochs: int = 100
    phase2_epochs: int = 150
    lr_phase1: float = 1e-4
    lr_phase2: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-5
    latent_dim: int = 6
    memory_size: int = 100
    k_train: int = 4
    batch_size: int = 8
    seed: int = 0
    harmonizer: bool = True
    ged: bool = True
    lambda_kl: float = 2e-3
    lambda_harm: float = 3e-4
    lambda_ged: float = 1.0
    dice_ce_mix: float = 0.5

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("phase1_epochs", "phase2_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("batch_size", "memory_size", "k_train"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.ged and self.k_train < 2:
            raise ValueError("the GED term needs k_train >= 2")
        if self.lr_phase1 < 0 or self.lr_phase2 < 0:
            raise ValueError("learning rates must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Schedule sized for the 32x32 synthetic data on one CPU core."""
        base = dict(phase1_epochs=30, phase2_epochs=30, lr_phase1=1e-3, lr_phase2=5e-4)
        base.update(overrides)
        return cls(**base)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_kl, self.lambda_harm, self.lambda_ged, self.dice_ce_mix)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    train_config: dict
    phase: str  # "init", "phase1", "phase2"
    rng_state: dict
    optimizer: dict = field(default_factory=dict)  # {"step", "lr", ..., "m": {...}, "v": {...}}
    memory: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    history: list = field(default_factory=list)
    schema: int = CKPT_SCHEMA

    def model(self) -> HarmonizerNet:
        return model_from_checkpoint(self)


def model_from_checkpoint(ckpt: Checkpoint) -> HarmonizerNet:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = HarmonizerNet(cfg, seed=0)
    params = model.parameters()
    missing = set(params) - set(ckpt.params)
    extra = set(ckpt.params) - set(params)
    if missing or extra:
        raise CheckpointError(f"checkpoint parameters do not match the model: missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]}")
    for name, p in params.items():
        arr = ckpt.params[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
        p.data = arr.copy()
    return model


def snapshot(model: HarmonizerNet, mcfg: ModelConfig, tcfg: TrainConfig, phase: str,
             rng: np.random.Generator, opt: Optional[Adam] = None, memory=None,
             history=None) -> Checkpoint:
    optimizer = {}
    if opt is not None:
        s = opt.state
        optimizer = {"step": s.step, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2,
                     "weight_decay": s.weight_decay, "epsilon": s.epsilon,
                     "m": {k: v.copy() for k, v in s.m.items()}, "v": {k: v.copy() for k, v in s.v.items()}}
    mem = np.array(list(memory)) if memory is not None and len(memory) else np.zeros((0, mcfg.latent_dim))
    return Checkpoint({n: p.data.copy() for n, p in model.named_parameters()}, mcfg.to_dict(),
                      tcfg.to_dict(), phase, rng.bit_generator.state, optimizer, mem,
                      list(history or []))


# -- checkpoint file -----------------------------------------------------------

def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    a = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """``HZCK``, u32 schema, u32 record count, records, then u32-length JSON metadata.

    Record: u32 name length, UTF-8 name, u32 ndim, u32 dims, float64 LE payload.
    Parameters are named as in the model; optimizer moments are ``optim.m.<name>``
    and ``optim.v.<name>``; the prior memory buffer is ``memory``.
    """
    records = [(n, a) for n, a in ckpt.params.items()]
    opt = dict(ckpt.optimizer)
    for key in ("m", "v"):
        for n, a in opt.pop(key, {}).items():
            records.append((f"optim.{key}.{n}", a))
    records.append(("memory", ckpt.memory))
    meta = {"phase": ckpt.phase, "model_config": ckpt.model_config, "train_config": ckpt.train_config,
            "rng_state": ckpt.rng_state, "optimizer": opt, "history": ckpt.history}
    blob = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<II", ckpt.schema, len(records)))
            for n, a in records:
                fh.write(_pack_record(n, a))
            fh.write(struct.pack("<I", len(blob)) + blob)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        schema, count = struct.unpack_from("<II", raw, 4)
        if schema != CKPT_SCHEMA:
            raise CheckpointError(f"{path}: unsupported schema {schema}")
        off = 12
        records = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            records[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
        (blen,) = struct.unpack_from("<I", raw, off)
        meta = json.loads(raw[off + 4:off + 4 + blen].decode())
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    opt = dict(meta["optimizer"])
    params, m, v = {}, {}, {}
    for name, a in records.items():
        if name.startswith("optim.m."):
            m[name[8:]] = a
        elif name.startswith("optim.v."):
            v[name[8:]] = a
        elif name != "memory":
            params[name] = a
    if opt:
        opt["m"], opt["v"] = m, v
    return Checkpoint(params, meta["model_config"], meta["train_config"], meta["phase"], meta["rng_state"],
                      opt, records.get("memory", np.zeros((0, 0))), meta["history"], schema)


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def restore_optimizer(opt: Adam, state: dict) -> None:
    if not state:
        return
    s = opt.state
    s.step = int(state["step"])
    s.m = {k: np.array(a) for k, a in state["m"].items()}
    s.v = {k: np.array(a) for k, a in state["v"].items()}


# -- training ------------------------------------------------------------------

def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _mean_report(reports: list[LossReport]) -> dict:
    keys = ("seg", "kl", "harm", "ged", "total")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def model_config_for(split: Split, cfg: TrainConfig, **overrides) -> ModelConfig:
    base = dict(in_channels=split.images.shape[1], image_size=split.images.shape[-1],
                latent_dim=cfg.latent_dim, num_raters=split.masks.shape[1], harmonizer=cfg.harmonizer)
    base.update(overrides)
    return ModelConfig(**base)


def evaluate_phase1_loss(model: HarmonizerNet, split: Split, cfg: TrainConfig, rng) -> dict:
    """Mean Phase-1 loss over a split with no parameter updates."""
    reports = []
    for idx in _batches(len(split), cfg.batch_size, rng):
        _, rep = total_loss_phase1(model, split.images[idx], split.masks[idx], rng, cfg.weights(),
                                   cfg.k_train, cfg.ged)
        reports.append(rep)
    return _mean_report(reports)


def train_phase1(train: Split, cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None,
                 on_epoch: Optional[Callable[[int, dict], None]] = None) -> Checkpoint:
    """Train backbone, latent nets and (optionally) the harmonizer.

    History row 0 is the loss of the untrained model over the training set;
    rows 1.. are per-epoch training means.
    """
    mcfg = model_cfg or model_config_for(train, cfg)
    rng = np.random.default_rng(cfg.seed)
    model = HarmonizerNet(mcfg, seed=cfg.seed)
    params = model.phase1_parameters()
    opt = Adam(params, cfg.lr_phase1, cfg.betas, cfg.weight_decay)
    memory: deque = deque(maxlen=cfg.memory_size)
    history = []
    good = snapshot(model, mcfg, cfg, "init", rng, opt, memory, history)
    try:
        row = {"epoch": 0, **evaluate_phase1_loss(model, train, cfg, rng)}
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value evaluating the untrained model: {exc}", good) from exc
    history.append(row)
    if on_epoch:
        on_epoch(0, row)
    good = snapshot(model, mcfg, cfg, "init", rng, opt, memory, history)
    for epoch in range(1, cfg.phase1_epochs + 1):
        t0 = time.perf_counter()
        reports = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss, rep = total_loss_phase1(model, train.images[idx], train.masks[idx], rng,
                                                  cfg.weights(), cfg.k_train, cfg.ged, memory=memory)
                tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in Phase 1 at epoch {epoch}: {exc}", good) from exc
            if not np.isfinite(rep.total):
                raise TrainingError(f"non-finite Phase-1 loss at epoch {epoch}", good)
            opt.step()
            reports.append(rep)
        row = {"epoch": epoch, **_mean_report(reports), "seconds": time.perf_counter() - t0}
        history.append(row)
        log.info("phase1 epoch %d total %.4f", epoch, row["total"])
        if on_epoch:
            on_epoch(epoch, row)
        good = snapshot(model, mcfg, cfg, "phase1", rng, opt, memory, history)
    return snapshot(model, mcfg, cfg, "phase1", rng, opt, memory, history)


def per_rater_dice(model: HarmonizerNet, split: Split, rng, batch: int = 32) -> np.ndarray:
    """Mean hard Dice of each rater's personalized prediction against that rater's masks."""
    R = split.masks.shape[1]
    scores = []
    for s in range(0, len(split), batch):
        probs = model.personalized_probs(split.images[s:s + batch], range(R), rng)
        for i in range(probs.shape[0]):
            scores.append([dice(probs[i, r] >= 0.5, split.masks[s + i, r]) for r in range(R)])
    return np.mean(scores, axis=0)


def frozen_digest(model: HarmonizerNet) -> dict[str, bytes]:
    frozen = model.freeze_mask()
    return {n: p.data.tobytes() for n, p in model.named_parameters() if n in frozen}


def train_phase2(ckpt: Checkpoint, train: Split, cfg: TrainConfig, log_dice: bool = True,
                 on_epoch: Optional[Callable[[int, dict], None]] = None) -> Checkpoint:
    """Train the personalizer with everything else frozen.

    Every Phase-2 step asserts that no frozen parameter received a gradient,
    and the frozen tensors are compared byte-for-byte at the end.
    """
    if ckpt.phase not in ("phase1", "phase2"):
        raise TrainingError(f"Phase 2 needs a Phase-1 checkpoint, got phase {ckpt.phase!r}")
    model = model_from_checkpoint(ckpt)
    mcfg = model.cfg
    rng = np.random.default_rng([cfg.seed, 2])
    frozen = model.freeze_mask()
    for name, p in model.named_parameters():
        p.requires_grad = name not in frozen
        p.grad = None
    before = frozen_digest(model)
    params = model.phase2_parameters()
    opt = Adam(params, cfg.lr_phase2, cfg.betas, cfg.weight_decay)
    history = list(ckpt.history)
    frozen_params = [p for n, p in model.named_parameters() if n in frozen]
    if log_dice:
        d = per_rater_dice(model, train, np.random.default_rng([cfg.seed, 3]))
        history.append({"phase": 2, "epoch": 0, "loss": None, "dice": d.tolist()})
    good = snapshot(model, mcfg, cfg, "phase2", rng, opt, ckpt.memory, history)
    for epoch in range(1, cfg.phase2_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            opt.zero_grad()
            x = train.images[idx]
            try:
                with Tape() as tape:
                    feat_prior = frozen_forward(model, Tensor(x))
                    loss = phase2_loss(model, x, train.masks[idx], rng, mix=cfg.dice_ce_mix, frozen=feat_prior)
                tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in Phase 2 at epoch {epoch}: {exc}", good) from exc
            for p in frozen_params:
                if p.grad is not None:
                    raise TrainingError("a frozen parameter received a gradient in Phase 2", good)
            opt.step()
            losses.append(loss.item())
        row = {"phase": 2, "epoch": epoch, "loss": float(np.mean(losses)), "seconds": time.perf_counter() - t0}
        if log_dice and (epoch == cfg.phase2_epochs or epoch % 10 == 0):
            row["dice"] = per_rater_dice(model, train, np.random.default_rng([cfg.seed, 3])).tolist()
        history.append(row)
        log.info("phase2 epoch %d loss %.4f", epoch, row["loss"])
        if on_epoch:
            on_epoch(epoch, row)
        good = snapshot(model, mcfg, cfg, "phase2", rng, opt, ckpt.memory, history)
    if frozen_digest(model) != before:
        raise TrainingError("frozen parameters changed during Phase 2")
    return snapshot(model, mcfg, cfg, "phase2", rng, opt, ckpt.memory, history)


def train_consensus_baseline(train: Split, cfg: TrainConfig) -> Checkpoint:
    """Single-output reference: the same network trained on consensus masks only."""
    cons = np.stack([consensus_mask(m) for m in train.masks])[:, None].astype(float)
    split = Split(train.images, cons, train.domains, train.indices)
    bcfg = TrainConfig.from_dict({**cfg.to_dict(), "ged": False})
    return train_phase1(split, bcfg, model_config_for(split, bcfg, num_raters=1))


# -- inference -----------------------------------------------------------------

def _as_model(m) -> HarmonizerNet:
    return m if isinstance(m, HarmonizerNet) else model_from_checkpoint(m)


def infer_personalized(ckpt, image: np.ndarray, rater: int, seed: int) -> np.ndarray:
    """Soft mask ``[H, W]`` for one rater: harmonize, sample, personalize, decode."""
    model = _as_model(ckpt)
    if not 0 <= rater < model.cfg.num_raters:
        raise ValueError(f"rater {rater} out of range [0, {model.cfg.num_raters})")
    return model.personalized_probs(image, [rater], np.random.default_rng(seed))[0, 0]


def infer_sample_set(ckpt, image: np.ndarray, K: int, seed: int) -> PredictionSet:
    return _as_model(ckpt).predict_set(image, K, seed)


# -- analyses over a trained model -------------------------------------------

def consensus_dsc(model: HarmonizerNet, images: np.ndarray, masks: np.ndarray, batch: int = 32) -> np.ndarray:
    """Per-case Dice of the prior-mean prediction against the consensus mask."""
    out = []
    for s in range(0, len(images), batch):
        probs = model.mean_prediction(images[s:s + batch])
        out.extend(dice(p >= 0.5, consensus_mask(m)) for p, m in zip(probs, masks[s:s + batch]))
    return np.array(out)


def robustness_table(model: HarmonizerNet, images: np.ndarray, masks: np.ndarray, configs,
                     seeds=(0, 1, 2)) -> list[dict]:
    """Clean and perturbed consensus DSC per perturbation, ``|delta|`` averaged over noise seeds.

    Each seed perturbs case ``i`` with ``seed * 1_000_003 + i``.
    """
    clean = float(consensus_dsc(model, images, masks).mean())
    rows = []
    for cfg in configs:
        pert, deltas = [], []
        for seed in seeds:
            px = np.stack([perturb(img, cfg, seed * 1_000_003 + i) for i, img in enumerate(images)])
            d = float(consensus_dsc(model, px, masks).mean())
            pert.append(d)
            deltas.append(abs(clean - d))
        rows.append({"kind": cfg.kind, "magnitude": cfg.magnitude, "clean_dsc": clean,
                     "perturbed_dsc": float(np.mean(pert)), "abs_delta": float(np.mean(deltas))})
    return rows


def spectral_comparison(model: HarmonizerNet, images: np.ndarray, seed: int = 0, batch: int = 32) -> dict:
    """Mean spectra of the final decoder feature with personalized ``z'`` and with plain prior ``z``.

    Both decodes share the same prior draw per image; the personalized spectrum
    averages over raters.
    """
    R = model.cfg.num_raters
    with_p, without = [], []
    for s in range(0, len(images), batch):
        x = Tensor(images[s:s + batch])
        B = x.shape[0]
        rng = np.random.default_rng([seed, s])
        feat, _ = model.features(x)
        prior = model.prior(x)
        bank = model.prior_bank(prior, rng)
        z = model.sample_prior(prior, 1, rng)
        _, h0 = model.decode_samples(feat, z, return_feature=True)
        for r in range(R):
            zp = model.personalize(feat, z.reshape(B, -1), r, bank)
            _, hp = model.decode_samples(feat, zp.reshape(B, 1, -1), r, return_feature=True)
            with_p.extend(spectral_response(h) for h in hp.data[:, 0])
        without.extend(spectral_response(h) for h in h0.data[:, 0])
    return {"with_personalizer": np.mean(with_p, axis=0), "without_personalizer": np.mean(without, axis=0)}
