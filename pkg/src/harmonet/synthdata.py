"""Seeded synthetic multi-rater data and the image perturbation harness.

Each sample is a rotated-ellipse lesion on a smooth textured background, seen
through one of three synthetic "scanners" (a low-order polynomial bias field
plus a noise floor). Raters annotate the same underlying lesion through fixed
morphological styles (grow/shrink, boundary smoothing, translation) plus a
little seeded boundary jitter, so each rater's style is recoverable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

SCHEMA_VERSION = 1
TENSOR_MAGIC = b"HZT1"
SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    pass


# -- types -------------------------------------------------------------------

@dataclass
class SceneSpec:
    size: int = 32
    center: tuple[float, float] = (16.0, 16.0)  # (row, col)
    radii: tuple[float, float] = (5.0, 5.0)  # (row semi-axis, col semi-axis) before rotation
    rotation: float = 0.0  # radians
    contrast: float = 0.5
    texture: float = 0.05
    second_lesion: bool = False
    domain: int = 0

    def validate(self) -> None:
        if min(self.radii) < 2:
            raise ValueError(f"lesion radii must be >= 2 px, got {self.radii}")
        reach = max(self.radii)
        for c in self.center:
            if c - reach < 0 or c + reach > self.size - 1:
                raise ValueError(f"lesion at {self.center} with radii {self.radii} leaves the "
                                 f"{self.size}x{self.size} image")
        if self.second_lesion:
            mirror = self.size - 1 - self.center[1]
            if abs(mirror - self.center[1]) < 2 * reach:
                raise ValueError("second lesion would overlap the first")


@dataclass
class RaterProfile:
    dilation_radius: int = 0
    boundary_smoothing_sigma: float = 0.0
    shift: tuple[int, int] = (0, 0)  # (dx, dy) in pixels
    boundary_jitter: float = 0.0  # probability of flipping each boundary pixel


DEFAULT_RATERS = (
    RaterProfile(dilation_radius=1, boundary_jitter=0.1),
    RaterProfile(dilation_radius=-1, boundary_jitter=0.1),
    RaterProfile(boundary_smoothing_sigma=1.5, shift=(1, 0), boundary_jitter=0.1),
    RaterProfile(shift=(0, -1), boundary_jitter=0.1),
)


@dataclass
class DomainConfig:
    """Additive bias ``offset + gx*u + gy*v + gxy*u*v`` on ``u, v in [-1, 1]``, plus noise."""

    offset: float = 0.0
    gx: float = 0.0
    gy: float = 0.0
    gxy: float = 0.0
    noise: float = 0.0


DEFAULT_DOMAINS = (
    DomainConfig(offset=0.0, noise=0.01),
    DomainConfig(offset=0.08, gx=0.10, gy=-0.05, noise=0.03),
    DomainConfig(offset=-0.06, gx=-0.05, gy=0.10, gxy=0.05, noise=0.05),
)


PERTURBATION_KINDS = ("gaussian_noise", "gaussian_blur", "gamma")
ROBUSTNESS_GRID = {
    "gaussian_noise": (0.10, 0.15, 0.25),
    "gaussian_blur": (1.0, 1.5, 1.75),
    "gamma": (0.75, 1.5, 1.75),
}
DESK_BLUR_KERNEL = 7


@dataclass
class PerturbationConfig:
    kind: str
    magnitude: float
    kernel_size: int = DESK_BLUR_KERNEL

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"blur kernel size must be odd, got {self.kernel_size}")

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.magnitude:g}"


def robustness_grid() -> list[PerturbationConfig]:
    return [PerturbationConfig(k, m) for k in PERTURBATION_KINDS for m in ROBUSTNESS_GRID[k]]


@dataclass
class MultiRaterSample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    masks: np.ndarray  # [N, H, W] binary
    scene: SceneSpec
    split: str = "train"


# -- generation --------------------------------------------------------------

def _ellipse(size, center, radii, rotation) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = rows - center[0], cols - center[1]
    c, s = np.cos(rotation), np.sin(rotation)
    u = dy * c + dx * s
    v = -dy * s + dx * c
    return ((u / radii[0]) ** 2 + (v / radii[1]) ** 2 <= 1.0).astype(np.uint8)


def gen_base_lesion(spec: SceneSpec) -> np.ndarray:
    """Filled rotated ellipse, pixel centres at integer coordinates."""
    spec.validate()
    mask = _ellipse(spec.size, spec.center, spec.radii, spec.rotation)
    if spec.second_lesion:
        mask |= mask[:, ::-1]
    return mask


def _core_pixel(mask: np.ndarray) -> tuple[int, int]:
    dist = ndimage.distance_transform_edt(mask)
    return np.unravel_index(int(np.argmax(dist)), mask.shape)


def _shift(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(mask)
    H, W = mask.shape
    src_r = slice(max(0, -dy), min(H, H - dy))
    dst_r = slice(max(0, dy), min(H, H + dy))
    src_c = slice(max(0, -dx), min(W, W - dx))
    dst_c = slice(max(0, dx), min(W, W + dx))
    out[dst_r, dst_c] = mask[src_r, src_c]
    return out


_SQUARE = np.ones((3, 3), dtype=bool)


def rater_annotate(mask: np.ndarray, profile: RaterProfile, seed: int = 0) -> np.ndarray:
    """Apply a rater style to a binary mask; the result is never empty.

    Dilation/erosion use the 3x3 square structuring element, iterated
    ``|dilation_radius|`` times.
    """
    base = mask.astype(bool)
    if not base.any():
        raise ValueError("cannot annotate an empty lesion mask")
    core = _core_pixel(base)
    out = base.copy()
    r = profile.dilation_radius
    if r > 0:
        out = ndimage.binary_dilation(out, _SQUARE, iterations=r)
    elif r < 0:
        out = ndimage.binary_erosion(out, _SQUARE, iterations=-r, border_value=0)
    if profile.boundary_smoothing_sigma > 0:
        out = ndimage.gaussian_filter(out.astype(float), profile.boundary_smoothing_sigma) >= 0.5
    dx, dy = profile.shift
    if dx or dy:
        out = _shift(out, dx, dy)
        core = (min(max(core[0] + dy, 0), mask.shape[0] - 1), min(max(core[1] + dx, 0), mask.shape[1] - 1))
    if profile.boundary_jitter > 0:
        rng = np.random.default_rng(seed)
        boundary = out ^ ndimage.binary_erosion(out, _SQUARE, border_value=0)
        flip = boundary & (rng.uniform(size=out.shape) < profile.boundary_jitter)
        out = out & ~flip
    if not out.any():
        out[core] = True
    return out.astype(np.uint8)


def consensus_mask(annots: np.ndarray) -> np.ndarray:
    """Pixels marked by at least half the raters (a 0.5 tie is kept)."""
    annots = np.asarray(annots)
    if annots.ndim != 3 or annots.shape[0] < 1:
        raise ValueError("consensus needs at least one [H, W] mask")
    return (annots.mean(axis=0) >= 0.5).astype(np.uint8)


def _smooth_field(rng, size, sigma=4.0) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def bias_field(size: int, domain: DomainConfig) -> np.ndarray:
    u = np.linspace(-1.0, 1.0, size)
    vv, uu = np.meshgrid(u, u, indexing="ij")
    return domain.offset + domain.gx * uu + domain.gy * vv + domain.gxy * uu * vv


def render_image(scene: SceneSpec, seed: int = 0,
                 domains: Sequence[DomainConfig] = DEFAULT_DOMAINS) -> np.ndarray:
    """``[1, H, W]`` image: soft-edged lesion + smooth texture + scanner bias and noise."""
    scene.validate()
    rng = np.random.default_rng(seed)
    size = scene.size
    lesion = gen_base_lesion(scene).astype(float)
    soft = ndimage.gaussian_filter(lesion, 1.0)
    img = 0.3 + scene.contrast * soft
    if scene.texture > 0:
        img = img + scene.texture * _smooth_field(rng, size)
    dom = domains[scene.domain]
    img = img + bias_field(size, dom)
    if dom.noise > 0:
        img = img + rng.normal(0.0, dom.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def gaussian_kernel1d(sigma: float, size: int) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    r = size // 2
    x = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def perturb(image: np.ndarray, cfg: PerturbationConfig, seed: int = 0) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if cfg.kind == "gaussian_noise":
        if cfg.magnitude == 0:
            return image.copy()
        rng = np.random.default_rng(seed)
        return np.clip(image + rng.normal(0.0, cfg.magnitude, size=image.shape), 0.0, 1.0)
    if cfg.kind == "gaussian_blur":
        k = gaussian_kernel1d(cfg.magnitude, cfg.kernel_size)
        out = ndimage.convolve1d(image, k, axis=-1, mode="reflect")
        return ndimage.convolve1d(out, k, axis=-2, mode="reflect")
    return np.clip(image, 0.0, 1.0) ** cfg.magnitude


def random_scene(rng: np.random.Generator, size: int = 32, domain: int = 0) -> SceneSpec:
    scale = size / 32.0
    lo = max(2.0, 3.0 * scale)
    radii = tuple(float(r) for r in rng.uniform(lo, max(lo + 1.0, 7.0 * scale), size=2))
    margin = max(radii) + 3.0 * scale
    center = tuple(float(c) for c in rng.uniform(margin, size - 1 - margin, size=2))
    return SceneSpec(size=size, center=center, radii=radii, rotation=float(rng.uniform(0, np.pi)),
                     contrast=float(rng.uniform(0.3, 0.55)), texture=0.05, domain=domain)


def make_sample(seed: int, index: int, size: int = 32, domain: int = 0,
                profiles: Sequence[RaterProfile] = DEFAULT_RATERS,
                domains: Sequence[DomainConfig] = DEFAULT_DOMAINS, split: str = "train") -> MultiRaterSample:
    ss = np.random.SeedSequence([seed, index])
    scene_seed, image_seed, *rater_seeds = ss.generate_state(2 + len(profiles))
    scene = random_scene(np.random.default_rng(scene_seed), size, domain)
    base = gen_base_lesion(scene)
    masks = np.stack([rater_annotate(base, p, int(s)) for p, s in zip(profiles, rater_seeds)])
    return MultiRaterSample(render_image(scene, int(image_seed), domains), masks, scene, split)


# -- on-disk format ----------------------------------------------------------

def write_tensor_file(path: Path, array: np.ndarray) -> None:
    """``HZT1`` + u32 H, W, C, then float32 little-endian, row-major ``[H][W][C]``."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[None]
    C, H, W = a.shape
    payload = np.ascontiguousarray(a.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<III", H, W, C))
        fh.write(payload.tobytes())


def read_tensor_file(path: Path) -> np.ndarray:
    """Returns ``[C, H, W]`` float64."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != TENSOR_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    H, W, C = struct.unpack("<III", raw[4:16])
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    if body.size != H * W * C:
        raise DataError(f"{path}: payload holds {body.size} values, header says {H}x{W}x{C}")
    return body.reshape(H, W, C).transpose(2, 0, 1).astype(np.float64)


@dataclass
class Split:
    images: np.ndarray  # [n, 1, H, W]
    masks: np.ndarray  # [n, R, H, W]
    domains: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Split":
        return Split(self.images[idx], self.masks[idx], self.domains[idx], self.indices[idx])


@dataclass
class Dataset:
    root: Optional[Path]
    manifest: dict
    splits: dict[str, Split] = field(default_factory=dict)

    @property
    def num_raters(self) -> int:
        return int(self.manifest["num_raters"])

    def __getitem__(self, split: str) -> Split:
        return self.splits[split]


def _assign_domains(counts: dict, seed: int, held_out: Optional[int], num_domains: int) -> dict:
    out = {}
    for split, n in counts.items():
        if held_out is None:
            pool = list(range(num_domains))
        elif split == "test":
            pool = [held_out]
        else:
            pool = [d for d in range(num_domains) if d != held_out]
        doms = np.array([pool[i % len(pool)] for i in range(n)], dtype=int)
        np.random.default_rng([seed, SPLITS.index(split), 99]).shuffle(doms)
        out[split] = doms
    return out


def generate(n_train: int, n_val: int, n_test: int, num_raters: int = 4, seed: int = 0,
             size: int = 32, held_out_domain: Optional[int] = None,
             profiles: Optional[Sequence[RaterProfile]] = None,
             domains: Sequence[DomainConfig] = DEFAULT_DOMAINS) -> tuple[dict, list[MultiRaterSample]]:
    """In-memory dataset: ``(manifest, samples)`` in train, val, test order."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 1:
        raise ValueError(f"split counts must be >= 1, got {counts}")
    if profiles is None:
        if not 1 <= num_raters <= len(DEFAULT_RATERS):
            raise ValueError(f"default profiles cover 1..{len(DEFAULT_RATERS)} raters")
        profiles = DEFAULT_RATERS[:num_raters]
    if len(profiles) != num_raters:
        raise ValueError("one profile per rater required")
    doms = _assign_domains(counts, seed, held_out_domain, len(domains))
    samples, entries = [], []
    index = 0
    for split in SPLITS:
        for j in range(counts[split]):
            s = make_sample(seed, index, size, int(doms[split][j]), profiles, domains, split)
            samples.append(s)
            entries.append({"index": index, "split": split, "domain": s.scene.domain,
                            "scene": _scene_json(s.scene)})
            index += 1
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "image_size": size,
        "num_raters": num_raters,
        "counts": counts,
        "held_out_domain": held_out_domain,
        "rater_profiles": [asdict(p) for p in profiles],
        "domains": [asdict(d) for d in domains],
        "samples": entries,
    }
    return manifest, samples


def _scene_json(s: SceneSpec) -> dict:
    d = asdict(s)
    d["center"] = list(s.center)
    d["radii"] = list(s.radii)
    return d


def gen_dataset(out_dir, n_train: int, n_val: int, n_test: int, num_raters: int = 4, seed: int = 0,
                size: int = 32, held_out_domain: Optional[int] = None) -> Path:
    """Write a dataset directory: ``manifest.json`` plus one tensor file per image/mask."""
    out = Path(out_dir)
    manifest, samples = generate(n_train, n_val, n_test, num_raters, seed, size, held_out_domain)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            write_tensor_file(out / f"img_{i:06d}.bin", s.image)
            for r in range(num_raters):
                write_tensor_file(out / f"mask_{i:06d}_r{r}.bin", s.masks[r])
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"writing dataset to {out}: {exc}") from exc
    return out


def samples_to_dataset(manifest: dict, samples: Sequence[MultiRaterSample], root=None) -> Dataset:
    ds = Dataset(Path(root) if root else None, manifest)
    for split in SPLITS:
        idx = [i for i, s in enumerate(samples) if s.split == split]
        if not idx:
            continue
        ds.splits[split] = Split(
            np.stack([samples[i].image for i in idx]).astype(np.float64),
            np.stack([samples[i].masks for i in idx]).astype(np.float64),
            np.array([samples[i].scene.domain for i in idx]),
            np.array(idx),
        )
    return ds


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable manifest {mpath}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{mpath}: unsupported schema {manifest.get('schema_version')}")
    R = manifest["num_raters"]
    ds = Dataset(root, manifest)
    by_split: dict[str, list] = {s: [] for s in SPLITS}
    for e in manifest["samples"]:
        by_split[e["split"]].append(e)
    for split, entries in by_split.items():
        if not entries:
            continue
        imgs, masks = [], []
        for e in entries:
            i = e["index"]
            imgs.append(read_tensor_file(root / f"img_{i:06d}.bin"))
            masks.append(np.concatenate([read_tensor_file(root / f"mask_{i:06d}_r{r}.bin") for r in range(R)]))
        ds.splits[split] = Split(np.stack(imgs), np.stack(masks),
                                 np.array([e["domain"] for e in entries]),
                                 np.array([e["index"] for e in entries]))
    return ds
