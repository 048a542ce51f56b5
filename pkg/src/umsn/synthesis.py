"""Blur-kernel synthesis, the blur/noise degradation model and paired dataset generation."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio
from .semantics import CLASS_NAMES, LABELS_11, check_partition, group_labels, index_to_masks, masks_to_index

log = logging.getLogger(__name__)

KERNEL_SIDE_RANGE = (13, 29)


def derive_seed(master_seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a (master, key...) path."""
    return int(np.random.SeedSequence([int(master_seed), *map(int, keys)]).generate_state(1)[0])


# -- kernels --------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryParams:
    steps: int = 64
    inertia: float = 0.7
    jitter: float = 1.0


@dataclass(frozen=True)
class CameraTrajectory:
    positions: np.ndarray  # steps x 2, (row, col) in pixels, centered on the origin
    seed: int

    @property
    def length(self) -> int:
        return len(self.positions)


def camera_trajectory(seed: int, params: TrajectoryParams = TrajectoryParams()) -> CameraTrajectory:
    """Projected camera-shake path: AR(1) velocity with Gaussian jitter.

    v_t = inertia * v_{t-1} + jitter * eps_t, starting from a random unit
    direction; positions are the running sum of velocities, re-centered on
    their bounding-box midpoint.
    """
    if params.steps < 1:
        raise ValueError(f"trajectory needs at least one step, got {params.steps}")
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    v = np.array([np.sin(angle), np.cos(angle)])
    pos = np.zeros((params.steps, 2))
    for t in range(1, params.steps):
        v = params.inertia * v + params.jitter * rng.standard_normal(2)
        pos[t] = pos[t - 1] + v
    pos -= (pos.max(axis=0) + pos.min(axis=0)) / 2.0
    return CameraTrajectory(positions=pos, seed=seed)


def rasterize(positions: np.ndarray, side: int) -> np.ndarray:
    """Bilinearly splat trajectory points onto a side x side grid (unnormalized).

    Paths that overflow the support are shrunk to fit; smaller paths keep
    their pixel scale.
    """
    half = (side - 1) / 2.0
    extent = np.abs(positions).max()
    pts = positions * ((half - 1.0) / extent) if extent > half - 1.0 else positions
    pts = pts + half
    grid = np.zeros((side, side))
    r0 = np.clip(np.floor(pts[:, 0]).astype(int), 0, side - 2)
    c0 = np.clip(np.floor(pts[:, 1]).astype(int), 0, side - 2)
    fr = pts[:, 0] - r0
    fc = pts[:, 1] - c0
    np.add.at(grid, (r0, c0), (1 - fr) * (1 - fc))
    np.add.at(grid, (r0 + 1, c0), fr * (1 - fc))
    np.add.at(grid, (r0, c0 + 1), (1 - fr) * fc)
    np.add.at(grid, (r0 + 1, c0 + 1), fr * fc)
    return grid


def _check_side(side, side_range=KERNEL_SIDE_RANGE):
    lo, hi = side_range
    if int(side) != side or side % 2 == 0 or not lo <= side <= hi:
        raise ValueError(f"kernel side must be odd and within [{lo}, {hi}], got {side}")


def generate_kernel(seed: int, side: int, params: TrajectoryParams = TrajectoryParams(),
                    side_range=KERNEL_SIDE_RANGE) -> np.ndarray:
    """side x side non-negative unit-sum motion-blur kernel, deterministic in its arguments."""
    _check_side(side, side_range)
    grid = rasterize(camera_trajectory(seed, params).positions, side)
    grid = np.maximum(grid, 0.0)
    return grid / grid.sum()


def delta_kernel(side: int = 1) -> np.ndarray:
    k = np.zeros((side, side))
    k[side // 2, side // 2] = 1.0
    return k


# -- degradation ----------------------------------------------------------

def blur(image, kernel) -> np.ndarray:
    """Per-channel 2D convolution with reflect padding (edge not repeated)."""
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if kernel.shape[0] > image.shape[0] or kernel.shape[1] > image.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than image {image.shape[:2]}")
    if image.ndim == 2:
        return ndimage.convolve(image, kernel, mode="mirror")
    return np.stack([ndimage.convolve(image[..., c], kernel, mode="mirror")
                     for c in range(image.shape[-1])], axis=-1)


def add_noise(image, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise and clip to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    return np.clip(image + sigma * rng.standard_normal(image.shape), 0.0, 1.0)


def class_blur(clean, masks, class_index: int, kernel) -> np.ndarray:
    """Blur only class ``class_index`` (1..4): m_i * blur(x) + (1 - m_i) * x."""
    clean = np.asarray(clean, dtype=np.float64)
    masks = np.asarray(masks)
    if masks.shape[1:] != clean.shape[:2]:
        raise ValueError(f"mask shape {masks.shape} does not match image {clean.shape}")
    if not 1 <= class_index <= 4:
        raise ValueError(f"class_index must be in 1..4, got {class_index}")
    m = masks[class_index - 1][..., None]
    return m * blur(clean, kernel) + (1.0 - m) * clean


# -- toy face corpus ------------------------------------------------------

def _ellipse(rr, cc, r0, c0, a, b, theta=0.0):
    ct, st = np.cos(theta), np.sin(theta)
    dr, dc = rr - r0, cc - c0
    u = (dr * ct + dc * st) / a
    v = (-dr * st + dc * ct) / b
    return u * u + v * v <= 1.0


def toy_face(seed: int, size: int = 64):
    """Synthetic face-like image with its 11-label parsing map.

    Returns ``(image, labels)``: H x W x 3 float in [0, 1] and H x W ints.
    """
    rng = np.random.default_rng(seed)
    s = size
    rr, cc = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    labels = np.zeros((s, s), dtype=np.int64)

    fr, fc = s * rng.uniform(0.50, 0.58), s * rng.uniform(0.44, 0.56)
    fa, fb = s * rng.uniform(0.30, 0.36), s * rng.uniform(0.22, 0.28)
    tilt = rng.uniform(-0.2, 0.2)
    hair = _ellipse(rr, cc, fr - 0.18 * s, fc, fa * 0.95, fb * 1.25, tilt) & (rr < fr + 0.05 * s)
    labels[hair] = 10
    face = _ellipse(rr, cc, fr, fc, fa, fb, tilt)
    labels[face] = 1

    eye_r = fr - 0.08 * s
    dx = fb * rng.uniform(0.40, 0.52)
    ea, eb = s * 0.035, s * rng.uniform(0.055, 0.075)
    for side, (brow, eye) in ((-1, (2, 4)), (1, (3, 5))):
        ec = fc + side * dx
        labels[_ellipse(rr, cc, eye_r - 0.07 * s, ec, s * 0.018, eb * 1.2, side * 0.15) & face] = brow
        labels[_ellipse(rr, cc, eye_r, ec, ea, eb) & face] = eye
    nose = _ellipse(rr, cc, fr + 0.03 * s, fc, s * 0.08, s * 0.035)
    labels[nose & face] = 6
    mouth_r, mw = fr + 0.16 * s, fb * rng.uniform(0.45, 0.6)
    labels[_ellipse(rr, cc, mouth_r - 0.02 * s, fc, s * 0.025, mw) & face] = 7
    labels[_ellipse(rr, cc, mouth_r + 0.025 * s, fc, s * 0.028, mw * 0.9) & face] = 9
    labels[_ellipse(rr, cc, mouth_r, fc, s * 0.012, mw * 0.6) & face] = 8

    palette = rng.uniform(0.0, 1.0, size=(11, 3))
    palette[1] = rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6])
    palette[4] = palette[5] = rng.uniform(0.05, 0.3, size=3)
    palette[8] = rng.uniform(0.85, 1.0, size=3)
    palette[10] = rng.uniform(0.02, 0.45, size=3)
    img = palette[labels]

    # low-frequency background texture, hair strands, soft shading on skin
    k1, k2 = rng.uniform(0.1, 0.35, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    bg_tex = 0.12 * np.sin(k1 * rr + phase[0]) * np.cos(k2 * cc + phase[1])
    img[labels == 0] += bg_tex[labels == 0][:, None]
    strands = 0.1 * np.sin(rng.uniform(0.6, 1.2) * (cc + 0.3 * rr))
    img[labels == 10] += strands[labels == 10][:, None]
    shade = 0.08 * (cc - fc) / fb
    img[labels == 1] -= shade[labels == 1][:, None]
    pupils = np.zeros((s, s), dtype=bool)
    for side in (-1, 1):
        pupils |= _ellipse(rr, cc, eye_r, fc + side * dx, ea * 0.6, ea * 0.6)
    img[pupils & np.isin(labels, (4, 5))] = 0.95

    return np.clip(img, 0.0, 1.0), labels


# -- dataset --------------------------------------------------------------

@dataclass
class DatasetConfig:
    """Dataset build parameters; defaults reproduce the published setup at full scale."""

    corpus: str = "toy"                 # "toy" or a directory of clean images
    labels: str | None = None           # directory of label PNGs, or "snet:<checkpoint>"
    label_kind: str = "11"              # "11" (parsing labels 0..10) or "4" (class indices 0..3)
    toy_count: int = 16
    toy_size: int = 128
    num_samples: int = 1_700_000
    patch_size: int = 128
    kernel_count: int = 25_000
    kernel_sides: tuple = KERNEL_SIDE_RANGE
    trajectory: dict = field(default_factory=lambda: asdict(TrajectoryParams()))
    noise_sigma: float = 0.03
    class_blurred: bool = True
    master_seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.kernel_sides = tuple(cfg.kernel_sides)
        return cfg

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def validate(self):
        if self.patch_size % 2:
            raise ValueError(f"patch_size must be even, got {self.patch_size}")
        if self.num_samples < 1 or self.kernel_count < 1:
            raise ValueError("num_samples and kernel_count must be positive")
        lo, hi = self.kernel_sides
        if lo % 2 == 0 or hi % 2 == 0 or lo > hi or lo < 1:
            raise ValueError(f"kernel_sides must be an odd range, got {self.kernel_sides}")
        if hi > self.patch_size:
            raise ValueError(f"largest kernel {hi} exceeds patch size {self.patch_size}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.label_kind not in ("11", "4"):
            raise ValueError(f"label_kind must be '11' or '4', got {self.label_kind!r}")


def _load_corpus(cfg: DatasetConfig):
    """List of (name, image, hard 4 x H x W masks)."""
    if cfg.corpus == "toy":
        out = []
        for j in range(cfg.toy_count):
            img, lab = toy_face(derive_seed(cfg.master_seed, 0, j), cfg.toy_size)
            out.append((f"toy{j:05d}", img, group_labels(lab)))
        return out

    root = Path(cfg.corpus)
    if not root.is_dir():
        raise FileNotFoundError(f"clean corpus directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not files:
        raise FileNotFoundError(f"no images in clean corpus {root}")
    snet = None
    if cfg.labels is None:
        raise ValueError("a directory corpus needs `labels` (label PNG dir or 'snet:<checkpoint>')")
    if cfg.labels.startswith("snet:"):
        from .network import load_model
        snet, _ = load_model(cfg.labels[5:], expected_phase=("snet", "snet_finetune"))
    out = []
    for p in files:
        img = imageio.read_image(p)
        if snet is not None:
            from .semantics import harden, snet_forward
            h, w = img.shape[:2]
            crop = img[: h - h % 2, : w - w % 2]
            masks = harden(snet_forward(snet, crop))
            img = crop
        else:
            lp = Path(cfg.labels) / (p.stem + ".png")
            idx = imageio.read_index(lp)
            if idx.shape != img.shape[:2]:
                raise ValueError(f"label map {lp} shape {idx.shape} does not match image {img.shape[:2]}")
            masks = group_labels(idx) if cfg.label_kind == "11" else index_to_masks(idx)
        out.append((p.stem, img, masks))
    return out


def make_kernel_bank(cfg: DatasetConfig, ids=None):
    """Kernels indexed by position in the bank; each one derives from (master_seed, 2, k)."""
    params = TrajectoryParams(**cfg.trajectory)
    lo, hi = cfg.kernel_sides
    sides = np.arange(lo, hi + 1, 2)
    bank = {}
    for k in (range(cfg.kernel_count) if ids is None else ids):
        seed = derive_seed(cfg.master_seed, 2, k)
        side = int(np.random.default_rng(seed).choice(sides))
        bank[k] = generate_kernel(seed, side, params, side_range=(lo, hi))
    return bank


def make_sample(j: int, cfg: DatasetConfig, corpus, kernel_for):
    """Deterministic sample j: depends only on (master_seed, j)."""
    seed = derive_seed(cfg.master_seed, 1, j)
    rng = np.random.default_rng(seed)
    eligible = [i for i, (_, img, _) in enumerate(corpus)
                if img.shape[0] >= cfg.patch_size and img.shape[1] >= cfg.patch_size]
    if not eligible:
        raise ValueError(f"no corpus image is at least {cfg.patch_size}x{cfg.patch_size}")
    src = eligible[int(rng.integers(len(eligible)))]
    _, img, masks = corpus[src]
    p = cfg.patch_size
    r0 = int(rng.integers(img.shape[0] - p + 1))
    c0 = int(rng.integers(img.shape[1] - p + 1))
    clean = img[r0:r0 + p, c0:c0 + p]
    m = masks[:, r0:r0 + p, c0:c0 + p]
    kid = int(rng.integers(cfg.kernel_count))
    kernel = kernel_for(kid)
    noise_seed = int(rng.integers(2**31))
    blurry = add_noise(blur(clean, kernel), cfg.noise_sigma, noise_seed)
    sample = {
        "index": j,
        "clean": clean,
        "blurry": blurry,
        "masks": m,
        "kernel_index": kid,
        "kernel": kernel,
        "seed": seed,
        "class_blurred": {},
    }
    if cfg.class_blurred:
        for i in range(1, 5):
            sample["class_blurred"][i] = add_noise(class_blur(clean, m, i, kernel), cfg.noise_sigma,
                                                   derive_seed(noise_seed, i))
    return sample


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("UMSN_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _kernel_cache(cfg):
    cache = {}

    def kernel_for(k):
        if k not in cache:
            cache[k] = make_kernel_bank(cfg, [k])[k]
        return cache[k]

    return kernel_for


def generate_samples(cfg: DatasetConfig) -> list[dict]:
    """All samples in memory (float images, nothing written)."""
    cfg.validate()
    corpus = _load_corpus(cfg)
    kernel_for = _kernel_cache(cfg)
    samples = [make_sample(j, cfg, corpus, kernel_for) for j in range(cfg.num_samples)]
    for s in samples:
        s["id"] = f"s{s['index']:07d}"
    return samples


def build_dataset(cfg: DatasetConfig, out, workers: int | None = None) -> list[dict]:
    """Write patches, blurred pairs, masks, kernels and ``manifest.json`` under ``out``.

    Returns the manifest records. Output is identical for any worker count.
    """
    cfg.validate()
    corpus = _load_corpus(cfg)
    if not corpus:
        raise ValueError("clean corpus is empty")
    out = Path(out)
    workers = workers or num_workers()
    kernel_for = _kernel_cache(cfg)

    records = []
    with imageio.atomic_dir(out) as root:
        for sub in ("clean", "blurry", "masks", "kernels"):
            (root / sub).mkdir()
        if cfg.class_blurred:
            for i in range(1, 5):
                (root / "class_blurred" / str(i)).mkdir(parents=True)

        def work(j):
            s = make_sample(j, cfg, corpus, kernel_for)
            return s, _write_sample(root, s, cfg)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(work, range(cfg.num_samples)))
        else:
            results = [work(j) for j in range(cfg.num_samples)]
        records = [rec for _, rec in results]
        meta = {
            "classes": {str(i + 1): name for i, name in enumerate(CLASS_NAMES)},
            "mask_png_values": {str(i): CLASS_NAMES[i] for i in range(4)},
            "source_labels": list(LABELS_11),
            "config": asdict(cfg),
        }
        imageio.write_text(root / "manifest.json", json.dumps(records, indent=1) + "\n")
        imageio.write_text(root / "dataset.json", json.dumps(meta, indent=1, default=list) + "\n")
    log.info("wrote %d samples to %s", len(records), out)
    return records


def _write_sample(root: Path, s: dict, cfg: DatasetConfig) -> dict:
    sid = f"s{s['index']:07d}"
    kid = f"k{s['kernel_index']:06d}"
    imageio.write_image(root / "clean" / f"{sid}.png", s["clean"])
    imageio.write_image(root / "blurry" / f"{sid}.png", s["blurry"])
    imageio.write_index(root / "masks" / f"{sid}.png", masks_to_index(s["masks"]))
    kpath = root / "kernels" / f"{kid}.npy"
    if not kpath.exists():
        imageio.write_array(kpath, s["kernel"])
    rec = {
        "id": sid,
        "clean": f"clean/{sid}.png",
        "blurry": f"blurry/{sid}.png",
        "masks": f"masks/{sid}.png",
        "kernel_id": kid,
        "kernel": f"kernels/{kid}.npy",
        "kernel_side": int(s["kernel"].shape[0]),
        "noise_sigma": float(cfg.noise_sigma),
        "seed": int(s["seed"]),
    }
    if s["class_blurred"]:
        rec["class_blurred"] = {}
        for i, im in s["class_blurred"].items():
            rel = f"class_blurred/{i}/{sid}.png"
            imageio.write_image(root / rel, im)
            rec["class_blurred"][str(i)] = rel
    return rec


# -- reading back ---------------------------------------------------------

def read_manifest(path) -> tuple[Path, list[dict]]:
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(records, list):
        raise ValueError(f"manifest {path} must be a JSON array")
    return path.parent, records


def load_samples(manifest, need_class_blurred=False):
    """Load every manifest record into memory as numpy arrays."""
    root, records = read_manifest(manifest)
    samples = []
    for rec in records:
        s = {
            "id": rec["id"],
            "clean": imageio.read_image(root / rec["clean"]),
            "blurry": imageio.read_image(root / rec["blurry"]),
            "masks": index_to_masks(imageio.read_index(root / rec["masks"])),
        }
        check_partition(s["masks"])
        if need_class_blurred:
            if "class_blurred" not in rec:
                raise ValueError(f"sample {rec['id']} has no class-blurred variants")
            s["class_blurred"] = {int(i): imageio.read_image(root / p) for i, p in rec["class_blurred"].items()}
        samples.append(s)
    return samples
