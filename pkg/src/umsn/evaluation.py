"""Restoration metrics (PSNR, SSIM, feature distance, per-class scores) and dataset reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import imageio
from .losses import FeatureExtractor
from .semantics import CLASS_NAMES, index_to_masks
from .synthesis import read_manifest

log = logging.getLogger(__name__)

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse_to_psnr(mse: float) -> float | None:
    """10 log10(1 / mse) for unit dynamic range; None when mse is 0."""
    if mse == 0:
        return None
    return 10.0 * math.log10(1.0 / mse)


def psnr(a, b) -> float | None:
    """PSNR in dB for images in [0, 1]. Identical images give None."""
    a, b = _pair(a, b)
    return mse_to_psnr(float(np.mean((a - b) ** 2)))


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    r = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[r:-r, r:-r]


def ssim_map(a, b, data_range=1.0):
    """Local SSIM over 'valid' 11x11 Gaussian windows for one 2D channel."""
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))


def ssim(a, b) -> float:
    """Mean SSIM (standard constants), averaged over channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[-1])]))


def _chw(image):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)))[None]


def feature_distance(a, b, extractor: FeatureExtractor) -> float:
    """L2 distance between deep-tap features of two H x W x 3 images."""
    a, b = _pair(a, b)
    with torch.no_grad():
        fa = extractor(_chw(a), tap="deep").double()
        fb = extractor(_chw(b), tap="deep").double()
    return float(torch.linalg.vector_norm(fa - fb))


def per_class_metrics(pred, truth, masks) -> list[dict]:
    """PSNR/SSIM of m_i * pred vs m_i * truth for the 4 classes.

    MSE is normalized by the class pixel count. Each entry carries a
    ``status``: "ok", "identical" or "empty".
    """
    pred, truth = _pair(pred, truth)
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape[1:] != pred.shape[:2]:
        raise ValueError(f"mask shape {masks.shape} does not match image {pred.shape}")
    sq = (pred - truth) ** 2
    out = []
    for i in range(masks.shape[0]):
        m = masks[i]
        n = float(m.sum())
        if n == 0:
            out.append({"class": CLASS_NAMES[i], "psnr": None, "ssim": None, "mse": None, "pixels": 0,
                        "status": "empty"})
            continue
        mse = float((m[..., None] * sq).sum() / (n * pred.shape[-1]))
        mp, mt = m[..., None] * pred, m[..., None] * truth
        out.append({
            "class": CLASS_NAMES[i],
            "psnr": mse_to_psnr(mse),
            "ssim": ssim(mp, mt),
            "mse": mse,
            "pixels": int(n),
            "status": "identical" if mse == 0 else "ok",
        })
    return out


# -- dataset reports ------------------------------------------------------

@dataclass
class MetricReport:
    records: list
    means: dict
    config_digest: str | None = None
    extractor: str = ""
    header: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def status(self) -> str:
        if not self.records:
            return "failed"
        return "partial" if self.failures else "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status
        return d


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(records) -> dict:
    means = {
        "psnr": _mean(r["psnr"] for r in records),
        "ssim": _mean(r["ssim"] for r in records),
        "d_feat": _mean(r["d_feat"] for r in records),
        "input_psnr": _mean(r["input_psnr"] for r in records),
        "per_class": {},
    }
    for i, name in enumerate(CLASS_NAMES):
        means["per_class"][name] = {
            "psnr": _mean(r["per_class"][i]["psnr"] for r in records),
            "ssim": _mean(r["per_class"][i]["ssim"] for r in records),
        }
    return means


def _run_model(model, blurry, masks):
    y = _chw(blurry)
    m = torch.from_numpy(np.asarray(masks, dtype=np.float32))[None]
    with torch.no_grad():
        out = model.deblur(y, m) if hasattr(model, "deblur") else model(y, m)
    return out.clamp(0.0, 1.0)[0].permute(1, 2, 0).numpy().astype(np.float64)


def evaluate_dataset(model, manifest, extractor: FeatureExtractor | None = None, out=None, snet=None,
                     grids=False, config_digest=None) -> MetricReport:
    """Deblur every manifest sample and score it against its clean image.

    ``model`` is a UMSN (or any callable ``f(y, masks) -> image batch``).
    Network masks come from ``snet`` when given, else from the manifest.
    Per-class metrics always use the manifest masks. Samples with missing
    files are recorded as failures and skipped.
    """
    root, records_in = read_manifest(manifest)
    if not records_in:
        raise ValueError(f"no samples in manifest {manifest}")
    extractor = extractor or FeatureExtractor()
    records, failures, panels = [], [], []
    for rec in records_in:
        try:
            clean = imageio.read_image(root / rec["clean"])
            blurry = imageio.read_image(root / rec["blurry"])
            masks = index_to_masks(imageio.read_index(root / rec["masks"]))
        except (OSError, KeyError) as exc:
            failures.append({"id": rec.get("id"), "error": str(exc)})
            log.warning("skipping %s: %s", rec.get("id"), exc)
            continue
        if snet is not None:
            from .semantics import snet_forward
            net_masks = snet_forward(snet, blurry)
        else:
            net_masks = masks
        pred = _run_model(model, blurry, net_masks)
        records.append({
            "id": rec["id"],
            "psnr": psnr(pred, clean),
            "ssim": ssim(pred, clean),
            "d_feat": feature_distance(pred, clean, extractor),
            "input_psnr": psnr(blurry, clean),
            "per_class": per_class_metrics(pred, clean, masks),
        })
        if grids:
            panels.append((rec["id"], blurry, pred, clean))
    records.sort(key=lambda r: r["id"])
    report = MetricReport(
        records=records,
        means=aggregate(records) if records else {},
        config_digest=config_digest,
        extractor=f"FeatureExtractor(channels={extractor.channels}, seed={extractor.seed})",
        header={"outputs": "float in [0, 1] after clamping", "psnr_none_means": "identical images",
                "mask_source": "snet" if snet is not None else "manifest"},
        failures=failures,
    )
    if not records:
        raise ValueError(f"no readable samples in manifest {manifest}")
    if out is not None:
        write_report(report, out, panels)
    return report


CSV_COLUMNS = ["id", "psnr", "ssim", "d_feat", "input_psnr"] + [
    f"{name}_{m}" for name in CLASS_NAMES for m in ("psnr", "ssim")
]


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    fmt = lambda v: "identical" if v is None else repr(float(v))  # noqa: E731
    for r in report.records:
        row = [r["id"], fmt(r["psnr"]), fmt(r["ssim"]), fmt(r["d_feat"]), fmt(r["input_psnr"])]
        for pc in r["per_class"]:
            if pc["status"] == "empty":
                row += ["empty", "empty"]
            else:
                row += [fmt(pc["psnr"]), fmt(pc["ssim"])]
        w.writerow(row)
    return buf.getvalue()


def write_report(report: MetricReport, out, panels=()):
    """report.json, report.csv, a per-class summary figure and optional grids."""
    from . import plotting

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    imageio.write_text(out / "report.json", json.dumps(report.to_dict(), indent=1) + "\n")
    imageio.write_text(out / "report.csv", report_csv(report))
    plotting.per_class_summary(report, out / "per_class.png")
    if panels:
        (out / "grids").mkdir(exist_ok=True)
        for sid, blurry, pred, clean in panels:
            plotting.comparison_grid(blurry, pred, clean, out / "grids" / f"{sid}.png", title=sid)
