"""Three-phase training: S-Net, per-class first-stage streams, and the joint model."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import imageio
from .losses import FeatureExtractor, LossConfig, class_l1, confidence_loss, perceptual_loss, total_loss
from .network import (
    ConfidenceNet,
    CheckpointMeta,
    Stage1Net,
    UMSN,
    Variant,
    config_digest,
    load_model,
    load_payload,
    read_meta,
    save_checkpoint,
)
from .semantics import SNet, f_score, harden
from .synthesis import derive_seed, load_samples

log = logging.getLogger(__name__)

PHASES = ("snet", "snet_finetune", "stage1", "umsn")

# documented full-scale defaults: (learning rate, iterations)
PHASE_DEFAULTS = {
    "snet": (2e-4, 60_000),
    "snet_finetune": (1e-5, 30_000),
    "stage1": (2e-4, 50_000),
    "umsn": (2e-4, 100_000),
}

LOG_SCHEMA = {
    "type": "object",
    "required": ["iter", "phase", "loss", "per_class", "C", "lr", "wallclock"],
    "properties": {
        "iter": {"type": "integer", "minimum": 1},
        "phase": {"enum": list(PHASES)},
        "loss": {"type": "number"},
        "per_class": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        "C": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                 "minItems": 4, "maxItems": 4},
            ]
        },
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "wallclock": {"type": "number", "minimum": 0},
    },
}


@dataclass
class TrainConfig:
    phase: str = "umsn"
    dataset: str | None = None            # manifest.json path
    out: str | None = None                # run directory
    class_index: int | None = None        # stage1 only, 1..4
    learning_rate: float | None = None    # None -> phase default
    iterations: int | None = None         # None -> phase default; total, including resumed ones
    batch_size: int = 16
    master_seed: int = 0
    width_multiplier: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 5000
    log_every: int = 10
    lr_schedule: str = "constant"         # or "cosine"
    variant: str = "umsn"
    resume: str | None = None
    stage1: list | None = None            # four stage-1 checkpoint dirs (umsn)
    mask_source: str = "dataset"          # or "snet"
    snet_checkpoint: str | None = None
    keep_stage1_heads: bool = True
    extractor_seed: int = 0
    extractor_weights: str | None = None
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; choose from {PHASES}")
        lr, iters = PHASE_DEFAULTS[self.phase]
        if self.learning_rate is None:
            self.learning_rate = lr
        if self.iterations is None:
            self.iterations = iters
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.mask_source not in ("dataset", "snet"):
            raise ValueError(f"mask_source must be 'dataset' or 'snet', got {self.mask_source!r}")
        if self.phase == "stage1" and self.class_index not in (1, 2, 3, 4):
            raise ValueError(f"stage1 needs class_index in 1..4, got {self.class_index}")
        Variant.named(self.variant)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        with open(path) as fh:
            data = json.load(fh)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        # run-location fields do not change what is trained
        d = self.to_dict()
        for k in ("out", "resume", "checkpoint_every", "log_every"):
            d.pop(k)
        return config_digest(d)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    checkpoint: Path | None
    cn: torch.nn.Module | None = None


# -- shared machinery -----------------------------------------------------

def _tensor(images):
    return torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def batch_indices(master_seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    """Batch content for one iteration; a pure function of (seed, iteration)."""
    rng = np.random.default_rng(derive_seed(master_seed, 7, iteration))
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def learning_rate_at(cfg: TrainConfig, iteration: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (iteration - 1) / cfg.iterations))
    return cfg.learning_rate


def _seed_init(cfg: TrainConfig, *keys):
    torch.manual_seed(derive_seed(cfg.master_seed, 5, *keys))


def _make_extractor(cfg: TrainConfig):
    ext = FeatureExtractor(seed=cfg.extractor_seed)
    if cfg.extractor_weights:
        ext.load_weights(cfg.extractor_weights)
    return ext


class _Run:
    """Iteration loop, logging, checkpointing and resume shared by all phases."""

    def __init__(self, cfg: TrainConfig, modules: dict, optimizer, extra_meta=None):
        self.cfg = cfg
        self.modules = modules
        self.optimizer = optimizer
        self.extra_meta = extra_meta or {}
        self.start = 0
        self.history = []
        self.out = Path(cfg.out) if cfg.out else None

    def resume_from(self, directory):
        meta = read_meta(directory)
        if meta.phase != self.cfg.phase:
            raise ValueError(f"cannot resume {self.cfg.phase!r} from a {meta.phase!r} checkpoint")
        _check_width(meta, self.cfg, directory)
        payload = load_payload(directory)
        for k, m in self.modules.items():
            m.load_state_dict(payload["modules"][k])
        self.optimizer.load_state_dict(payload["optimizers"]["adam"])
        self.start = meta.iteration
        # carry the earlier log forward so a resumed run writes the whole history
        self.history = [r for r in payload["extra"].get("history", []) if r["iter"] <= self.start]
        if self.start >= self.cfg.iterations:
            raise ValueError(f"checkpoint is at iteration {self.start}, nothing left of {self.cfg.iterations}")

    def meta(self, iteration):
        return CheckpointMeta(
            phase=self.cfg.phase,
            iteration=iteration,
            config_digest=self.cfg.digest(),
            master_seed=self.cfg.master_seed,
            width_multiplier=self.cfg.width_multiplier,
            **self.extra_meta,
        )

    def save(self, directory, iteration):
        save_checkpoint(directory, self.meta(iteration), self.modules, {"adam": self.optimizer},
                        extra={"config": self.cfg.to_dict(), "history": list(self.history)})

    def run(self, step):
        cfg = self.cfg
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        t0 = time.perf_counter()
        for it in range(self.start + 1, cfg.iterations + 1):
            lr = learning_rate_at(cfg, it)
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            loss, per_class, conf = step(it)
            if not math.isfinite(loss):
                raise FloatingPointError(f"{cfg.phase}: loss became {loss} at iteration {it}")
            if it % cfg.log_every == 0 or it == cfg.iterations:
                self.history.append({
                    "iter": it,
                    "phase": cfg.phase,
                    "loss": loss,
                    "per_class": [float(v) for v in per_class],
                    "C": None if conf is None else [float(v) for v in conf],
                    "lr": lr,
                    "wallclock": round(time.perf_counter() - t0, 4),
                })
            if self.out and cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and it != cfg.iterations:
                self.save(self.out / f"iter_{it:07d}", it)
        final = None
        if self.out:
            final = self.out / "final"
            self.save(final, cfg.iterations)
            write_log(self.out / "log.jsonl", self.history)
        return final


def write_log(path, records):
    imageio.write_text(path, "".join(json.dumps(r) + "\n" for r in records))


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _check_width(meta, cfg, directory):
    if abs(meta.width_multiplier - cfg.width_multiplier) > 1e-12:
        raise ValueError(
            f"checkpoint {directory} has width multiplier {meta.width_multiplier} but the config "
            f"asks for {cfg.width_multiplier}: topology mismatch"
        )


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)


def _load_data(cfg, samples, need_class_blurred=False):
    if samples is None:
        if not cfg.dataset:
            raise ValueError("no dataset: set `dataset` to a manifest path")
        samples = load_samples(cfg.dataset, need_class_blurred=need_class_blurred)
    if not samples:
        raise ValueError("dataset has no samples")
    data = {
        "clean": _tensor([s["clean"] for s in samples]),
        "blurry": _tensor([s["blurry"] for s in samples]),
        "masks": torch.from_numpy(np.stack([s["masks"] for s in samples]).astype(np.float32)),
    }
    if need_class_blurred:
        for s in samples:
            if "class_blurred" not in s or cfg.class_index not in s["class_blurred"]:
                raise ValueError(f"sample {s.get('id')} lacks the class-{cfg.class_index} blurred variant")
        data["class_blurred"] = _tensor([s["class_blurred"][cfg.class_index] for s in samples])
    return data


# -- S-Net ----------------------------------------------------------------

def mean_f_score(model: SNet, images, masks) -> tuple[float, list]:
    """Mean F-score over images and the 4 classes, plus the per-class means."""
    model.eval()
    with torch.no_grad():
        pred = model.predict(images).numpy()
    truth = masks.numpy() if isinstance(masks, torch.Tensor) else np.asarray(masks)
    scores = np.array([[f_score(p, t, k) for k in range(1, 5)] for p, t in zip(pred, truth)])
    return float(scores.mean()), scores.mean(axis=0).tolist()


def train_snet(cfg: TrainConfig, samples=None) -> TrainResult:
    """Per-pixel 4-class cross-entropy with Adam. ``snet`` trains on clean
    images; ``snet_finetune`` starts from an S-Net checkpoint and trains on
    blurry ones."""
    if cfg.phase not in ("snet", "snet_finetune"):
        raise ValueError(f"train_snet got phase {cfg.phase!r}")
    data = _load_data(cfg, samples)
    _seed_init(cfg, 0)
    model = SNet(cfg.width_multiplier)
    opt = _adam(model.parameters(), cfg)
    run = _Run(cfg, {"model": model}, opt)
    if cfg.phase == "snet_finetune":
        if not cfg.resume:
            raise ValueError("snet_finetune needs `resume` pointing at an S-Net checkpoint")
        meta = read_meta(cfg.resume)
        if meta.phase == "snet":
            _check_width(meta, cfg, cfg.resume)
            model.load_state_dict(load_payload(cfg.resume)["modules"]["model"])
        else:
            run.resume_from(cfg.resume)
    elif cfg.resume:
        run.resume_from(cfg.resume)

    inputs = data["clean"] if cfg.phase == "snet" else data["blurry"]
    target = data["masks"].argmax(dim=1)
    n = inputs.shape[0]

    def step(it):
        model.train()
        idx = torch.from_numpy(batch_indices(cfg.master_seed, it, n, cfg.batch_size))
        logits = model(inputs[idx])
        loss = F.cross_entropy(logits, target[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            pred = torch.softmax(logits, 1).numpy()
        truth = data["masks"][idx].numpy()
        per_class = [np.mean([f_score(p, t, k) for p, t in zip(pred, truth)]) for k in range(1, 5)]
        return loss.item(), per_class, None

    ckpt = run.run(step)
    model.eval()
    return TrainResult(model, run.history, ckpt)


# -- first stage ----------------------------------------------------------

def train_stage1(cfg: TrainConfig, samples=None) -> TrainResult:
    """Train the class-``class_index`` first-stage network on pairs where only
    that class is blurred; loss is mean L1 plus the weighted perceptual term."""
    if cfg.phase != "stage1":
        raise ValueError(f"train_stage1 got phase {cfg.phase!r}")
    data = _load_data(cfg, samples, need_class_blurred=True)
    k = cfg.class_index - 1
    _seed_init(cfg, 1, cfg.class_index)
    model = Stage1Net(cfg.width_multiplier)
    extractor = _make_extractor(cfg)
    opt = _adam(model.parameters(), cfg)
    run = _Run(cfg, {"model": model}, opt, {"class_index": cfg.class_index})
    if cfg.resume:
        run.resume_from(cfg.resume)
    y, x, m = data["class_blurred"], data["clean"], data["masks"]
    n = x.shape[0]

    def step(it):
        model.train()
        idx = torch.from_numpy(batch_indices(cfg.master_seed, it, n, cfg.batch_size))
        pred = model(y[idx], m[idx, k:k + 1])
        l1, per_class = class_l1(pred, x[idx], m[idx])
        loss = l1.mean()
        if cfg.loss.lam_perceptual > 0:
            loss = loss + cfg.loss.lam_perceptual * perceptual_loss(pred, x[idx], extractor)
        opt.zero_grad()
        loss.backward()
        opt.step()
        return loss.item(), per_class.detach().mean(0).tolist(), None

    ckpt = run.run(step)
    model.eval()
    return TrainResult(model, run.history, ckpt)


# -- joint ----------------------------------------------------------------

def _snet_for(cfg):
    if not cfg.snet_checkpoint:
        raise ValueError("mask_source 'snet' needs `snet_checkpoint`")
    snet, _ = load_model(cfg.snet_checkpoint, expected_phase=("snet", "snet_finetune"))
    snet.requires_grad_(False)
    return snet


def _load_stage1(cfg, model: UMSN):
    nets = []
    for i, path in enumerate(cfg.stage1, start=1):
        net, meta = load_model(path, expected_phase="stage1")
        _check_width(meta, cfg, path)
        if meta.class_index is not None and meta.class_index != i:
            raise ValueError(f"stage-1 checkpoint {path} is for class {meta.class_index}, expected {i}")
        nets.append(net)
    model.load_stage1(nets)


def train_umsn(cfg: TrainConfig, samples=None) -> TrainResult:
    """Joint training of the deblurring network and the confidence scorer.

    The deblurrer sees confidences as constant weights; the scorer gets the
    full confidence-guided loss with the per-class errors held fixed.
    """
    if cfg.phase != "umsn":
        raise ValueError(f"train_umsn got phase {cfg.phase!r}")
    variant = Variant.named(cfg.variant)
    data = _load_data(cfg, samples)
    _seed_init(cfg, 2)
    model = UMSN(cfg.width_multiplier, variant)
    _seed_init(cfg, 3)
    cn = ConfidenceNet(cfg.width_multiplier, floor=cfg.loss.confidence_floor) if variant.confidence else None
    if variant.streams:
        if cfg.stage1:
            if len(cfg.stage1) != 4:
                raise ValueError(f"need 4 stage-1 checkpoints, got {len(cfg.stage1)}")
            _load_stage1(cfg, model)
        else:
            log.warning("no stage-1 checkpoints given; class streams start from random weights")
        if not cfg.keep_stage1_heads:
            model.heads = None
    extractor = _make_extractor(cfg) if cfg.loss.lam_perceptual > 0 else None
    params = model.joint_parameters() + (list(cn.parameters()) if cn is not None else [])
    opt = _adam(params, cfg)
    modules = {"model": model}
    if cn is not None:
        modules["cn"] = cn
    run = _Run(cfg, modules, opt, {"variant": cfg.variant})
    if cfg.resume:
        run.resume_from(cfg.resume)

    y, x = data["blurry"], data["clean"]
    if cfg.mask_source == "snet":
        snet = _snet_for(cfg)
        with torch.no_grad():
            m_hat = snet.predict(y)
            m_true = harden(snet.predict(x))
    else:
        m_hat = m_true = data["masks"]
    n = x.shape[0]

    def step(it):
        model.train()
        idx = torch.from_numpy(batch_indices(cfg.master_seed, it, n, cfg.batch_size))
        yb, xb, mh, mt = y[idx], x[idx], m_hat[idx], m_true[idx]
        pred = model(yb, mh)
        if cn is not None:
            conf = cn.per_class(pred.detach(), xb, mt)
            loss, diag = total_loss(pred, xb, mt, conf.detach(), extractor, cfg.loss)
            _, per_class = class_l1(pred.detach(), xb, mt)
            objective = loss + confidence_loss(per_class, conf, cfg.loss)
            c_log = diag["C"]
        else:
            loss, diag = total_loss(pred, xb, mt, None, extractor, cfg.loss)
            objective = loss
            c_log = None
        opt.zero_grad()
        objective.backward()
        opt.step()
        return loss.item(), diag["per_class"], c_log

    ckpt = run.run(step)
    model.eval()
    return TrainResult(model, run.history, ckpt, cn)


TRAINERS = {
    "snet": train_snet,
    "snet_finetune": train_snet,
    "stage1": train_stage1,
    "umsn": train_umsn,
}


def train(cfg: TrainConfig, samples=None) -> TrainResult:
    return TRAINERS[cfg.phase](cfg, samples)
