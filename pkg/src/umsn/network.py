"""F-Net streams, B-Net, the assembled multi-stream deblurrer and the confidence scorer."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .blocks import ConvUnit, DenseTrunk, ResBlock, downsample, scaled, upsample

NUM_CLASSES = 4
RESIDUAL_INIT_SCALE = 0.01


def _shrink(conv: nn.Conv2d, scale=RESIDUAL_INIT_SCALE):
    # residual outputs start near zero so training begins close to identity
    with torch.no_grad():
        conv.weight.mul_(scale)
        if conv.bias is not None:
            conv.bias.zero_()


def _check_pair(y, masks):
    if y.dim() != 4 or y.shape[1] != 3:
        raise ValueError(f"expected an N x 3 x H x W image batch, got {tuple(y.shape)}")
    if y.shape[-1] % 2 or y.shape[-2] % 2:
        raise ValueError(f"spatial dims must be even, got {tuple(y.shape[-2:])}")
    if masks is not None and (masks.shape[0] != y.shape[0] or masks.shape[-2:] != y.shape[-2:]):
        raise ValueError(f"mask shape {tuple(masks.shape)} does not match image {tuple(y.shape)}")


class FNet(nn.Module):
    """Class stream: ResBlock(3,16)-Avgpool-ResBlock(16,16)x3-ResBlock(16,8), densely wired."""

    def __init__(self, width=1.0):
        super().__init__()
        c16, c8 = scaled(16, width), scaled(8, width)
        self.out_channels = c8
        self.first = ResBlock(3, c16)
        self.trunk = DenseTrunk([(c16, c16), (c16, c16), (c16, c16), (c16, c8)])

    def forward(self, y, mask_plane):
        _check_pair(y, mask_plane)
        return self.trunk(downsample(self.first(mask_plane * y)))


class Stage1Head(nn.Module):
    """Upsample-ResBlock(8,16)-Conv3x3(16,3): the stage-1 reconstruction residual."""

    def __init__(self, width=1.0):
        super().__init__()
        c8, c16 = scaled(8, width), scaled(16, width)
        self.block = ResBlock(c8, c16)
        self.out = ConvUnit(c16, 3, 3)
        _shrink(self.out.conv)

    def forward(self, feats):
        return self.out(self.block(upsample(feats)))


class Stage1Net(nn.Module):
    """First-stage network for one class: x_i = y + head(F-Net_i(m_i * y))."""

    def __init__(self, width=1.0):
        super().__init__()
        self.fnet = FNet(width)
        self.head = Stage1Head(width)

    def forward(self, y, mask_plane):
        return y + self.head(self.fnet(y, mask_plane))


@dataclass(frozen=True)
class Variant:
    """Ablation switches. The default is the full model."""

    streams: bool = True
    mask_input: bool = False
    nrl: bool = True
    confidence: bool = True

    @classmethod
    def named(cls, name: str) -> "Variant":
        try:
            return VARIANTS[name]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


VARIANTS = {
    "bnet": Variant(streams=False, mask_input=False, nrl=False, confidence=False),
    "bnet_masks": Variant(streams=False, mask_input=True, nrl=False, confidence=False),
    "bnet_masks_nrl": Variant(streams=False, mask_input=True, nrl=True, confidence=False),
    "umsn_no_lc": Variant(streams=True, mask_input=False, nrl=True, confidence=False),
    "umsn": Variant(),
}


class BNet(nn.Module):
    """Base trunk: ResBlock(3,64)-Avgpool-ResBlock(64,64)x6-Upsample-ResBlock(64,16)-Conv3x3(16,3).

    ``extra`` channels arriving from the class streams are concatenated after
    the first layer and fused back to 64 channels by a 1x1 unit.
    """

    def __init__(self, width=1.0, in_channels=3, extra=0):
        super().__init__()
        c64, c16 = scaled(64, width), scaled(16, width)
        self.first = ResBlock(in_channels, c64)
        self.fuse = ConvUnit(c64 + extra, c64, 1) if extra else None
        self.trunk = DenseTrunk([(c64, c64)] * 6)
        self.tail = ResBlock(c64, c16)
        self.out = ConvUnit(c16, 3, 3)
        _shrink(self.out.conv)

    def first_layer(self, x):
        return downsample(self.first(x))

    def rest(self, feats, extra=None):
        if extra is not None:
            feats = self.fuse(torch.cat([feats] + list(extra), dim=1))
        return self.out(self.tail(upsample(self.trunk(feats))))


class UMSN(nn.Module):
    """Multi-stream semantic deblurring network with nested residual learning.

    ``forward(y, masks)`` takes an N x 3 x H x W blurry batch and N x 4 x H x W
    (soft or hard) class masks and returns the unclamped estimate; ``deblur``
    clamps to [0, 1] for inference.
    """

    def __init__(self, width=1.0, variant: Variant = Variant()):
        super().__init__()
        self.width = width
        self.variant = variant
        in_ch = 3 + NUM_CLASSES if variant.mask_input else 3
        if variant.streams:
            self.fnets = nn.ModuleList(FNet(width) for _ in range(NUM_CLASSES))
            # auxiliary; kept for checkpoint completeness, not optimized jointly
            self.heads = nn.ModuleList(Stage1Head(width) for _ in range(NUM_CLASSES))
            extra = NUM_CLASSES * self.fnets[0].out_channels
        else:
            self.fnets = None
            self.heads = None
            extra = 0
        self.bnet = BNet(width, in_channels=in_ch, extra=extra)
        if variant.nrl:
            self.nrl = nn.ModuleList(nn.Conv2d(3, 3, 1) for _ in range(NUM_CLASSES))
            for p in self.nrl:
                _shrink(p)
        else:
            self.nrl = None

    def forward(self, y, masks):
        _check_pair(y, masks)
        if masks.shape[1] != NUM_CLASSES:
            raise ValueError(f"expected {NUM_CLASSES} mask planes, got {masks.shape[1]}")
        x_in = torch.cat([y, masks], dim=1) if self.variant.mask_input else y
        feats = self.bnet.first_layer(x_in)
        extra = None
        if self.fnets is not None:
            extra = [f(y, masks[:, i:i + 1]) for i, f in enumerate(self.fnets)]
        s = self.bnet.rest(feats, extra)
        if self.nrl is not None:
            s = s + sum(p(masks[:, i:i + 1] * y) for i, p in enumerate(self.nrl))
        return y + s

    @torch.no_grad()
    def deblur(self, y, masks):
        return self.forward(y, masks).clamp(0.0, 1.0)

    def load_stage1(self, stage1_nets):
        """Initialize the four F-Nets (and auxiliary heads) from stage-1 networks."""
        if self.fnets is None:
            raise ValueError("this variant has no class streams")
        if len(stage1_nets) != NUM_CLASSES:
            raise ValueError(f"need {NUM_CLASSES} stage-1 networks, got {len(stage1_nets)}")
        for i, net in enumerate(stage1_nets):
            self.fnets[i].load_state_dict(net.fnet.state_dict())
            self.heads[i].load_state_dict(net.head.state_dict())

    def joint_parameters(self):
        """Parameters optimized by the joint objective (excludes auxiliary heads)."""
        skip = {id(p) for p in self.heads.parameters()} if self.heads is not None else set()
        return [p for p in self.parameters() if id(p) not in skip]


def zero_residuals(model: nn.Module) -> nn.Module:
    """Zero every residual-producing output layer so the model returns its input."""
    with torch.no_grad():
        if isinstance(model, UMSN):
            model.bnet.out.conv.weight.zero_()
            model.bnet.out.conv.bias.zero_()
            if model.nrl is not None:
                for p in model.nrl.parameters():
                    p.zero_()
        elif isinstance(model, Stage1Net):
            model.head.out.conv.weight.zero_()
            model.head.out.conv.bias.zero_()
        else:
            raise TypeError(f"no residual head on {type(model).__name__}")
    return model


class ConfidenceNet(nn.Module):
    """Scores how well one class was restored, from (m*x_hat, m*x).

    Output is floor + (1 - floor) * sigmoid(.), so log C stays finite.
    Shared across classes.
    """

    def __init__(self, width=1.0, floor=1e-6):
        super().__init__()
        c = scaled(32, width)
        self.floor = floor
        self.features = nn.Sequential(
            nn.Conv2d(6, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.score = nn.Linear(c, 1)

    def forward(self, masked_pred, masked_truth):
        if masked_pred.shape != masked_truth.shape:
            raise ValueError(f"shape mismatch {tuple(masked_pred.shape)} vs {tuple(masked_truth.shape)}")
        h = self.features(torch.cat([masked_pred, masked_truth], dim=1))
        logit = self.score(h.mean(dim=(2, 3))).squeeze(1)
        return self.floor + (1.0 - self.floor) * torch.sigmoid(logit)

    def per_class(self, pred, truth, masks):
        """N x 4 confidences, one scorer call per class plane."""
        return torch.stack(
            [self(masks[:, i:i + 1] * pred, masks[:, i:i + 1] * truth) for i in range(masks.shape[1])],
            dim=1,
        )


# -- checkpoints ----------------------------------------------------------

@dataclass
class CheckpointMeta:
    phase: str
    iteration: int
    config_digest: str
    master_seed: int
    width_multiplier: float
    variant: str | None = None
    class_index: int | None = None


def config_digest(config) -> str:
    """Stable short digest of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _atomic_save(obj, path: Path):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_checkpoint(directory, meta: CheckpointMeta, modules: dict, optimizers: dict | None = None,
                    extra: dict | None = None):
    """Write ``model.pt`` (state dicts) and a ``meta.json`` sidecar into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "modules": {k: m.state_dict() for k, m in modules.items()},
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "extra": extra or {},
    }
    _atomic_save(payload, directory / "model.pt")
    text = json.dumps(asdict(meta), indent=2, sort_keys=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".meta.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text + "\n")
    os.replace(tmp, directory / "meta.json")


def read_meta(directory) -> CheckpointMeta:
    path = Path(directory) / "meta.json"
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint metadata not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"unreadable checkpoint metadata {path}: {exc}") from None
    return CheckpointMeta(**data)


def load_payload(directory):
    path = Path(directory) / "model.pt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint weights not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=True)


def load_model(directory, expected_phase=None, width=None):
    """Rebuild the network stored in a checkpoint directory.

    Returns ``(model, meta)``. A mismatching ``width`` raises ``ValueError``.
    """
    meta = read_meta(directory)
    if expected_phase is not None and meta.phase not in _as_tuple(expected_phase):
        raise ValueError(f"checkpoint {directory} holds phase {meta.phase!r}, expected {expected_phase!r}")
    if width is not None and abs(meta.width_multiplier - width) > 1e-12:
        raise ValueError(
            f"checkpoint {directory} was trained with width {meta.width_multiplier}, "
            f"requested {width}: topology mismatch"
        )
    payload = load_payload(directory)
    model = build_for_phase(meta)
    state = payload["modules"]["model"]
    if isinstance(model, UMSN) and model.heads is not None and not any(k.startswith("heads.") for k in state):
        model.heads = None  # trained with the auxiliary stage-1 heads dropped
    model.load_state_dict(state)
    model.eval()
    return model, meta


def build_for_phase(meta: CheckpointMeta) -> nn.Module:
    from .semantics import SNet

    w = meta.width_multiplier
    if meta.phase in ("snet", "snet_finetune"):
        return SNet(w)
    if meta.phase == "stage1":
        return Stage1Net(w)
    if meta.phase == "umsn":
        return UMSN(w, Variant.named(meta.variant or "umsn"))
    raise ValueError(f"unknown checkpoint phase {meta.phase!r}")


def _as_tuple(x):
    return tuple(x) if isinstance(x, (list, tuple)) else (x,)
