"""Class-decomposed L1, the confidence-guided loss, the perceptual loss and their total."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01           # weight of the -log C regularizer
    lam_perceptual: float = 0.0002
    confidence_floor: float = 1e-6

    def __post_init__(self):
        if self.lam < 0 or self.lam_perceptual < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.confidence_floor < 1:
            raise ValueError(f"confidence_floor must lie in (0, 1), got {self.confidence_floor}")


def _batch(x):
    x = torch.as_tensor(x)
    return x.unsqueeze(0) if x.dim() == 3 else x


def class_l1(pred, truth, masks):
    """Per-class masked L1, normalized by H*W*3.

    Returns ``(total, per_class)`` with shapes (N,) and (N, 4).
    """
    pred, truth, masks = _batch(pred), _batch(truth), _batch(masks)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    if masks.shape[0] != pred.shape[0] or masks.shape[-2:] != pred.shape[-2:]:
        raise ValueError(f"mask shape {tuple(masks.shape)} does not match image {tuple(pred.shape)}")
    n, c, h, w = pred.shape
    err = (pred - truth).abs()
    per_class = torch.einsum("nkhw,nchw->nk", masks.to(err.dtype), err) / (h * w * c)
    return per_class.sum(dim=1), per_class


def optimal_confidence(per_class_loss: float, lam: float) -> float:
    """argmin over C in (0, 1] of C * l - lam * log C."""
    if per_class_loss <= 0:
        return 1.0
    return min(1.0, lam / per_class_loss)


def confidence_loss(per_class, confidences, config: LossConfig = LossConfig()):
    """Batch mean of sum_i C_i * l_i - lam * log C_i."""
    per_class = torch.as_tensor(per_class)
    c = torch.as_tensor(confidences, dtype=per_class.dtype)
    tol = 1e-7
    if c.min() < config.confidence_floor - tol or c.max() > 1 + tol:
        raise ValueError(
            f"confidences must lie in [{config.confidence_floor}, 1], "
            f"got range [{c.min().item():.3g}, {c.max().item():.3g}]"
        )
    terms = c * per_class - config.lam * torch.log(c)
    return terms.sum(dim=-1).mean()


class FeatureExtractor(nn.Module):
    """Frozen conv feature stack with a 'shallow' tap (two convs + ReLU) and a
    'deep' tap after five 2x pooling stages.

    Weights are seeded random by default; ``load_weights`` accepts an
    externally trained state dict with the same layout.
    """

    def __init__(self, channels=(16, 32, 32, 64, 64), seed=0):
        super().__init__()
        self.channels = tuple(channels)
        self.seed = seed
        c1 = self.channels[0]
        self.shallow = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c1, 3, padding=1), nn.ReLU(),
        )
        stages = []
        prev = c1
        for c in self.channels[1:]:
            stages += [nn.Conv2d(prev, c, 3, padding=1), nn.ReLU()]
            prev = c
        self.stages = nn.ModuleList(
            nn.Sequential(*stages[2 * k:2 * k + 2]) for k in range(len(self.channels) - 1)
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def load_weights(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        self.load_state_dict(state)
        self.requires_grad_(False)
        return self

    def train(self, mode=True):
        return super().train(False)

    @staticmethod
    def _pool(x):
        if min(x.shape[-2:]) < 2:
            return x
        return F.max_pool2d(x, 2, ceil_mode=True)

    def forward(self, x, tap="shallow"):
        x = _batch(x)
        h = self.shallow(x)
        if tap == "shallow":
            return h
        if tap != "deep":
            raise ValueError(f"unknown tap {tap!r}")
        h = self._pool(h)
        for stage in self.stages:
            h = self._pool(stage(h))
        return h


def perceptual_loss(pred, truth, extractor: FeatureExtractor):
    """Mean squared difference of shallow-tap features."""
    pred, truth = _batch(pred), _batch(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    return F.mse_loss(extractor(pred), extractor(truth))


def total_loss(pred, truth, masks, confidences, extractor, config: LossConfig = LossConfig()):
    """L_c + lam_perceptual * L_p, plus a diagnostics dict.

    ``confidences`` of None means C_i = 1 (plain class-summed L1). The caller
    decides gradient routing by passing detached or live confidences.
    """
    _, per_class = class_l1(pred, truth, masks)
    if confidences is None:
        confidences = torch.ones_like(per_class)
    lc = confidence_loss(per_class, confidences, config)
    if config.lam_perceptual > 0 and extractor is not None:
        lp = perceptual_loss(pred, truth, extractor)
    else:
        lp = torch.zeros((), dtype=per_class.dtype)
    total = lc + config.lam_perceptual * lp
    diag = {
        "per_class": per_class.detach().mean(dim=0).tolist(),
        "C": torch.as_tensor(confidences).detach().reshape(-1, per_class.shape[-1]).mean(dim=0).tolist(),
        "L_c": float(lc.detach()),
        "L_p": float(lp.detach()),
    }
    return total, diag
