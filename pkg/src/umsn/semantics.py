"""Face-parsing label taxonomy, the 11 -> 4 class grouping, mask algebra and S-Net."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .blocks import ConvUnit, ResBlock, downsample, scaled, upsample

# Source face-parsing labels (Helen / Smith et al. ordering).
LABELS_11 = (
    "background",
    "face_skin",
    "left_eyebrow",
    "right_eyebrow",
    "left_eye",
    "right_eye",
    "nose",
    "upper_lip",
    "teeth",
    "lower_lip",
    "hair",
)

CLASS_NAMES = ("background", "skin", "inner_face", "hair")

# label index -> class index (0-based; class k here is m_{k+1})
LABEL_TO_CLASS = np.array([0, 1, 2, 2, 2, 2, 2, 2, 2, 2, 3], dtype=np.int64)


def group_labels(labels) -> np.ndarray:
    """Map an H x W 11-label map to hard 4-class masks of shape 4 x H x W."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 10):
        raise ValueError(f"labels must lie in [0, 10], got range [{labels.min()}, {labels.max()}]")
    return index_to_masks(LABEL_TO_CLASS[labels.astype(np.int64)])


def index_to_masks(index) -> np.ndarray:
    """Class index map (values 0..3) -> 4 x H x W float one-hot planes."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() > 3):
        raise ValueError("class indices must lie in [0, 3]")
    return (index[None] == np.arange(4)[:, None, None]).astype(np.float32)


def harden(masks):
    """Argmax over the class axis; ties go to the lowest class index.

    Accepts numpy (4 x H x W) or torch (N x 4 x H x W); returns the same kind
    of one-hot planes.
    """
    if isinstance(masks, torch.Tensor):
        idx = masks.argmax(dim=1)  # first maximal index
        return torch.nn.functional.one_hot(idx, masks.shape[1]).permute(0, 3, 1, 2).to(masks.dtype)
    masks = np.asarray(masks)
    return index_to_masks(np.argmax(masks, axis=0))


def masks_to_index(masks) -> np.ndarray:
    return np.argmax(np.asarray(masks), axis=0).astype(np.uint8)


def check_partition(masks, atol=1e-6):
    masks = np.asarray(masks)
    if masks.shape[0] != 4:
        raise ValueError(f"expected 4 mask planes, got {masks.shape[0]}")
    if masks.min() < -atol or masks.max() > 1 + atol:
        raise ValueError("mask values must lie in [0, 1]")
    if not np.allclose(masks.sum(axis=0), 1.0, atol=atol):
        raise ValueError("mask planes must sum to 1 at every pixel")


def decompose(image, masks):
    """Split an H x W x 3 image into the four masked images m_i * x."""
    image = np.asarray(image)
    masks = np.asarray(masks)
    if masks.shape[1:] != image.shape[:2]:
        raise ValueError(f"mask shape {masks.shape} does not match image {image.shape}")
    return [masks[i][..., None] * image for i in range(masks.shape[0])]


def f_score(pred, truth, class_index: int) -> float:
    """F-score of one class plane (``class_index`` in 1..4).

    ``pred`` is hardened first. A class absent from both maps scores 1.
    """
    pred = harden(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if not 1 <= class_index <= 4:
        raise ValueError(f"class_index must be in 1..4, got {class_index}")
    p = pred[class_index - 1] > 0.5
    t = truth[class_index - 1] > 0.5
    tp = np.count_nonzero(p & t)
    fp = np.count_nonzero(p & ~t)
    fn = np.count_nonzero(~p & t)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


class SNet(nn.Module):
    """Segmentation network predicting the 4 grouped classes directly.

    ResBlock(3,32)-Down-ResBlock(32,32)x3-Up-ResBlock(32,16)-Conv3x3(16,4).
    ``forward`` returns logits; ``predict`` returns soft masks.
    """

    def __init__(self, width=1.0):
        super().__init__()
        c32, c16 = scaled(32, width), scaled(16, width)
        self.width = width
        self.first = ResBlock(3, c32)
        self.mid = nn.Sequential(ResBlock(c32, c32), ResBlock(c32, c32), ResBlock(c32, c32))
        self.tail = ResBlock(c32, c16)
        self.out = ConvUnit(c16, 4, 3)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an N x 3 x H x W batch, got {tuple(x.shape)}")
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError(f"spatial dims must be even, got {tuple(x.shape[-2:])}")
        h = self.mid(downsample(self.first(x)))
        return self.out(self.tail(upsample(h)))

    @torch.no_grad()
    def predict(self, x):
        return torch.softmax(self.forward(x), dim=1)


def snet_forward(model: SNet, image) -> np.ndarray:
    """Soft 4 x H x W masks for one H x W x 3 image."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    model.eval()
    return model.predict(x)[0].numpy()
