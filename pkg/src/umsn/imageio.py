"""PNG / array I/O with atomic writes."""

from __future__ import annotations

import contextlib
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temp path next to ``path``; rename onto it only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


@contextlib.contextmanager
def atomic_dir(path):
    """Build a directory under a temp name and move it into place on success.

    An existing empty directory is replaced; a non-empty one is an error.
    """
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise FileExistsError(f"output directory exists and is not empty: {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        yield tmp
        if path.exists():
            path.rmdir()
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def write_text(path, text: str):
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def to_uint8(image) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """RGB image as H x W x 3 float32 in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from None
    return arr / 255.0


def write_image(path, image):
    with atomic_path(path) as tmp:
        PILImage.fromarray(to_uint8(image), mode="RGB").save(tmp, format="PNG")


def read_index(path) -> np.ndarray:
    """Single-channel indexed PNG as an integer H x W array."""
    try:
        with PILImage.open(path) as im:
            return np.asarray(im, dtype=np.int64)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read index map {path}: {exc}") from None


def write_index(path, index):
    index = np.asarray(index)
    if index.min() < 0 or index.max() > 255:
        raise ValueError("index values must fit in 8 bits")
    with atomic_path(path) as tmp:
        PILImage.fromarray(index.astype(np.uint8), mode="L").save(tmp, format="PNG")


def write_array(path, array):
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            np.save(fh, np.asarray(array))


def read_array(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
