import numpy as np
import pytest
import torch

from umsn.synthesis import DatasetConfig

# toy degradation used by the desk-scale training runs: 13x13 supports with
# short shake paths so a width-0.25 network can overfit on one CPU
TOY_TRAJECTORY = {"steps": 12, "inertia": 0.7, "jitter": 0.3}


def toy_config(**kw) -> DatasetConfig:
    base = dict(
        corpus="toy",
        toy_count=8,
        toy_size=128,
        num_samples=8,
        patch_size=64,
        kernel_count=16,
        kernel_sides=(13, 13),
        trajectory=dict(TOY_TRAJECTORY),
        noise_sigma=0.03,
        master_seed=0,
    )
    base.update(kw)
    return DatasetConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def brute_convolve(image, kernel):
    """Direct O(H W k^2) convolution with numpy 'reflect' padding."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = image.shape[:2]
    chans = image.shape[2] if image.ndim == 3 else 1
    img = image.reshape(h, w, chans)
    out = np.zeros_like(img, dtype=np.float64)
    for c in range(chans):
        pad = np.pad(img[..., c], ((ph, ph), (pw, pw)), mode="reflect")
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for u in range(kh):
                    for v in range(kw):
                        # flipped kernel: true convolution
                        acc += kernel[kh - 1 - u, kw - 1 - v] * pad[i + u, j + v]
                out[i, j, c] = acc
    return out.reshape(image.shape)


# -- acceptance reporting -------------------------------------------------

_CRITERIA = {}
_NOTES = {}


def note(number, text):
    """Attach a measured value to a criterion's summary line."""
    _NOTES.setdefault(number, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    entry = _CRITERIA.setdefault(number, {"text": text, "ok": True, "ran": False})
    if call.when == "call":
        entry["ran"] = True
    if failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(_NOTES.get(number, []))
        line = f"{status}  criterion {number:2d}: {e['text']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
