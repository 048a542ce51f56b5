import json

import jsonschema
import numpy as np
import pytest
import torch

from umsn.network import load_model, read_meta
from umsn.synthesis import build_dataset, generate_samples
from umsn.training import (
    LOG_SCHEMA,
    PHASE_DEFAULTS,
    TrainConfig,
    batch_indices,
    learning_rate_at,
    read_log,
    train,
)

from conftest import toy_config


@pytest.fixture(scope="module")
def samples():
    return generate_samples(toy_config(num_samples=4, toy_count=2, toy_size=64, patch_size=32))


def cfg(phase, out=None, **kw):
    base = dict(phase=phase, out=str(out) if out else None, iterations=4, batch_size=2, width_multiplier=0.125,
                log_every=1, checkpoint_every=2, learning_rate=1e-3)
    if phase == "stage1":
        base["class_index"] = 2
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    c = TrainConfig(phase="umsn")
    assert (c.learning_rate, c.iterations, c.batch_size) == (2e-4, 100_000, 16)
    assert PHASE_DEFAULTS["snet_finetune"] == (1e-5, 30_000)
    assert (c.loss.lam, c.loss.lam_perceptual) == (0.01, 0.0002)


@pytest.mark.parametrize("bad", [dict(iterations=0), dict(learning_rate=0), dict(batch_size=0),
                                 dict(phase="nope"), dict(variant="nope"), dict(lr_schedule="step"),
                                 dict(phase="stage1", class_index=5)])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**{"phase": "umsn", **bad})


def test_unknown_key():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"phase": "umsn", "lr": 1})


def test_batches_and_schedule():
    a = batch_indices(3, 10, 8, 4)
    assert np.array_equal(a, batch_indices(3, 10, 8, 4))
    assert not np.array_equal(a, batch_indices(3, 11, 8, 4))
    c = TrainConfig(phase="umsn", learning_rate=1e-3, iterations=100, lr_schedule="cosine")
    assert learning_rate_at(c, 1) == pytest.approx(1e-3)
    assert learning_rate_at(c, 100) < 1e-5
    assert learning_rate_at(TrainConfig(phase="umsn", learning_rate=1e-3), 50) == 1e-3


@pytest.mark.parametrize("phase", ["snet", "stage1", "umsn"])
def test_phase_runs_and_logs(phase, samples, tmp_path):
    res = train(cfg(phase, tmp_path / "run"), samples)
    log = read_log(tmp_path / "run" / "log.jsonl")
    assert [r["iter"] for r in log] == [1, 2, 3, 4]
    for rec in log:
        jsonschema.validate(rec, LOG_SCHEMA)
    assert (tmp_path / "run" / "iter_0000002" / "model.pt").exists()
    meta = read_meta(tmp_path / "run" / "final")
    assert meta.phase == phase and meta.iteration == 4 and meta.width_multiplier == 0.125
    if phase == "umsn":
        assert all(0 < c <= 1 for rec in log for c in rec["C"])
    model, _ = load_model(tmp_path / "run" / "final")
    for a, b in zip(model.state_dict().values(), res.model.state_dict().values()):
        assert torch.equal(a, b)


@pytest.mark.parametrize("phase", ["snet", "stage1", "umsn"])
def test_same_seed_same_log(phase, samples):
    a = train(cfg(phase), samples).history
    b = train(cfg(phase), samples).history
    assert _strip(a) == _strip(b)
    c = train(cfg(phase, master_seed=1), samples).history
    assert _strip(a) != _strip(c)


def _strip(history):
    return [{k: v for k, v in r.items() if k != "wallclock"} for r in history]


def _same_weights(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_resume_n_plus_m(samples, tmp_path):
    full = train(cfg("umsn", tmp_path / "full"), samples)
    train(cfg("umsn", tmp_path / "part", iterations=2), samples)
    resumed = train(cfg("umsn", tmp_path / "res", resume=str(tmp_path / "part" / "final")), samples)
    assert _strip(resumed.history) == _strip(full.history)
    assert _strip(read_log(tmp_path / "res" / "log.jsonl")) == _strip(full.history)
    assert _same_weights(resumed.model, full.model)


def test_resume_mid_run_cosine(samples, tmp_path):
    full = train(cfg("umsn", tmp_path / "full", lr_schedule="cosine"), samples)
    resumed = train(cfg("umsn", tmp_path / "res", lr_schedule="cosine",
                        resume=str(tmp_path / "full" / "iter_0000002")), samples)
    assert _strip(resumed.history) == _strip(full.history)
    assert _same_weights(resumed.model, full.model)


def test_resume_errors(samples, tmp_path):
    train(cfg("stage1", tmp_path / "s1"), samples)
    with pytest.raises(ValueError, match="width"):
        train(cfg("stage1", width_multiplier=0.25, resume=str(tmp_path / "s1" / "final"), iterations=8), samples)
    with pytest.raises(ValueError, match="nothing left"):
        train(cfg("stage1", resume=str(tmp_path / "s1" / "final")), samples)
    with pytest.raises(ValueError, match="resume"):
        train(cfg("umsn", resume=str(tmp_path / "s1" / "final"), iterations=8), samples)


def test_stage1_checkpoints_feed_umsn(samples, tmp_path):
    paths = []
    for k in range(1, 5):
        train(cfg("stage1", tmp_path / f"c{k}", class_index=k, iterations=1), samples)
        paths.append(str(tmp_path / f"c{k}" / "final"))
    res = train(cfg("umsn", iterations=1, stage1=paths), samples)
    assert res.history[0]["iter"] == 1
    with pytest.raises(ValueError, match="class"):
        train(cfg("umsn", iterations=1, stage1=paths[::-1]), samples)


def test_umsn_without_stage1_warns(samples, caplog):
    with caplog.at_level("WARNING"):
        train(cfg("umsn", iterations=1), samples)
    assert "stage-1" in caplog.text


def test_snet_masks_and_finetune(samples, tmp_path):
    train(cfg("snet", tmp_path / "snet"), samples)
    ck = str(tmp_path / "snet" / "final")
    ft = train(cfg("snet_finetune", tmp_path / "ft", resume=ck), samples)
    assert read_meta(tmp_path / "ft" / "final").phase == "snet_finetune"
    assert len(ft.history) == 4
    res = train(cfg("umsn", iterations=1, mask_source="snet", snet_checkpoint=ck), samples)
    assert res.history
    with pytest.raises(ValueError, match="snet_checkpoint"):
        train(cfg("umsn", iterations=1, mask_source="snet"), samples)


def test_dropped_heads_reload(samples, tmp_path):
    train(cfg("umsn", tmp_path / "r", iterations=1, keep_stage1_heads=False), samples)
    model, _ = load_model(tmp_path / "r" / "final")
    assert model.heads is None


def test_from_manifest(tmp_path):
    build_dataset(toy_config(num_samples=2, toy_count=2, toy_size=64, patch_size=32), tmp_path / "d")
    res = train(cfg("stage1", iterations=1, dataset=str(tmp_path / "d" / "manifest.json")))
    assert res.history
    with pytest.raises(ValueError, match="dataset"):
        train(cfg("stage1", iterations=1))


def test_config_digest_ignores_location():
    assert cfg("umsn", out="/a").digest() == cfg("umsn", out="/b").digest()
    assert cfg("umsn").digest() != cfg("umsn", master_seed=3).digest()
    json.dumps(cfg("umsn").to_dict())
