import pytest
import torch

from umsn.network import (
    FNet,
    UMSN,
    VARIANTS,
    CheckpointMeta,
    ConfidenceNet,
    Stage1Net,
    Variant,
    load_model,
    read_meta,
    save_checkpoint,
    zero_residuals,
)
from umsn.semantics import SNet, index_to_masks


def random_pair(n=2, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    y = torch.rand(n, 3, size, size, generator=g)
    idx = torch.randint(0, 4, (n, size, size), generator=g)
    masks = torch.stack([torch.from_numpy(index_to_masks(i.numpy())) for i in idx])
    return y, masks


def test_fnet_shapes():
    f = FNet(1.0)
    y, m = random_pair(1, 128)
    assert f(y, m[:, :1]).shape == (1, 8, 64, 64)
    assert torch.equal(f(y, m[:, :1]), f(y, m[:, :1]))
    z = f(y, torch.zeros_like(m[:, :1]))
    assert torch.equal(z, f(torch.rand_like(y), torch.zeros_like(m[:, :1])))


@pytest.mark.parametrize("size", [16, 64, 128])
def test_umsn_shape(size):
    model = UMSN(0.25)
    y, m = random_pair(1, size)
    assert model(y, m).shape == y.shape


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_zero_residual_identity(name):
    model = zero_residuals(UMSN(0.25, VARIANTS[name]))
    y, m = random_pair()
    assert torch.equal(model(y, m), y)


def test_stage1_zero_head_identity():
    net = zero_residuals(Stage1Net(0.25))
    y, m = random_pair(size=64)
    assert torch.equal(net(y, m[:, 2:3]), y)
    assert net(y, m[:, 2:3]).shape == y.shape


def test_zero_residuals_rejects():
    with pytest.raises(TypeError):
        zero_residuals(SNet(0.25))


def test_stream_permutation_changes_output():
    torch.manual_seed(5)
    model = UMSN(0.25)
    # make the streams matter at init strength
    with torch.no_grad():
        model.bnet.out.conv.weight.mul_(100)
    y, m = random_pair(1, 32)
    perm = m[:, [1, 0, 3, 2]]
    assert not torch.allclose(model(y, m), model(y, perm))


def test_gradient_flow():
    model = UMSN(0.25)
    y, m = random_pair(1, 16)
    y.requires_grad_(True)
    model(y, m).abs().sum().backward()
    assert y.grad.abs().sum() > 0
    for p in model.joint_parameters():
        assert p.grad is not None


def test_joint_parameters_exclude_heads():
    model = UMSN(0.25)
    joint = {id(p) for p in model.joint_parameters()}
    assert not any(id(p) in joint for p in model.heads.parameters())
    assert all(id(p) in joint for p in model.fnets.parameters())


def test_input_validation():
    model = UMSN(0.25)
    y, m = random_pair(1, 16)
    with pytest.raises(ValueError):
        model(y[..., :15], m[..., :15])
    with pytest.raises(ValueError):
        model(y, m[..., :8])
    with pytest.raises(ValueError):
        model(y, m[:, :3])
    with pytest.raises(ValueError):
        Variant.named("nope")


def test_deblur_clamps():
    model = UMSN(0.25)
    y, m = random_pair(1, 16)
    out = model.deblur(y * 3 - 1, m)
    assert out.min() >= 0 and out.max() <= 1


def test_load_stage1():
    nets = [Stage1Net(0.25) for _ in range(4)]
    model = UMSN(0.25)
    model.load_stage1(nets)
    for f, n in zip(model.fnets, nets):
        for a, b in zip(f.parameters(), n.fnet.parameters()):
            assert torch.equal(a, b)
    with pytest.raises(ValueError):
        UMSN(0.25, VARIANTS["bnet"]).load_stage1(nets)


def test_confidence_range():
    torch.manual_seed(0)
    cn = ConfidenceNet(0.25)
    y, m = random_pair(2, 16)
    c = cn.per_class(y, y, m)
    assert c.shape == (2, 4)
    assert torch.all(c > 0) and torch.all(c <= 1)
    assert torch.equal(c, cn.per_class(y, y, m))
    with torch.no_grad():
        cn.score.bias.fill_(-1e4)
    assert torch.all(cn.per_class(y, y * 0, m) >= 1e-6)
    assert torch.isfinite(torch.log(cn.per_class(y, y * 0, m))).all()
    with pytest.raises(ValueError):
        cn(y, y[..., :8])


def test_checkpoint_roundtrip(tmp_path):
    model = UMSN(0.25, VARIANTS["bnet_masks_nrl"]).eval()
    meta = CheckpointMeta("umsn", 3, "abc", 1, 0.25, variant="bnet_masks_nrl")
    save_checkpoint(tmp_path / "ck", meta, {"model": model})
    loaded, m2 = load_model(tmp_path / "ck", expected_phase="umsn")
    assert m2 == meta == read_meta(tmp_path / "ck")
    y, m = random_pair(1, 32)
    assert torch.equal(model(y, m), loaded(y, m))
    with pytest.raises(ValueError, match="width"):
        load_model(tmp_path / "ck", width=0.5)
    with pytest.raises(ValueError, match="phase"):
        load_model(tmp_path / "ck", expected_phase="stage1")
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing")
