import numpy as np
import pytest

from bamnet import models as M
from bamnet import tensor as T
from bamnet.bam import BamConfig
from bamnet.errors import DataFormatError, ShapeError
from bamnet.tensor import Tensor

from _oracles import batch_norm_oracle, conv2d_oracle

F64 = np.float64


def test_spec_library_contents():
    lib = M.spec_library()
    assert set(lib) == {"tiny", "small", "resnet50_cifar", "resnet50_imagenet"}
    r50 = lib["resnet50_cifar"]
    assert [s.channels for s in r50.stages] == [256, 512, 1024, 2048]
    assert [s.blocks for s in r50.stages] == [3, 4, 6, 3]
    assert r50.num_classes == 100
    assert lib["resnet50_imagenet"].num_classes == 1000
    with pytest.raises(ValueError):
        M.get_spec("resnet18")
    with pytest.raises(ValueError):
        M.build(M.get_spec("tiny", attention="everywhere"))


def test_tiny_forward_shape():
    model = M.build(M.get_spec("tiny"), seed=0)
    x = T.random_normal((2, 3, 32, 32), T.make_rng(0))
    assert model.forward(x, "train").shape == (2, 10)


def test_forward_shape_contract_all_specs():
    for name, spec in M.spec_library().items():
        spec = M.get_spec(name, attention="bottleneck")
        model = M.build(spec, init="zero")
        hw = spec.input_hw
        x = T.zeros((1, 3, hw, hw))
        assert model.forward(x, "eval").shape == (1, spec.num_classes), name


def test_attention_placement_at_stage_junctions():
    model = M.build(M.get_spec("resnet50_cifar", attention="bottleneck"), init="zero")
    blocks = model.attention_blocks()
    assert [name for name, _ in blocks] == ["bam1", "bam2", "bam3"]
    assert [b.p.channels for _, b in blocks] == [256, 512, 1024]  # never the last stage
    assert M.build(M.get_spec("tiny"), init="zero").attention_blocks() == []


def test_per_block_and_convblock_structure():
    per = M.build(M.get_spec("tiny", attention="per_block", bam=BamConfig(reduction=4)),
                  init="zero")
    names = [n for n, _ in per.attention_blocks()]
    assert names == ["stage1.block0.bam", "stage2.block0.bam", "stage3.block0.bam"]
    conv = M.get_spec("tiny", attention="convblock")
    extra = M.build(conv, init="zero")
    assert any(k.startswith("extra1.") for k in extra.params)
    assert extra.param_count() > M.build(M.get_spec("tiny"), init="zero").param_count()


def test_attention_only_adds_bam_named_params():
    base = M.build(M.get_spec("resnet50_cifar"), init="zero")
    bam = M.build(M.get_spec("resnet50_cifar", attention="bottleneck"), init="zero")
    added = set(bam.params) - set(base.params)
    assert added and all(k.startswith("bam") for k in added)
    assert set(base.params) - set(bam.params) == set()
    assert not any(k.startswith("bam") for k in base.params)


def test_param_names_stable_across_builds():
    a = M.build(M.get_spec("small", attention="bottleneck"), seed=0)
    b = M.build(M.get_spec("small", attention="bottleneck"), seed=1)
    assert list(a.params) == list(b.params)
    assert list(a.buffers) == list(b.buffers)


def test_build_determinism():
    a = M.build(M.get_spec("small"), seed=3)
    b = M.build(M.get_spec("small"), seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].value.data, b.params[k].value.data)


def test_divisibility_enforced_at_build():
    with pytest.raises(ShapeError):
        M.build(M.get_spec("tiny", attention="bottleneck", bam=BamConfig(reduction=32)))


def test_eval_forward_deterministic_and_zero_init_uniform():
    model = M.build(M.get_spec("tiny", attention="bottleneck", bam=BamConfig(reduction=4)),
                    seed=1)
    x = T.random_normal((2, 3, 32, 32), T.make_rng(2))
    a = model.forward(x, "eval").value.data
    b = model.forward(x, "eval").value.data
    np.testing.assert_array_equal(a, b)
    assert np.isfinite(a).all()
    zero = M.build(M.get_spec("tiny"), init="zero")
    logits = zero.forward(x, "eval").value.data
    assert (logits == logits[:, :1]).all()  # no class preferred


def _oracle_basic_block(x, block, c_in_match, stride):
    def conv(arr, p):
        return conv2d_oracle(arr, p.weight.value.data, None, p.stride, p.padding,
                             p.dilation)

    def bn(arr, p):
        return batch_norm_oracle(arr, p.gamma.value.data, p.beta.value.data, p.eps)

    h = np.maximum(bn(conv(x, block._children["conv1"].p), block._children["bn1"].p), 0)
    h = bn(conv(h, block._children["conv2"].p), block._children["bn2"].p)
    if not c_in_match or stride != 1:
        s = conv(x, block._children["shortcut_conv"].p)
        s = bn(s, block._children["shortcut_bn"].p)
    else:
        s = x
    return np.maximum(h + s, 0)


def test_tiny_logits_match_composed_scalar_oracle():
    """End-to-end forward against a scalar recomposition of every layer."""
    spec = M.get_spec("tiny")
    model = M.build(spec, seed=4, dtype=F64)
    rng = T.make_rng(5)
    x = T.random_normal((2, 3, 8, 8), rng, dtype=F64)  # small spatial size, same graph
    got = model.forward(x, "train").value.data

    root = model.root
    stem = root._children["stem"]
    h = conv2d_oracle(x.data, stem._children["conv"].p.weight.value.data, None, 1, 1, 1)
    h = batch_norm_oracle(h, stem._children["bn"].p.gamma.value.data,
                          stem._children["bn"].p.beta.value.data,
                          stem._children["bn"].p.eps)
    h = np.maximum(h, 0)
    widths = [16, 32, 64]
    c_in = 16
    for i, stage in enumerate([root._children[f"stage{k}"] for k in (1, 2, 3)]):
        block = stage._children["block0"]
        stride = 1 if i == 0 else 2
        h = _oracle_basic_block(h, block, c_in == widths[i], stride)
        c_in = widths[i]
    pooled = h.mean(axis=(2, 3))
    fc = root._children["fc"].p
    want = pooled @ fc.weight.value.data.T + fc.bias.value.data
    np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = M.build(M.get_spec("small", attention="bottleneck"), seed=6)
    path = tmp_path / "model.ckpt"
    M.checkpoint_save(model, path)
    twin = M.build(M.get_spec("small", attention="bottleneck"), seed=7)
    extras = M.checkpoint_load(twin, path)
    assert extras == {}
    for k in model.params:
        np.testing.assert_array_equal(model.params[k].value.data,
                                      twin.params[k].value.data)
    for k in model.buffers:
        np.testing.assert_array_equal(model.buffers[k].value.data,
                                      twin.buffers[k].value.data)
    M.checkpoint_save(twin, tmp_path / "again.ckpt")
    assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_extras_roundtrip(tmp_path):
    model = M.build(M.get_spec("tiny"), seed=0)
    path = tmp_path / "with_extras.ckpt"
    vel = np.arange(6, dtype=np.float32).reshape(2, 3)
    M.checkpoint_save(model, path, extras={"velocity.fc.weight": vel})
    out = M.checkpoint_load(M.build(M.get_spec("tiny"), seed=1), path)
    np.testing.assert_array_equal(out["velocity.fc.weight"], vel)


def test_checkpoint_magic_and_truncation_errors(tmp_path):
    model = M.build(M.get_spec("tiny"), seed=0)
    path = tmp_path / "model.ckpt"
    M.checkpoint_save(model, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(DataFormatError):
        M.checkpoint_load(model, bad)

    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:len(blob) - 7])
    with pytest.raises(DataFormatError):
        M.checkpoint_load(model, cut)

    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(blob + b"\x00")
    with pytest.raises(DataFormatError):
        M.checkpoint_load(model, padded)


def test_checkpoint_wrong_spec_names_the_parameter(tmp_path):
    small = M.build(M.get_spec("small"), seed=0)
    path = tmp_path / "small.ckpt"
    M.checkpoint_save(small, path)
    tiny = M.build(M.get_spec("tiny"), seed=0)
    with pytest.raises(ShapeError) as info:
        M.checkpoint_load(tiny, path)
    assert "stem.conv.weight" in str(info.value)


def test_checkpoint_missing_entry_detected(tmp_path):
    tiny = M.build(M.get_spec("tiny"), seed=0)
    path = tmp_path / "tiny.ckpt"
    M.checkpoint_save(tiny, path)
    bam = M.build(M.get_spec("tiny", attention="bottleneck", bam=BamConfig(reduction=4)),
                  seed=0)
    with pytest.raises(ShapeError) as info:
        M.checkpoint_load(bam, path)
    assert "missing" in str(info.value)
