import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reid3d import checkpoint
from reid3d.errors import CheckpointError, ConfigError, DigestMismatchError, MissingParameterError, ShapeError
from reid3d.gradcheck import check_model, case_error
from reid3d.losses import LossConfig, total_loss
from reid3d.model import ModelConfig, StageConfig, build
from reid3d.tensor import make_rng

TOY = ModelConfig()


def tracks(rng, B=2, C=3, T=4, H=16, W=16, dtype=np.float32):
    return rng.standard_normal((B, C, T, H, W)).astype(dtype)


def expected_param_count(cfg: ModelConfig) -> int:
    def sep(ci, co, kt, ks):
        return co * ci * kt + co * co * ks * ks

    def nl(c):
        h = c // 2
        return 3 * (h * c + h) + (c * h + c) + 2 * c

    n = sep(cfg.in_channels, cfg.stem_channels, cfg.stem_temporal_kernel, cfg.stem_spatial_kernel)
    n += 2 * cfg.stem_channels
    c = cfg.stem_channels
    for s, st_ in enumerate(cfg.stages):
        for b in range(st_.n_blocks):
            co = st_.channels
            stride = st_.stride if b == 0 else 1
            n += sep(c, co, st_.temporal_kernel, st_.spatial_kernel) + sep(co, co, st_.temporal_kernel,
                                                                           st_.spatial_kernel) + 4 * co
            if c != co or stride != 1:
                n += c * co + 2 * co
            c = co
            if b in cfg.placement(s):
                n += nl(c)
    d, N = cfg.embedding_dim, cfg.n_identities
    return n + c * d + d + 2 * d + d * N + N


def test_param_count_without_nonlocal_hand_computed():
    cfg = ModelConfig(nonlocal_placement=[[], []], embedding_dim=32)
    # stem 3*8*3 + 8*8*49 + 16
    stem = 72 + 3136 + 16
    s0 = (16 * 8 * 3 + 16 * 16 * 9 + 16 * 16 * 3 + 16 * 16 * 9 + 64 + 8 * 16 + 32) + (
        2 * (16 * 16 * 3 + 16 * 16 * 9) + 64)
    s1 = (32 * 16 * 3 + 32 * 32 * 9 + 32 * 32 * 3 + 32 * 32 * 9 + 128 + 16 * 32 + 64) + (
        2 * (32 * 32 * 3 + 32 * 32 * 9) + 128)
    head = 32 * 32 + 32 + 64 + 32 * 8 + 8
    assert build(cfg).parameter_count() == stem + s0 + s1 + head


@pytest.mark.parametrize("cfg", [
    TOY,
    ModelConfig(nonlocal_placement=[[0, 1], [1]], embedding_dim=16, n_identities=5),
    ModelConfig(stages=[StageConfig(3, 8, 1, 3), StageConfig(1, 12, 3, 1, 2)], nonlocal_placement=[[0, 2], []],
                stem_pool=False, stem_stride=1),
])
def test_param_count_closed_form(cfg):
    assert build(cfg).parameter_count() == expected_param_count(cfg)


def test_same_seed_same_parameters():
    a, b = build(TOY, 3).named_parameters(), build(TOY, 3).named_parameters()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build(TOY, 4).named_parameters()
    assert any(not np.array_equal(a[k], c[k]) for k in a if "weight" in k)


def test_init_contract():
    enc = build(TOY, 0)
    params = enc.named_parameters()
    assert not params["classifier.bias"].any()
    for name, layer in enc.nonlocal_layers().items():
        assert not layer.p.wz_bn.gamma.any(), name
    assert len(enc.nonlocal_layers()) == TOY.n_nonlocal == 2


def test_output_shapes():
    enc = build(TOY, 0)
    f, z = enc.forward(tracks(make_rng(0)), make_rng(1))
    assert f.shape == (2, TOY.embedding_dim) and z.shape == (2, TOY.n_identities)


def strip_nonlocal(cfg: ModelConfig) -> ModelConfig:
    d = cfg.to_dict()
    d["nonlocal_placement"] = [[] for _ in d["stages"]]
    return ModelConfig.from_dict(d)


@pytest.mark.parametrize("training", [False, True])
def test_identity_at_init_equals_model_without_nonlocal(training):
    x = tracks(make_rng(5), B=3)
    with_nl, without = build(TOY, 7), build(strip_nonlocal(TOY), 7)
    for enc in (with_nl, without):
        enc.set_training(training)
        enc.drop.rate = 0.0
    a, b = with_nl.forward(x), without.forward(x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_eval_forward_deterministic():
    enc = build(TOY, 0)
    enc.set_training(False)
    x = tracks(make_rng(6))
    a, b = enc.forward(x), enc.forward(x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_forward_errors():
    enc = build(TOY, 0)
    with pytest.raises(ShapeError):
        enc.forward(np.zeros((2, 1, 4, 16, 16), np.float32))
    with pytest.raises(ValueError):
        enc.forward(tracks(make_rng(0)))  # training mode with dropout and no rng
    with pytest.raises(RuntimeError):
        build(TOY, 0).backward(None, np.zeros((2, 8), np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(nonlocal_placement=[[2], []])
    with pytest.raises(ConfigError):
        ModelConfig(embedding_dim=0)
    with pytest.raises(ConfigError):
        ModelConfig(stages=[StageConfig(1, 7)], nonlocal_placement=[[0]])
    with pytest.raises(ConfigError):
        ModelConfig(stages=[StageConfig(1, 8, spatial_kernel=2)], nonlocal_placement=[[]])


def test_zero_loss_gradient_and_accumulation():
    enc = build(ModelConfig(embedding_dim=16, dtype="float64"), 0)
    x = tracks(make_rng(7), B=4, dtype=np.float64)
    enc.zero_grad()
    f, z = enc.forward(x, make_rng(1))
    enc.backward(np.zeros_like(f), np.zeros_like(z))
    assert not any(g.any() for g in enc.named_grads().values())

    rng = make_rng(8)
    gf, gz = rng.standard_normal(f.shape), rng.standard_normal(z.shape)
    enc.zero_grad()
    enc.forward(x, make_rng(1))
    enc.backward(gf, gz)
    once = {k: v.copy() for k, v in enc.named_grads().items()}
    enc.backward(gf, gz)
    for k, v in enc.named_grads().items():
        np.testing.assert_allclose(v, 2 * once[k], rtol=1e-12, atol=0)
    assert any(v.any() for v in once.values())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_end_to_end_gradient_finite_differences(seed):
    assert case_error(check_model(make_rng([seed, 99]))) < 1e-3


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 2), st.sampled_from([2, 4, 6]), st.sampled_from([1, 3]),
                          st.sampled_from([1, 3]), st.integers(1, 2)), min_size=1, max_size=3),
       st.integers(1, 9), st.booleans(), st.integers(2, 3), st.data())
def test_declared_shapes_match_executed(stages, d, pool, T, data):
    stage_cfgs = [StageConfig(*s) for s in stages]
    placement = [data.draw(st.lists(st.integers(0, s.n_blocks - 1), unique=True, max_size=s.n_blocks))
                 for s in stage_cfgs]
    cfg = ModelConfig(in_channels=2, stem_channels=2, stem_spatial_kernel=3, stem_stride=1, stem_pool=pool,
                      stages=stage_cfgs, nonlocal_placement=placement, embedding_dim=d, n_identities=3)
    enc = build(cfg, 0)
    enc.set_training(False)
    f, z = enc.forward(tracks(make_rng(0), B=2, C=2, T=T, H=6, W=6))
    assert f.shape == (2, d) and z.shape == (2, 3)
    assert enc.parameter_count() == expected_param_count(cfg)
    assert len(enc.attention_maps()) == cfg.n_nonlocal


# -- checkpoints ---------------------------------------------------------------

def trained_ish(seed=0):
    enc = build(TOY, seed)
    x = tracks(make_rng(seed), B=4)
    f, z = enc.forward(x, make_rng(1))  # moves BN running stats off their defaults
    enc.set_training(False)
    return enc, x


def test_checkpoint_round_trip_bit_exact(tmp_path):
    enc, x = trained_ish()
    path = tmp_path / "m.rckp"
    checkpoint.save_checkpoint(enc, path)
    back = checkpoint.load_checkpoint(path, TOY)
    assert not back.training
    for name, arr in {**enc.named_parameters(), **enc.named_buffers()}.items():
        got = {**back.named_parameters(), **back.named_buffers()}[name]
        assert got.tobytes() == arr.tobytes(), name
    a, b = enc.forward(x), back.forward(x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_checkpoint_wrong_config(tmp_path):
    enc, _ = trained_ish()
    checkpoint.save_checkpoint(enc, tmp_path / "m.rckp")
    with pytest.raises(DigestMismatchError):
        checkpoint.load_checkpoint(tmp_path / "m.rckp", ModelConfig(embedding_dim=64))


def test_checkpoint_truncated_is_format_error(tmp_path):
    enc, _ = trained_ish()
    path = tmp_path / "m.rckp"
    checkpoint.save_checkpoint(enc, path)
    raw = path.read_bytes()
    for cut in (3, 20, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            checkpoint.load_checkpoint(path)


def test_checkpoint_missing_parameter(tmp_path):
    enc, _ = trained_ish()
    path = tmp_path / "m.rckp"
    checkpoint.save_checkpoint(enc, path)
    manifest, tensors = checkpoint.read_checkpoint(path)
    assert manifest["digest"] == TOY.digest()
    # drop one record from the manifest and rewrite
    raw = path.read_bytes()
    head = struct.Struct("<4sHI")
    _, _, mlen = head.unpack_from(raw)
    manifest["tensors"] = [e for e in manifest["tensors"] if e["name"] != "classifier.bias"]
    new = json.dumps(manifest, sort_keys=True).encode()
    path.write_bytes(head.pack(b"RCKP", 1, len(new)) + new + raw[head.size + mlen:])
    with pytest.raises(MissingParameterError):
        checkpoint.load_checkpoint(path)


def test_checkpoint_stores_optimizer_state(tmp_path):
    from reid3d.training import OptimizerState, adam_step

    enc, _ = trained_ish()
    opt = OptimizerState()
    adam_step(enc.named_parameters(), {k: np.ones_like(v) for k, v in enc.named_parameters().items()}, opt)
    checkpoint.save_checkpoint(enc, tmp_path / "m.rckp", opt)
    manifest, tensors = checkpoint.read_checkpoint(tmp_path / "m.rckp")
    assert manifest["optimizer_step"] == 1
    for k, v in opt.m.items():
        assert tensors[f"opt.m.{k}"].tobytes() == v.tobytes()


def test_total_loss_through_model_runs():
    enc = build(TOY, 0)
    f, z = enc.forward(tracks(make_rng(0), B=4), make_rng(1))
    parts, gf, gz = total_loss(f, z, [0, 0, 1, 1], LossConfig(n_classes=8))
    assert np.isfinite(parts.total) and gf.shape == f.shape and gz.shape == z.shape
