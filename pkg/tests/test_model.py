"""Model assembly, initialization, forward invariances, checkpoints."""

import numpy as np
import pytest

from adhoc_fusion import (CheckpointError, ConfigError, ContractError,
                          FusionModel, ModelConfig, Tensor,
                          expected_parameter_shapes, forward,
                          forward_with_attention, init_model, load_model,
                          save_model)

SMALL = dict(d_in=10, width=8, heads=2, layers=2, ffn_hidden=12)


def small_model(seed=0, **overrides):
    cfg = ModelConfig(**{**SMALL, **overrides})
    return init_model(cfg, seed)


def zero_all_parameters(model):
    for name, p in model.named_parameters().items():
        if name not in ("loss_scale", "loss_bias"):
            p.assign(np.zeros_like(p.data))


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(width=10, heads=3)  # not divisible
    with pytest.raises(ConfigError):
        ModelConfig(layers=0)
    with pytest.raises(ConfigError):
        ModelConfig(mode="argmax")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"widht": 8})


def test_config_round_trips_through_dict():
    cfg = ModelConfig(**SMALL, mode="sparsemax", fusion_uses_prev=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# forward


def test_truncating_adapter_passes_single_channel_through(rng):
    model = small_model()
    zero_all_parameters(model)
    e, d_in = model.config.width, model.config.d_in
    adapter = np.zeros((d_in, e))
    adapter[:e, :e] = np.eye(e)  # keep the first E coordinates
    model.adapter.assign(adapter)
    x = rng.standard_normal((1, d_in))
    out = forward(model, x)
    np.testing.assert_allclose(out.data, x[:, :e], atol=1e-12)


@pytest.mark.parametrize("mode", ["softmax", "sparsemax"])
def test_forward_permutation_invariance(rng, mode):
    model = small_model(mode=mode)
    x = rng.standard_normal((7, model.config.d_in))
    base = forward(model, x).data
    for _ in range(5):
        perm = rng.permutation(7)
        np.testing.assert_allclose(forward(model, x[perm]).data, base, atol=1e-9)


def test_forward_accepts_any_channel_count(rng):
    model = small_model()
    for c in [1, 2, 3, 5, 20, 30, 64]:
        out = forward(model, rng.standard_normal((c, model.config.d_in)))
        assert out.shape == (1, model.config.width)
        assert np.isfinite(out.data).all()


def test_forward_shape_contracts(rng):
    model = small_model()
    with pytest.raises(ContractError):
        forward(model, rng.standard_normal((3, model.config.d_in + 1)))
    with pytest.raises(ContractError):
        forward(model, np.zeros((0, model.config.d_in)))


def test_forward_with_attention_reports_every_block(rng):
    model = small_model()
    c = 4
    x = rng.standard_normal((c, 10))
    fused, trace = forward_with_attention(model, x)
    assert len(trace) == model.config.layers + 1  # layers plus the fusion block
    for block in trace:
        assert len(block) == model.config.heads
        for attn in block:
            assert attn.shape == (c, c)
            np.testing.assert_allclose(attn.sum(axis=1), np.ones(c), atol=1e-9)
    np.testing.assert_array_equal(fused.data, forward(model, x).data)


def test_fusion_uses_prev_flag_changes_output(rng):
    x = rng.standard_normal((5, 10))
    with_prev = small_model(seed=4)
    without = small_model(seed=4, fusion_uses_prev=False)
    a = forward(with_prev, x).data
    b = forward(without, x).data
    assert not np.allclose(a, b)


# ---------------------------------------------------------------------------
# init


def test_init_is_deterministic():
    a = small_model(seed=9)
    b = small_model(seed=9)
    for (na, pa), (nb, pb) in zip(a.named_parameters().items(),
                                  b.named_parameters().items()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_different_seeds_differ():
    a = small_model(seed=1)
    b = small_model(seed=2)
    assert any(not np.array_equal(pa.data, pb.data)
               for pa, pb in zip(a.named_parameters().values(),
                                 b.named_parameters().values()))


def test_parameter_count_matches_shape_arithmetic():
    cfg = ModelConfig()  # defaults: d_in=512, E=256, h=4, L=4, F=512
    model = init_model(cfg, seed=0)
    e, f, l, d_in = cfg.width, cfg.ffn_hidden, cfg.layers, cfg.d_in
    per_block = 3 * e * e + e * e + e * f + f + f * e + e
    expected = d_in * e + (l + 1) * per_block + 2
    assert model.parameter_count() == expected
    shapes = expected_parameter_shapes(cfg)
    assert sum(r * c for r, c in shapes.values()) == expected


def test_init_weight_bounds():
    model = small_model(seed=3)
    cfg = model.config
    bound = np.sqrt(6.0 / (cfg.d_in + cfg.width))
    assert np.abs(model.adapter.data).max() <= bound
    assert model.loss_scale.item() == 10.0
    assert model.loss_bias.item() == -5.0
    assert not model.layers[0].ffn_b1.data.any()


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    model = small_model(seed=5, mode="sparsemax")
    path = tmp_path / "model.ckpt"
    save_model(model, path)
    loaded = load_model(path)
    for (na, pa), (nb, pb) in zip(model.named_parameters().items(),
                                  loaded.named_parameters().items()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()
    assert loaded.config == model.config

    # saving the loaded model reproduces the file byte for byte
    path2 = tmp_path / "model2.ckpt"
    save_model(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()

    x = rng.standard_normal((4, model.config.d_in))
    np.testing.assert_array_equal(forward(model, x).data, forward(loaded, x).data)


def test_checkpoint_is_self_describing(tmp_path):
    model = small_model(seed=6, heads=2)
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    loaded = load_model(path)  # no external config needed
    assert loaded.config.heads == 2
    assert loaded.epochs_trained == model.epochs_trained


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_model(path)


def test_checkpoint_version_mismatch(tmp_path):
    model = small_model()
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_model(path)


def test_checkpoint_truncated(tmp_path):
    model = small_model()
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 17])
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(path)


def test_checkpoint_manifest_shape_disagreement(tmp_path):
    import json
    import struct

    model = small_model()
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    blob = path.read_bytes()
    header_len = struct.unpack("<I", blob[8:12])[0]
    header = json.loads(blob[12:12 + header_len])
    header["tensors"][0]["rows"] += 1
    new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(blob[:8] + struct.pack("<I", len(new_header)) + new_header +
                     blob[12 + header_len:])
    with pytest.raises(CheckpointError, match="shape|manifest"):
        load_model(path)


def test_checkpoint_trailing_bytes(tmp_path):
    model = small_model()
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(CheckpointError, match="trailing"):
        load_model(path)


def test_model_rejects_nonpositive_loss_scale():
    model = small_model()
    with pytest.raises(ContractError):
        FusionModel(model.config, model.adapter, model.layers, model.fusion,
                    Tensor([[0.0]]), model.loss_bias)
