import numpy as np
import pytest

from erinet import autodiff as ad
from erinet.autodiff import Tape
from erinet.model import (
    ConfigError,
    ModelConfig,
    count_parameters,
    init_model,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from erinet.train import AdamW, l2_loss


def test_same_seed_bit_identical(toy_config):
    a, b = init_model(toy_config), init_model(toy_config)
    assert list(a.params) == list(b.params)
    for n in a.params:
        assert np.array_equal(a.params[n].data, b.params[n].data)


def test_parameter_count_toy_by_hand(toy_config):
    # visual 6, audio 5, hidden 8, ffn 32, one GRU layer, one block
    gru_v = 3 * (6 * 8 + 8 * 8 + 8)
    gru_a = 3 * (5 * 8 + 8 * 8 + 8)
    block = 4 * 8 * 8 + 2 * 2 * 8 + (8 * 32 + 32) + (32 * 8 + 8)
    enc = 8 + block
    readout = 16 * 7 + 7
    expected = gru_v + gru_a + 2 * enc + readout
    assert expected == 2511
    assert init_model(toy_config).num_parameters() == expected == count_parameters(toy_config)


def test_parameter_count_formula_full_config():
    cfg = ModelConfig()
    assert init_model(cfg).num_parameters() == count_parameters(cfg)


@pytest.mark.parametrize(
    "kwargs",
    [dict(heads=3), dict(hidden=0), dict(visual_dim=-1), dict(visual_dim=0, audio_dim=0), dict(dropout=1.0)],
)
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        init_model(ModelConfig(**kwargs))


def test_full_size_defaults():
    cfg = ModelConfig()
    assert (cfg.visual_dim, cfg.audio_dim, cfg.gru_layers, cfg.hidden) == (546, 1024, 2, 256)
    assert (cfg.encoder_blocks, cfg.heads, cfg.dropout, cfg.output_dim) == (4, 4, 0.2, 7)


def test_forward_outputs_seven_in_open_unit_interval(toy_config, rng):
    model = init_model(toy_config)
    for tv, ta in [(1, 1), (5, 2), (31, 9)]:
        pred, att = model_forward(model, rng.normal(size=(tv, 6)), rng.normal(size=(ta, 5)))
        assert pred.shape == (7,)
        assert ((pred > 0) & (pred < 1)).all()
        assert att["video"].shape == (tv,)


def test_forward_masked_padding_identical(toy_config, rng):
    model = init_model(toy_config)
    v, a = rng.normal(size=(8, 6)), rng.normal(size=(3, 5))
    ref, _ = model_forward(model, v, a)
    vp = np.concatenate([v, rng.normal(size=(8, 6))])
    ap = np.concatenate([a, rng.normal(size=(2, 5))])
    masks = {"video": np.r_[np.ones(8), np.zeros(8)], "audio": np.r_[np.ones(3), np.zeros(2)]}
    out, _ = model_forward(model, vp, ap, masks)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_zero_readout_gives_half(toy_config, rng):
    model = init_model(toy_config)
    model.params["readout.w"].data[...] = 0
    model.params["readout.b"].data[...] = 0
    pred, _ = model_forward(model, rng.normal(size=(4, 6)), rng.normal(size=(2, 5)))
    np.testing.assert_array_equal(pred, np.full(7, 0.5))


def test_empty_stream_is_an_error(toy_config, rng):
    model = init_model(toy_config)
    with pytest.raises(ValueError):
        model_forward(model, np.zeros((0, 6)), rng.normal(size=(2, 5)))


def test_inference_deterministic_train_mode_uses_dropout(rng):
    cfg = ModelConfig(visual_dim=4, audio_dim=0, gru_layers=1, hidden=8, encoder_blocks=1, heads=2, dropout=0.5)
    model = init_model(cfg)
    v = rng.normal(size=(6, 4))
    a, _ = model_forward(model, v, None)
    b, _ = model_forward(model, v, None)
    assert np.array_equal(a, b)
    t = model_forward(model, v, None, mode="train", rng=np.random.default_rng(0)).data[0]
    assert not np.allclose(t, a)


def test_gradient_reaches_every_parameter(toy_config, rng):
    model = init_model(toy_config)
    inputs = {"video": (rng.normal(size=(3, 5, 6)), np.ones((3, 5), bool)), "audio": (rng.normal(size=(3, 2, 5)), np.ones((3, 2), bool))}
    model.params.zero_grads()
    with Tape() as tape:
        out, _ = model.forward_batch(inputs)
        loss = l2_loss(out, rng.random((3, 7)))
    tape.backward(loss)
    dead = [n for n, t in model.params.items() if not np.any(t.grad)]
    assert dead == []


def test_mean_pool_variant(rng):
    cfg = ModelConfig(visual_dim=4, audio_dim=0, gru_layers=1, hidden=8, pooling="mean")
    model = init_model(cfg)
    assert not any("encoder" in n for n in model.params)
    pred, att = model_forward(model, rng.normal(size=(6, 4)), None)
    assert pred.shape == (7,) and att == {}


def test_checkpoint_round_trip(toy_config, tmp_path, rng):
    model = init_model(toy_config)
    model.params.zero_grads()
    for t in model.params.values():
        t.grad = rng.normal(size=t.shape)
    opt = AdamW(model.params)
    opt.step()
    path = tmp_path / "m.eri"
    save_checkpoint(path, model, opt)
    assert path.read_bytes()[:4] == b"ERI1"
    loaded, state = load_checkpoint(path)
    assert loaded.config == model.config
    for n, t in model.params.items():
        np.testing.assert_array_equal(loaded.params[n].data, t.data.astype(np.float32))
    assert state["step"] == 1
    np.testing.assert_array_equal(state["m"]["readout.w"], opt.m["readout.w"].astype(np.float32))


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.eri"
    p.write_bytes(b"NOPE")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)
