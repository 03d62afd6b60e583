import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crimelink.network import (
    NetConfig,
    Params,
    backward,
    decode,
    encode,
    forward_pair,
    init_params,
    load_params,
    num_params,
    save_params,
    with_geo,
)

from _gradcheck import CONFIGS, analytic_gradient, draw_problem, gradient_errors, numeric_gradient, small_config


def test_shapes_default_config():
    p = init_params(NetConfig(446), seed=0)
    assert [w.shape for w, _ in p.encoder] == [(128, 446), (8, 128)]
    assert [w.shape for w, _ in p.decoder] == [(128, 8), (446, 128)]
    assert p.fusion[0].shape == (128, 2)


def test_init_deterministic_and_zero_biases():
    cfg = NetConfig(20, hidden_dim=7, latent_dim=3, activation="sine")
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert a.equals(b)
    assert a.is_finite()
    for w, bias in a.encoder + a.decoder + [a.fusion]:
        assert not bias.any()


def test_init_bounds():
    relu = init_params(NetConfig(40, hidden_dim=10, latent_dim=4), 1)
    assert np.abs(relu.encoder[0][0]).max() <= np.sqrt(6 / 50)
    sine = init_params(NetConfig(40, hidden_dim=10, latent_dim=4, activation="sine"), 1)
    assert np.abs(sine.encoder[0][0]).max() <= 1 / 40
    assert np.abs(sine.encoder[1][0]).max() <= np.sqrt(6 / 10) / 30


def test_num_params_hand_count():
    assert num_params(NetConfig(4, 3, 2, 2, fusion="decoder_add")) == 57
    assert num_params(NetConfig(4, 3, 2, 2, fusion="none")) == 48
    # two extra input columns on the first encoder layer
    assert num_params(NetConfig(4, 3, 2, 2, fusion="input_concat")) == 54


@pytest.mark.parametrize("cfg", [NetConfig(4, 3, 2, 2), NetConfig(30, 9, 5, 4, skip_connections=True)])
def test_num_params_matches_arrays(cfg):
    for seed in (0, 1):
        assert sum(a.size for a in init_params(cfg, seed).arrays()) == num_params(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(4, latent_dim=5)
    with pytest.raises(ValueError):
        NetConfig(4, latent_dim=2, depth=0)
    with pytest.raises(ValueError):
        NetConfig(4, latent_dim=2, fusion="sum")


def _hand_net():
    cfg = NetConfig(2, hidden_dim=2, latent_dim=1, depth=2, fusion="decoder_add")
    enc = [
        (np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.1, -0.2])),
        (np.array([[1.0, -3.0]]), np.array([0.5])),
    ]
    dec = [
        (np.array([[1.0], [-1.0]]), np.array([0.0, 0.5])),
        (np.array([[2.0, -2.5], [-0.3, 0.0]]), np.zeros(2)),
    ]
    fusion = (np.array([[0.5, 0.25], [-1.0, 1.0]]), np.array([0.25, 0.1]))
    return cfg, Params(enc, dec, fusion)


def test_encode_hand_computation():
    # relu([1.1, 0.3]) -> 1.1 - 0.9 + 0.5
    cfg, p = _hand_net()
    assert encode(p, np.array([1.0, 0.0]), cfg) == pytest.approx([0.7])


def test_decode_hand_computation():
    # layer 1: relu([2, -1.5]) + [1.0, 0.1] = [3.0, 0.1]; layer 2 linear
    cfg, p = _hand_net()
    out = decode(p, np.array([2.0]), cfg, geo=(1.0, 1.0))
    np.testing.assert_allclose(out, [5.75, -0.9])


def test_zero_weights_give_zero_latent():
    cfg = NetConfig(10, 6, 3)
    p = init_params(cfg, 0).map(np.zeros_like)
    assert not encode(p, np.ones(10), cfg).any()


def test_encode_shape_errors():
    cfg = NetConfig(10, 6, 3, fusion="input_concat")
    p = init_params(cfg, 0)
    with pytest.raises(ValueError):
        encode(p, np.ones(10), cfg)
    assert encode(p, np.ones(12), cfg).shape == (3,)


def test_decode_requires_geo_for_decoder_add():
    cfg = NetConfig(10, 6, 3)
    with pytest.raises(ValueError):
        decode(init_params(cfg, 0), np.zeros(3), cfg)


@pytest.mark.parametrize("activation", ["relu", "sine"])
def test_zero_fusion_degeneracy(activation):
    rng = np.random.default_rng(0)
    add = NetConfig(10, 6, 3, activation=activation, fusion="decoder_add")
    none = NetConfig(10, 6, 3, activation=activation, fusion="none")
    p = init_params(add, 5)
    p_none = Params(p.encoder, p.decoder, None)
    lat = rng.normal(size=(4, 3))
    assert np.array_equal(decode(p, lat, add, geo=(0.0, 0.0)), decode(p_none, lat, none))
    # a zero fusion layer ignores any geo value
    p_zero = Params(p.encoder, p.decoder, (np.zeros((6, 2)), np.zeros(6)))
    assert np.array_equal(decode(p_zero, lat, add, geo=(3.0, 7.0)), decode(p_none, lat, none))


@pytest.mark.parametrize("activation,fusion,skip", CONFIGS)
def test_output_lengths(activation, fusion, skip):
    cfg = small_config(activation, fusion, skip)
    tr = forward_pair(init_params(cfg, 0), np.ones((3, 6)), np.zeros((3, 6)), (0.5, 0.5), cfg)
    assert tr.recon.shape == (6, 6)
    assert tr.latent.shape == (6, 3)


def test_branch_symmetry():
    cfg = NetConfig(12, 6, 4, skip_connections=True)
    rng = np.random.default_rng(1)
    p = init_params(cfg, 2)
    x1, x2 = rng.integers(0, 2, (5, 12)), rng.integers(0, 2, (5, 12))
    geo = rng.uniform(0, 3, (5, 2))
    same = forward_pair(p, x1, x1, geo, cfg)
    assert np.array_equal(same.e1, same.e2) and np.array_equal(same.v1_hat, same.v2_hat)
    a, b = forward_pair(p, x1, x2, geo, cfg), forward_pair(p, x2, x1, geo, cfg)
    assert np.array_equal(a.e1, b.e2) and np.array_equal(a.e2, b.e1)
    assert np.array_equal(a.v1_hat, b.v2_hat)


@pytest.mark.parametrize("fusion", ["none", "input_concat", "decoder_add"])
def test_trace_replay(fusion):
    cfg = NetConfig(12, 6, 4, depth=3, fusion=fusion, skip_connections=True)
    rng = np.random.default_rng(2)
    p = init_params(cfg, 2)
    x1, x2 = rng.integers(0, 2, (4, 12)), rng.integers(0, 2, (4, 12))
    geo = rng.uniform(0, 3, (4, 2))
    tr = forward_pair(p, x1, x2, geo, cfg)
    for x, e, v in ((x1, tr.e1, tr.v1_hat), (x2, tr.e2, tr.v2_hat)):
        inp = with_geo(x.astype(float), geo) if fusion == "input_concat" else x
        np.testing.assert_array_equal(encode(p, inp, cfg), e)
        np.testing.assert_array_equal(decode(p, e, cfg, geo if fusion == "decoder_add" else None), v)


def test_sine_hidden_outputs_bounded():
    cfg = NetConfig(12, 6, 4, depth=4, activation="sine")
    rng = np.random.default_rng(3)
    p = init_params(cfg, 0).map(lambda a: a + rng.normal(scale=2.0, size=a.shape))
    tr = forward_pair(p, rng.normal(size=(8, 12)), rng.normal(size=(8, 12)), (1.0, 2.0), cfg)
    for z in tr.encoder.pre[:-1] + tr.decoder.pre[:-1]:
        h = np.sin(cfg.sine_omega0 * z)
        assert np.abs(h).max() <= 1.0
    # the recorded inputs of later layers are exactly those activations
    np.testing.assert_array_equal(tr.encoder.inputs[1], np.sin(30 * tr.encoder.pre[0]))


def test_zero_loss_grads_give_zero_grads():
    cfg = NetConfig(12, 6, 4)
    tr = forward_pair(init_params(cfg, 0), np.ones((2, 12)), np.zeros((2, 12)), (1.0, 1.0), cfg)
    g = backward(tr, cfg, (np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((2, 12)), np.zeros((2, 12))))
    assert not any(a.any() for a in g.arrays())


def test_backward_shape_mismatch():
    cfg = NetConfig(12, 6, 4)
    tr = forward_pair(init_params(cfg, 0), np.ones((2, 12)), np.zeros((2, 12)), (1.0, 1.0), cfg)
    with pytest.raises(ValueError):
        backward(tr, cfg, (np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 12)), np.zeros((2, 12))))


def test_fusion_gradient_at_zero_geo():
    cfg, p = _hand_net()
    tr = forward_pair(p, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), (0.0, 0.0), cfg)
    rng = np.random.default_rng(4)
    d_v1, d_v2 = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    g = backward(tr, cfg, (np.zeros((1, 1)), np.zeros((1, 1)), d_v1, d_v2))
    assert not g.fusion[0].any()
    # no skip on the fused layer, so its upstream gradient is d_recon @ W2
    w2 = p.decoder[1][0]
    np.testing.assert_allclose(g.fusion[1], (d_v1 @ w2 + d_v2 @ w2).ravel())


@pytest.mark.parametrize("fusion", ["none", "input_concat", "decoder_add"])
def test_relu_gradients_entrywise(fusion):
    cfg = NetConfig(12, 6, 4, fusion=fusion)
    for seed in range(2):
        params, *problem = draw_problem(cfg, seed)
        ana = analytic_gradient(params, cfg, problem)
        num = numeric_gradient(params, cfg, problem)
        for a, n in zip(ana, num):
            rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
            assert rel.max() < 1e-4


@pytest.mark.parametrize("fusion", ["none", "input_concat", "decoder_add"])
def test_sine_gradients_entrywise_fine_step(fusion):
    # with omega0 = 30 the eps=1e-4 truncation term dominates small entries, so use a finer step
    cfg = NetConfig(12, 6, 4, fusion=fusion, activation="sine", skip_connections=True, depth=3)
    params, *problem = draw_problem(cfg, 0)
    ana = analytic_gradient(params, cfg, problem)
    num = numeric_gradient(params, cfg, problem, eps=1e-6)
    for a, n in zip(ana, num):
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
        assert rel.max() < 1e-4


@pytest.mark.parametrize("activation,fusion,skip", CONFIGS)
def test_small_net_gradients(activation, fusion, skip):
    cfg = small_config(activation, fusion, skip)
    _, norm, count = gradient_errors(cfg, seed=0)
    assert count <= 200
    assert norm < 1e-4


def test_params_roundtrip(tmp_path):
    for cfg in (NetConfig(12, 6, 4), NetConfig(12, 6, 4, 3, "sine", True, "input_concat", 12.5)):
        p = init_params(cfg, 9).map(lambda a: a + 0.1)
        path = tmp_path / "p.lfnp"
        save_params(p, cfg, path)
        q, cfg2 = load_params(path)
        assert cfg2 == cfg and q.equals(p)
        assert path.read_bytes()[:4] == b"LFNP"
        # 4-byte magic, eight u32 fields, one f64
        assert path.stat().st_size == 44 + 8 * num_params(cfg)


def test_load_rejects_bad_files(tmp_path):
    cfg = NetConfig(12, 6, 4)
    path = tmp_path / "p.lfnp"
    save_params(init_params(cfg, 0), cfg, path)
    data = path.read_bytes()
    for bad in (b"XXXX" + data[4:], data[:-8], data[:10]):
        path.write_bytes(bad)
        with pytest.raises(ValueError):
            load_params(path)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["relu", "sine"]), st.booleans())
def test_weight_sharing_property(seed, activation, skip):
    cfg = NetConfig(8, 8, 3, depth=3, activation=activation, skip_connections=skip)
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed)
    x = rng.integers(0, 2, (3, 8))
    tr = forward_pair(p, x, x, rng.uniform(0, 5, 2), cfg)
    assert np.array_equal(tr.e1, tr.e2)
    assert np.array_equal(encode(p, x, cfg), encode(p, x, cfg))
