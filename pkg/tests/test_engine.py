import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from msgtl.engine import (ActivationCacheError, AdamState, AdversarialHead, LayerParams,
                          NonFiniteGradientError, StageNetwork, TrainConfig, apply_update,
                          backward, balanced_ce, beta_of, domain_class_weights,
                          effective_weights, forward, grl_step, learning_rate)
from msgtl.topology import Topology, width_schedule
from msgtl.transfer import init_network

from helpers import masked_net
from reference import central_diff, max_rel_err, ref_loss, ref_scores


def _layer(W, S, pf):
    W, S = np.asarray(W, float), np.asarray(S, float)
    pf = np.asarray(pf, np.uint8)
    n_out = W.shape[1]
    return LayerParams(W, np.zeros(n_out), S, np.zeros(n_out), pf, np.ones(n_out, np.uint8),
                       np.ones_like(pf), np.ones(n_out, np.uint8), region=W.shape)


def test_effective_weights_examples():
    W, _ = effective_weights(_layer([[2, 2], [2, 2]], [[1, 1], [1, 1]], [[1, 0], [0, 1]]))
    assert W.tolist() == [[2, 1], [1, 2]]
    W, _ = effective_weights(_layer([[2, 3]], [[1, 1]], [[1, 1]]))
    assert W.tolist() == [[2, 3]]
    W, _ = effective_weights(_layer([[2, 3]], [[7, 8]], [[0, 0]]))
    assert W.tolist() == [[7, 8]]


def test_forward_zero_net_gives_half():
    net = init_network(width_schedule(5, 2, 6), np.random.default_rng(0))
    for layer in net.layers:
        layer.W[...] = 0
    s = forward(net, np.random.default_rng(1).standard_normal((4, 5))).scores
    assert np.all(s == 0.5)
    one = StageNetwork(Topology((1, 1, 1), 1, 3), [_layer([[1.0]], [[0.0]], [[1]]),
                                                     _layer([[1.0]], [[0.0]], [[1]])])
    assert forward(one, np.zeros((1, 1))).scores[0] == 0.5


@given(st.integers(0, 10 ** 6))
def test_forward_matches_reference(seed):
    rng = np.random.default_rng(seed)
    net = masked_net(rng, n_prev=3, n=5)
    X = rng.standard_normal((3, 5))
    s = forward(net, X).scores
    assert s.shape == (3,) and np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(s, ref_scores(net, X), rtol=1e-12, atol=0)


def test_forward_dimension_mismatch():
    net = init_network(width_schedule(5, 2, 6), np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 4)))


def test_dropout_train_vs_infer():
    rng = np.random.default_rng(0)
    net = init_network(width_schedule(16, 2, 6), rng)
    X = rng.standard_normal((50, 16))
    a = forward(net, X, 0.5, train=False).scores
    b = forward(net, X, 0.0, train=True).scores
    assert np.array_equal(a, b)
    c = forward(net, X, 0.5, train=True, rng=np.random.default_rng(3))
    assert not np.array_equal(a, c.scores)
    for scale in c.scales[:-1]:
        assert set(np.unique(scale)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        forward(net, X, 0.5, train=True)


def test_beta_examples():
    assert beta_of([1, 0, 0, 0]) == 0.75
    assert beta_of([1, 1, 1, 1]) == 0.0
    assert beta_of([0, 0]) == 1.0
    with pytest.raises(ValueError):
        beta_of([])


def test_balanced_ce_examples():
    assert balanced_ce([0.8], [1], 0.75) == pytest.approx(0.75 * -math.log(0.8), abs=1e-15)
    assert balanced_ce([0.5, 0.5], [1, 0], 0.9) == pytest.approx(0.5 * math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        balanced_ce([0.5], [1, 0], 0.5)


def test_balanced_ce_half_beta_is_half_bce():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = rng.random(8)
        y = rng.integers(0, 2, 8)
        bce = -np.mean(y * np.log(s) + (1 - y) * np.log(1 - s))
        assert abs(balanced_ce(s, y, 0.5) - 0.5 * bce) <= 1e-12


def test_balanced_ce_clamps():
    v = balanced_ce([0.0, 1.0], [1, 0], 0.5)
    assert math.isfinite(v) and v == pytest.approx(-math.log(1e-12) / 2, rel=1e-3)


def _check_gradients(net, X, y, beta):
    cache = forward(net, X)
    g = backward(net, cache, y, beta)
    worst = 0.0
    for l, layer in enumerate(net.layers):
        for name, an in (("W", g.dW[l]), ("b", g.db[l])):
            arr = getattr(layer, name)
            num = central_diff(lambda: ref_loss(net, X, y, beta), arr)
            worst = max(worst, max_rel_err(an, num))
            hidden = (layer.pf_W if name == "W" else layer.pf_b) == 0
            assert np.all(an[hidden] == 0.0)
    return worst


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("beta", [0.1, 0.5, 0.9])
def test_gradients_match_finite_differences(seed, beta):
    rng = np.random.default_rng(seed)
    net = masked_net(rng, rho=float(rng.random()))
    X = rng.standard_normal((6, net.n_inputs))
    y = rng.integers(0, 2, 6).astype(float)
    assert _check_gradients(net, X, y, beta) <= 1e-4


def test_all_hidden_gives_zero_region_gradients():
    rng = np.random.default_rng(2)
    net = masked_net(rng, n_prev=4, n=7, rho=0.0)
    g = backward(net, forward(net, rng.standard_normal((5, 7))), np.array([1, 0, 1, 0, 1.]), 0.4)
    for layer, gw in zip(net.layers, g.dW):
        r, c = layer.region
        assert np.all(gw[:r, :c] == 0.0)


def test_single_unit_closed_form():
    # 1 input -> 1 hidden (identity on positive side) -> sigmoid, one sample
    w1, w2, x, y, beta = 0.7, -1.3, 2.0, 1.0, 0.3
    net = StageNetwork(Topology((1, 1, 1), 1, 3), [_layer([[w1]], [[0.0]], [[1]]),
                                                     _layer([[w2]], [[0.0]], [[1]])])
    g = backward(net, forward(net, np.array([[x]])), np.array([y]), beta)
    s = 1 / (1 + math.exp(-w2 * w1 * x))
    dz = -beta * y * (1 - s)
    assert g.dW[1][0, 0] == pytest.approx(dz * w1 * x, rel=1e-12)
    assert g.dW[0][0, 0] == pytest.approx(dz * w2 * x, rel=1e-12)
    assert g.db[1][0] == pytest.approx(dz, rel=1e-12)


def test_stale_cache_rejected():
    rng = np.random.default_rng(0)
    a, b = masked_net(rng, n_prev=2, n=3), masked_net(rng, n_prev=2, n=3)
    cache = forward(a, np.ones((1, 3)))
    with pytest.raises(ActivationCacheError):
        backward(b, cache, np.array([1.0]), 0.5)


def test_learning_rate_schedule():
    assert learning_rate(1e-3, 0.0, 10, 0.75) == 1e-3
    assert learning_rate(1e-3, 1.0, 10, 0.75) == pytest.approx(1e-3 / 11 ** 0.75)
    assert 1 / 11 ** 0.75 == pytest.approx(0.1655, abs=1e-4)


def _train(net, X, y, cfg, steps):
    state = AdamState.for_network(net, steps)
    beta = beta_of(y)
    for t in range(steps):
        apply_update(net, backward(net, forward(net, X), y, beta), state, t, cfg)
    return net, state


def test_frozen_region_bit_identical():
    rng = np.random.default_rng(5)
    net = masked_net(rng, n_prev=4, n=9, rho=0.0, perturb=False)
    before = [(l.W.copy(), l.b.copy()) for l in net.layers]
    X, y = rng.standard_normal((20, 9)), rng.integers(0, 2, 20).astype(float)
    y[:2] = [0, 1]
    net, state = _train(net, X, y, TrainConfig(), 50)
    for layer, (W, b), m in zip(net.layers, before, state.m_W):
        r, c = layer.region
        assert np.array_equal(layer.W[:r, :c], W[:r, :c])
        assert np.array_equal(layer.b[:c], b[:c])
        assert np.all(m[:r, :c] == 0)
        assert not np.array_equal(layer.W, W) or r == layer.W.shape[0]


def test_all_ones_masks_equal_unmasked_twin():
    rng = np.random.default_rng(6)
    net = masked_net(rng, n_prev=3, n=8, rho=1.0, perturb=False)
    twin = net.copy()
    for layer in twin.layers:
        layer.region = (0, 0)
        layer.W_snap[...] = 0
        layer.b_snap[...] = 0
    X, y = rng.standard_normal((30, 8)), np.tile([0.0, 1.0], 15)
    _train(net, X, y, TrainConfig(), 40)
    _train(twin, X, y, TrainConfig(), 40)
    for a, b in zip(net.layers, twin.layers):
        assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)


def test_non_finite_gradient_aborts():
    rng = np.random.default_rng(0)
    net = masked_net(rng, n_prev=2, n=3)
    g = backward(net, forward(net, np.ones((2, 3))), np.array([0.0, 1.0]), 0.5)
    g.dW[0][0, 0] = np.nan
    with pytest.raises(NonFiniteGradientError, match="layer"):
        apply_update(net, g, AdamState.for_network(net, 1), 0, TrainConfig())


@pytest.mark.parametrize("seed", range(10))
def test_loss_halves_on_tiny_dataset(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((20, 4))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    # 4 -> 4 -> 1: a 2-unit ReLU layer can start with a dead unit on some seeds
    net = init_network(width_schedule(4, 4, 6), np.random.default_rng(100 + seed))
    start = balanced_ce(forward(net, X).scores, y, beta_of(y))
    _train(net, X, y, TrainConfig(eta0=0.05), 200)
    assert balanced_ce(forward(net, X).scores, y, beta_of(y)) <= 0.5 * start


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        net = masked_net(rng, n_prev=3, n=6)
        X, y = rng.standard_normal((16, 6)), np.tile([0.0, 1.0], 8)
        return _train(net, X, y, TrainConfig(), 30)[0]
    a, b = run(), run()
    assert all(np.array_equal(x.W, y.W) for x, y in zip(a.layers, b.layers))


def test_sgd_optimizer_respects_pb():
    rng = np.random.default_rng(3)
    net = masked_net(rng, n_prev=3, n=5, rho=0.5, perturb=False)
    before = [l.W.copy() for l in net.layers]
    X, y = rng.standard_normal((10, 5)), np.tile([0.0, 1.0], 5)
    _train(net, X, y, TrainConfig(optimizer="sgd", eta0=0.1), 10)
    for layer, W in zip(net.layers, before):
        off = layer.pb_W == 0
        assert np.array_equal(layer.W[off], W[off])


# --------------------------------------------------------------------------
# adversarial head
# --------------------------------------------------------------------------

def test_domain_weights():
    assert domain_class_weights([0, 1, 0, 1]) == (1.0, 1.0)
    assert domain_class_weights([0, 0, 0, 1]) == (4 / 6, 2.0)
    with pytest.raises(ValueError):
        domain_class_weights([1, 1])
    with pytest.raises(ValueError):
        AdversarialHead.create(2, 0.1, np.random.default_rng(0), class_weights=(0.0, 1.0))


@pytest.mark.parametrize("seed", range(5))
def test_reversed_gradient_is_minus_lambda_times_plain(seed):
    rng = np.random.default_rng(seed)
    lam = 0.7
    head = AdversarialHead.create(3, lam, rng, class_weights=(0.8, 1.4))
    F = rng.standard_normal((6, 3))
    d = np.array([0, 1, 0, 1, 1, 0.0])
    _, trunk, grads = grl_step(F, d, head)
    plain = central_diff(lambda: head.loss(F, d), F)
    assert max_rel_err(trunk, -lam * plain) <= 1e-4
    for p, g in zip(head.params(), grads):
        assert max_rel_err(g, central_diff(lambda: head.loss(F, d), p)) <= 1e-4


def test_zero_lambda_and_single_domain():
    rng = np.random.default_rng(0)
    head = AdversarialHead.create(2, 0.0, rng)
    F = rng.standard_normal((4, 2))
    _, trunk, _ = grl_step(F, np.array([0, 1, 0, 1.0]), head)
    assert np.all(trunk == 0)
    _, trunk, _ = grl_step(F, np.ones(4), head)
    assert head.skipped == 1 and np.all(trunk == 0)


def test_trainconfig_validation_and_text_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(rho=1.5)
    with pytest.raises(ValueError):
        TrainConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        TrainConfig(omega=2)
    cfg = TrainConfig(rho=0.25, shared_mask=True, optimizer="sgd", seed=2 ** 63)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
