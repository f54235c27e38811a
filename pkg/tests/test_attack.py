import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from champfl import nn
from champfl.attack import AdaptiveState, AttackConfig, ProxMetric, compute_alpha, malicious_round, prox_value_and_grad
from champfl.data import BackdoorSpec, gen_synthetic, poison_dataset
from champfl.errors import ConfigError, InputError, NumericError

unit = st.floats(0, 1, allow_nan=False)


def alpha_of(history, k=3):
    return compute_alpha(AdaptiveState(window=k, history=list(history)))


def test_alpha_endpoints():
    assert alpha_of([]) == 1.0
    assert alpha_of([1, 1, 1]) == 0.0
    assert alpha_of([0, 0, 0]) == 1.0
    assert alpha_of([0.2, 0.4]) == pytest.approx(0.7)  # warm-up averages what exists
    assert alpha_of([1, 1, 0.5, 0.5, 0.5], k=3) == pytest.approx(0.5)


@settings(max_examples=200)
@given(st.lists(unit, min_size=1, max_size=8), st.integers(1, 6), st.data())
def test_alpha_antitone_in_each_signal(history, k, data):
    i = data.draw(st.integers(0, len(history) - 1))
    bump = data.draw(unit)
    assume(bump >= history[i])
    raised = list(history)
    raised[i] = bump
    assert alpha_of(raised, k) <= alpha_of(history, k) + 1e-12


@settings(max_examples=200)
@given(st.lists(unit, max_size=10), st.integers(1, 6))
def test_alpha_in_unit_interval_and_uses_window(history, k):
    a = alpha_of(history, k)
    assert 0.0 <= a <= 1.0
    if history:
        recent = history[-k:]
        assert a == pytest.approx(1 - sum(recent) / len(recent), abs=1e-12)


def test_alpha_state_validation():
    with pytest.raises(InputError):
        AdaptiveState(history=[1.5])
    with pytest.raises(ConfigError):
        AdaptiveState(window=0)
    s = AdaptiveState()
    with pytest.raises(InputError):
        s.push(-0.1)


def test_prox_closed_forms():
    p, r = np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 0.0])
    v, g = prox_value_and_grad(ProxMetric("euclidean"), p, r)
    assert v == pytest.approx(13 / 3)
    np.testing.assert_allclose(g, 2 * (p - r) / 3)
    v, _ = prox_value_and_grad(ProxMetric("euclidean"), r, r)
    assert v == 0
    v, _ = prox_value_and_grad(ProxMetric("huber", delta=1.0), p, r)
    assert v == pytest.approx((1.5 + 2.5) / 3)
    assert prox_value_and_grad(ProxMetric("cosine"), r, r)[0] == pytest.approx(0, abs=1e-15)
    with pytest.raises(NumericError):
        prox_value_and_grad(ProxMetric("cosine"), np.zeros(3), r)
    with pytest.raises(InputError):
        prox_value_and_grad(ProxMetric(), p, r[:2])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_cosine_prox_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    p, r = rng.normal(size=6), rng.normal(size=6)
    m = ProxMetric("cosine")
    assert prox_value_and_grad(m, c * p, r)[0] == pytest.approx(prox_value_and_grad(m, p, r)[0], abs=1e-12)


@pytest.mark.parametrize("kind", ["euclidean", "cosine", "huber"])
def test_prox_gradient_finite_difference(kind):
    rng = np.random.default_rng(1)
    p, r = rng.normal(size=12), rng.normal(size=12)
    metric = ProxMetric(kind, delta=0.5)
    errs = oracles.finite_difference_errors(lambda q: prox_value_and_grad(metric, q, r), p, range(12), h=1e-6)
    assert errs.max() < 1e-6


def test_weight_is_relative_to_k():
    r = np.zeros(40)
    p = np.full(40, 0.5)
    v, _ = ProxMetric(weight=0.5).value_and_grad(p, r)
    assert v == pytest.approx(0.5 * np.sum(p**2))


def test_metric_parse():
    assert ProxMetric.parse("l2").kind == "euclidean"
    assert ProxMetric.parse("cos").kind == "cosine"
    h = ProxMetric.parse("huber:0.25", weight=2.0)
    assert (h.kind, h.delta, h.weight) == ("huber", 0.25, 2.0)
    for bad in ("manhattan", "l2:3", "huber:-1"):
        with pytest.raises(ConfigError):
            ProxMetric.parse(bad)


def test_attack_config_validation():
    AttackConfig(kind="none").validate(1)
    with pytest.raises(ConfigError):
        AttackConfig(kind="vanilla", malicious_ids=(5,)).validate(3)
    with pytest.raises(ConfigError):
        AttackConfig(kind="sneaky")
    assert AttackConfig(kind="none").active_ids == ()


def test_malicious_round_camouflage_pulls_towards_global():
    ds = gen_synthetic(0, 4, 60, shape=(1, 6, 6))
    pois = poison_dataset(ds, BackdoorSpec(0, 1, size=2), 1.0, 0)
    spec = nn.ModelSpec("mlp", (1, 6, 6), classes=4, hidden=(8,))
    g = nn.init_model(spec, 0)
    free = malicious_round(g, pois, 0.0, ProxMetric(), 3, 0.1, 16, seed=1)
    tied = malicious_round(g, pois, 1.0, ProxMetric(weight=2.0), 3, 0.1, 16, seed=1)
    assert np.linalg.norm(tied.params - g.params) < np.linalg.norm(free.params - g.params)
    plain = nn.train_local(g, pois, 3, 0.1, 16, seed=1)
    np.testing.assert_array_equal(free.params, plain.params)
    with pytest.raises(InputError):
        malicious_round(g, pois, -0.1, ProxMetric(), 1, 0.1, 16, seed=1)


def _small_task():
    ds = gen_synthetic(0, 4, 60, shape=(1, 6, 6))
    pois = poison_dataset(ds, BackdoorSpec(0, 1, size=2), 1.0, 0)
    spec = nn.ModelSpec("mlp", (1, 6, 6), classes=4, hidden=(8,))
    return pois, nn.init_model(spec, 0)


def test_huge_alpha_stays_at_global():
    pois, g = _small_task()
    out = malicious_round(g, pois, 1e6, ProxMetric("euclidean"), 2, 0.1, 16, seed=1)
    assert np.max(np.abs(out.params - g.params)) < 1e-3


def test_distance_non_increasing_in_alpha():
    pois, g = _small_task()
    dists = [
        np.linalg.norm(malicious_round(g, pois, a, ProxMetric(), 2, 0.1, 16, seed=1).params - g.params)
        for a in (0.0, 0.25, 0.5, 0.75, 1.0)
    ]
    assert all(b <= a + 1e-12 for a, b in zip(dists, dists[1:]))
