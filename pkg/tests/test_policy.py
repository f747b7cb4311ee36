import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdrl import nn
from mdrl.dst import BeliefState
from mdrl.env import get_domain
from mdrl.policy import (SHARED, ActionSpace, MultiDomainPolicy, PolicyConfig, ValueBaselines, entropy,
                         ground_action, kl_divergence, load_policy, log_prob, sample_action, save_policy)
from mdrl.trpo import combine_gradients


def _batch(policy, domain, n, rng):
    obs = rng.normal(size=(n, policy.obs_width))
    probs = policy.action_probs(obs, domain)
    actions = np.array([sample_action(p, rng) for p in probs])
    return obs, actions, rng.normal(size=n), np.log(probs[np.arange(n), actions])


def _kl_grad(policy, states, old):
    """Analytic gradient of the pooled mean KL(old || theta) w.r.t. theta."""
    def g(theta):
        total = np.zeros_like(theta)
        n = sum(len(o) for _, o in states)
        p = policy.params.like(theta)
        for (domain, obs), q in zip(states, old):
            z, h, logits = policy._forward(obs, domain, p)
            total += policy._vjp(p, obs, z, h, domain, (nn.softmax(logits) - q) / n)
        return total
    return g


probs_strategy = arrays(np.float64, st.integers(2, 8), elements=st.floats(0.01, 1.0)).map(lambda a: a / a.sum())


@given(probs_strategy)
def test_distribution_helpers(p):
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
    assert 0 <= entropy(p) <= np.log(len(p)) + 1e-12
    assert log_prob(p, 0) == pytest.approx(np.log(p[0]))
    q = np.roll(p, 1)
    assert kl_divergence(p, q) >= -1e-12


def test_kl_edge_cases():
    with pytest.raises(ValueError):
        kl_divergence(np.ones(3) / 3, np.ones(4) / 4)
    assert kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == float("inf")
    assert kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(np.log(2))
    with pytest.raises(ValueError):
        log_prob(np.array([1.0, 0.0]), 1)


def test_sampling_matches_probabilities(rng):
    p = np.array([0.1, 0.6, 0.0, 0.3])
    counts = np.bincount([sample_action(p, rng) for _ in range(20000)], minlength=4) / 20000
    assert counts[2] == 0 and np.allclose(counts, p, atol=0.015)


def test_action_space_and_grounding():
    d = get_domain("rest")
    space = ActionSpace.of(d)
    assert len(space) == 2 * 2 + 3
    act = ground_action(space.actions.index(("confirm", "food")), BeliefState({"loc": (1, 0.9), "food": (4, 0.6)}), d)
    assert (act.act, act.slot, act.value) == ("confirm", "food", 4)
    with pytest.raises(IndexError):
        ground_action(len(space), {"loc": 0, "food": 0}, d)


def test_probs_are_distributions_and_shapes(two_head_policy, rng):
    obs = rng.normal(size=(4, 6))
    p = two_head_policy.action_probs(obs, "rest")
    assert p.shape == (4, 7) and np.allclose(p.sum(1), 1)
    assert two_head_policy.action_probs(obs[0], "weather").shape == (6,)
    with pytest.raises(KeyError):
        two_head_policy.action_probs(obs, "bus")
    with pytest.raises(ValueError):
        two_head_policy.action_probs(np.zeros((1, 5)), "rest")


def test_surrogate_gradient_matches_finite_differences(two_head_policy, rng):
    pol = two_head_policy
    obs, actions, adv, old_logp = _batch(pol, "rest", 12, rng)
    old_logp = old_logp + 0.1 * rng.normal(size=12)  # evaluate away from theta_old
    _, g = pol.surrogate_and_gradient(obs, actions, adv, old_logp, "rest")
    num = nn.numeric_grad(lambda v: pol.surrogate_and_gradient(obs, actions, adv, old_logp, "rest", v,
                                                                need_grad=False)[0], pol.params.values)
    assert nn.max_relative_error(g, num) <= 1e-4


def test_other_domain_heads_get_exactly_zero_gradient(two_head_policy, rng):
    pol = two_head_policy
    _, g = pol.surrogate_and_gradient(*_batch(pol, "rest", 10, rng), "rest")
    g = pol.params.like(g)
    assert np.all(g["head.weather.weight"] == 0) and np.all(g["head.weather.bias"] == 0)
    assert np.any(g[SHARED + ".weight"] != 0) and np.any(g["head.rest.weight"] != 0)


def test_aggregate_shared_gradient_is_the_task_mean(two_head_policy, rng):
    pol = two_head_policy
    grads = [pol.surrogate_and_gradient(*_batch(pol, d, 9, rng), d)[1] for d in ("rest", "weather")]
    agg = pol.params.like(combine_gradients(grads))
    shared = pol.params.mask(SHARED)
    assert np.max(np.abs(agg.values[shared] - np.mean([g[shared] for g in grads], axis=0))) <= 1e-10


def test_fisher_vector_product_properties(two_head_policy, rng):
    pol = two_head_policy
    theta = pol.params.values
    states = [("rest", rng.normal(size=(8, 6))), ("weather", rng.normal(size=(5, 6)))]
    n = len(theta)
    F = np.column_stack([nn.fisher_vector_product(pol, theta, states, e) for e in np.eye(n)])
    assert np.max(np.abs(F - F.T)) <= 1e-8
    assert np.linalg.eigvalsh((F + F.T) / 2).min() >= -1e-10
    v = rng.normal(size=n)
    old = [pol.action_probs(o, d) for d, o in states]
    fd = nn.fvp_finite_difference(_kl_grad(pol, states, old), theta, v)
    assert nn.max_relative_error(F @ v, fd, floor=1e-6) <= 1e-4
    damped = nn.fisher_vector_product(pol, theta, states, v, 0.1)
    assert np.allclose(damped, F @ v + 0.1 * v)


def test_mean_kl_is_zero_at_old_params_and_pools(two_head_policy, rng):
    pol = two_head_policy
    a, b = rng.normal(size=(3, 6)), rng.normal(size=(6, 6))
    old = [("rest", a, pol.action_probs(a, "rest")), ("weather", b, pol.action_probs(b, "weather"))]
    kl, per = pol.mean_kl(old)
    assert kl == pytest.approx(0, abs=1e-14) and set(per) == {"rest", "weather"}
    theta = pol.params.values + 0.3 * rng.normal(size=len(pol.params))
    kl, per = pol.mean_kl(old, theta)
    assert kl == pytest.approx((3 * per["rest"] + 6 * per["weather"]) / 9)


def test_transfer_clone_preserves_source_behaviour(two_head_policy, rng):
    pol = two_head_policy
    clone = pol.clone_for_transfer(get_domain("bus"), rng)
    assert clone.params.checksum(SHARED) == pol.params.checksum(SHARED)
    probes = rng.normal(size=(100, 6))
    for d in ("rest", "weather"):
        assert np.array_equal(clone.action_probs(probes, d), pol.action_probs(probes, d))
    fresh = MultiDomainPolicy(6, [get_domain("bus")], PolicyConfig(embed_width=5, head_init_scale=0.01))
    assert np.abs(fresh.params["head.bus.weight"]).max() < 0.01  # default-style small init: near-uniform start
    assert np.abs(clone.params["head.bus.weight"]).max() <= np.sqrt(6 / (5 + 8)) * pol.config.head_init_scale  # glorot limit, 8 bus actions
    with pytest.raises(ValueError):
        clone.clone_for_transfer(get_domain("rest"), rng)


def test_checkpoint_roundtrip(tmp_path, two_head_policy, rng):
    base = ValueBaselines(6, [get_domain("rest"), get_domain("weather")], rng=rng)
    save_policy(tmp_path / "p.ckpt", two_head_policy, base)
    pol, vb = load_policy(tmp_path / "p.ckpt")
    assert np.array_equal(pol.params.values, two_head_policy.params.values)
    assert np.array_equal(vb.params.values, base.params.values)
    save_policy(tmp_path / "q.ckpt", two_head_policy)
    assert load_policy(tmp_path / "q.ckpt")[1] is None


def test_layout_mismatch_rejected(two_head_policy):
    with pytest.raises(nn.ConfigurationError):
        MultiDomainPolicy(6, [get_domain("bus")], two_head_policy.config, params=two_head_policy.params)
    with pytest.raises(ValueError):
        MultiDomainPolicy(6, [get_domain("bus"), get_domain("bus")])
    with pytest.raises(ValueError):
        PolicyConfig(embed_width=0)


def test_value_baseline_regresses_and_only_touches_its_domain(rng):
    doms = [get_domain("rest"), get_domain("weather")]
    vb = ValueBaselines(4, doms, PolicyConfig(value_hidden=16), rng=rng)
    obs = rng.normal(size=(256, 4))
    y = obs @ np.array([1.0, -2.0, 0.5, 0.0]) + 3
    before = vb.params.values[vb.params.mask("value.weather.")].copy()
    first = vb.loss_and_grad(obs, y, "rest")[0]
    last = vb.fit(obs, y, "rest", 100, rng)
    assert last < 0.05 * first
    assert np.array_equal(vb.params.values[vb.params.mask("value.weather.")], before)
    with pytest.raises(KeyError):
        vb.predict(obs, "bus")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_value_gradient(seed):
    r = np.random.default_rng(seed)
    vb = ValueBaselines(3, [get_domain("rest")], PolicyConfig(value_hidden=4), rng=r)
    vb.params.values += 0.05 * r.normal(size=len(vb.params))
    obs, y = r.normal(size=(7, 3)), r.normal(size=7)
    _, grads = vb.loss_and_grad(obs, y, "rest")
    g = np.concatenate([grads[k].ravel() for k in ("hidden.weight", "hidden.bias", "out.weight", "out.bias")])

    def f(v):
        saved = vb.params.values.copy()
        vb.params.values[:] = v
        out = vb.loss_and_grad(obs, y, "rest")[0]
        vb.params.values[:] = saved
        return out

    assert nn.max_relative_error(g, nn.numeric_grad(f, vb.params.values)) <= 1e-4
