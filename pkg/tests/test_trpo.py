import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdrl import nn
from mdrl.env import get_domain, micro_domain
from mdrl.policy import MultiDomainPolicy, PolicyConfig
from mdrl.trpo import (LOG_HEADER, LogRow, Schedule, TaskBatch, Trajectory, TrpoConfig, collect_rollouts,
                       compute_advantages, discounted_returns, evaluate, normalize_advantages, read_log,
                       train_mtl, train_single, train_tl, trpo_step, write_log)

rewards = arrays(np.float64, st.integers(1, 12), elements=st.floats(-5, 30))


@given(rewards, st.floats(0.5, 1.0))
def test_discounted_returns_recursion(r, gamma):
    g = discounted_returns(r, gamma)
    assert g[-1] == pytest.approx(r[-1])
    assert np.allclose(g[:-1], r[:-1] + gamma * g[1:])


def _traj(r, width=3, seed=0):
    obs = np.random.default_rng(seed).normal(size=(len(r), width))
    n = len(r)
    return Trajectory("x", obs, np.zeros(n, int), np.asarray(r, float), np.zeros(n), np.ones((n, 1)), True)


@given(rewards, st.floats(0.5, 1.0))
def test_gae_limits(r, gamma):
    tr = _traj(r)
    adv, tgt = compute_advantages([tr], None, gamma, 1.0, normalize=False)
    assert np.allclose(adv, discounted_returns(r, gamma)) and np.allclose(tgt, adv)
    v = lambda o: o[:, 0]  # noqa: E731
    adv0, _ = compute_advantages([tr], v, gamma, 0.0, normalize=False)
    vals = tr.observations[:, 0]
    assert np.allclose(adv0, r + gamma * np.append(vals[1:], 0.0) - vals)


def test_advantage_normalisation_pools_tasks():
    a = TaskBatch("a", np.zeros((3, 1)), np.zeros(3, int), np.array([1.0, 2.0, 3.0]), np.zeros(3), np.ones((3, 1)))
    b = TaskBatch("b", np.zeros((2, 1)), np.zeros(2, int), np.array([10.0, 20.0]), np.zeros(2), np.ones((2, 1)))
    normalize_advantages([a, b])
    pooled = np.concatenate([a.advantages, b.advantages])
    assert pooled.mean() == pytest.approx(0) and pooled.std() == pytest.approx(1)
    assert b.advantages.min() > a.advantages.max()  # not normalised per task


def test_config_validation():
    for bad in (dict(max_kl=0), dict(dialogs_per_iteration=0), dict(backtrack_coefficient=1.0), dict(gamma=0.0),
                dict(cg_damping=-1)):
        with pytest.raises(ValueError):
            TrpoConfig(**bad)
    with pytest.raises(ValueError):
        Schedule(budget=10, checkpoint_interval=20)


@pytest.fixture
def micro_policy(tiny_dst):
    return MultiDomainPolicy(tiny_dst.observation_width, [micro_domain()], PolicyConfig(embed_width=8),
                             rng=np.random.default_rng(0))


def test_rollouts_do_not_depend_on_batching(tiny_dst):
    d = get_domain("rest")
    pol = MultiDomainPolicy(tiny_dst.observation_width, [d], rng=np.random.default_rng(1))
    whole = collect_rollouts(pol, tiny_dst, d, 6, seed=3)
    parts = collect_rollouts(pol, tiny_dst, d, 2, seed=3) + collect_rollouts(pol, tiny_dst, d, 4, seed=3, start=2)
    for a, b in zip(whole, parts):
        assert np.array_equal(a.actions, b.actions) and np.allclose(a.observations, b.observations)
        assert a.length <= 15 and a.total_return == pytest.approx(a.rewards.sum())
        assert np.allclose(np.exp(a.old_logp), a.old_probs[np.arange(a.length), a.actions])


def test_evaluation_reuses_the_same_episodes(tiny_dst, micro_policy):
    a = evaluate(micro_policy, tiny_dst, micro_domain(), 30, seed=0)
    assert a == evaluate(micro_policy, tiny_dst, micro_domain(), 30, seed=0)
    assert 0 <= a[0] <= 1 and 1 <= a[1] <= 15


def _batches(policy, dst, domains, n, seed, cfg):
    out = []
    for d in domains:
        trajs = collect_rollouts(policy, dst, d, n, seed, noise_p=0.0)
        adv, _ = compute_advantages(trajs, None, cfg.gamma, cfg.gae_lambda, normalize=False)
        out.append(TaskBatch.from_trajectories(trajs, adv))
    normalize_advantages(out)
    return out


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([0.001, 0.01, 0.1]))
def test_trust_region_step_contract(tiny_dst, seed, delta):
    d = micro_domain()
    pol = MultiDomainPolicy(tiny_dst.observation_width, [d], PolicyConfig(embed_width=8),
                            rng=np.random.default_rng(seed))
    cfg = TrpoConfig(max_kl=delta)
    batches = _batches(pol, tiny_dst, [d], 20, seed, cfg)
    before = pol.params.values.copy()
    new, info = trpo_step(pol, batches, cfg)
    assert np.array_equal(pol.params.values, before)  # the step never mutates the policy
    if info.accepted:
        old = [(b.domain, b.observations, b.old_probs) for b in batches]
        kl, _ = pol.mean_kl(old, new.values)
        assert kl <= delta and kl == pytest.approx(info.mean_kl)
        assert info.surrogate_gain > 0
    else:
        assert np.array_equal(new.values, before)


def test_rejected_step_when_no_candidate_improves(tiny_dst, micro_policy):
    cfg = TrpoConfig(backtrack_steps=1)
    batches = _batches(micro_policy, tiny_dst, [micro_domain()], 10, 0, cfg)
    for b in batches:
        b.advantages = np.zeros_like(b.advantages)  # flat objective: zero gradient
    new, info = trpo_step(micro_policy, batches, cfg)
    assert not info.accepted and np.array_equal(new.values, micro_policy.params.values)


def test_non_finite_gradient_raises(tiny_dst, micro_policy):
    batches = _batches(micro_policy, tiny_dst, [micro_domain()], 5, 0, TrpoConfig())
    batches[0].advantages[0] = np.nan
    with pytest.raises(nn.NumericError):
        trpo_step(micro_policy, batches, TrpoConfig())


def test_single_domain_training_logs_and_checkpoints(tiny_dst):
    sched = Schedule(budget=100, checkpoint_interval=40, eval_dialogs=10, noise_p=0.0)
    run = train_single(micro_domain(), tiny_dst, TrpoConfig(dialogs_per_iteration=30), sched, seed=0)
    assert [r.dialogs_seen for r in run.iterations] == [30, 60, 90, 100]
    assert [r.dialogs_seen for r in run.evaluations] == [0, 60, 90, 100]
    again = train_single(micro_domain(), tiny_dst, TrpoConfig(dialogs_per_iteration=30), sched, seed=0)
    assert np.array_equal(run.policy.params.values, again.policy.params.values)


def test_mtl_counts_dialogs_per_domain_and_tl_keeps_target_separate(tiny_dst):
    doms = [micro_domain(), get_domain("rest")]
    sched = Schedule(budget=40, checkpoint_interval=40, eval_dialogs=5, noise_p=0.0)
    cfg = TrpoConfig(dialogs_per_iteration=20)
    run = train_mtl(doms, tiny_dst, cfg, sched, seed=1)
    assert sorted({r.domain for r in run.evaluations}) == ["micro", "rest"]
    assert [r.dialogs_seen for r in run.iterations if r.domain == "rest"] == [20, 40]
    with pytest.raises(ValueError):
        train_mtl(doms[:1], tiny_dst, cfg, sched, seed=1)
    tl = train_tl([doms[1]], doms[0], tiny_dst, cfg, sched, seed=1)
    assert {r.domain for r in tl.evaluations} == {"micro"}
    assert {r.domain for r in tl.source_iterations} == {"rest"}
    assert set(tl.policy.domains) == {"rest", "micro"}
    with pytest.raises(ValueError):
        train_tl(doms, doms[0], tiny_dst, cfg, sched, seed=1)


@given(st.lists(st.tuples(st.sampled_from(["single", "mtl", "tl"]), st.integers(0, 5000), st.floats(0, 1),
                          st.floats(0, 15), st.booleans()), max_size=5))
def test_log_roundtrip(tmp_path_factory, rows):
    rows = [LogRow(f"{m}-s0", m, "rest", 0, n, round(s, 6), round(l_, 6), 0.001, 0.5, int(a))
            for m, n, s, l_, a in rows]
    path = tmp_path_factory.mktemp("log") / "log.csv"
    write_log(path, rows)
    assert path.read_text().splitlines()[0].split(",") == LOG_HEADER
    assert read_log(path) == rows


def test_read_log_rejects_unknown_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_log(tmp_path / "x.csv")


def test_per_task_kl_flag_is_at_least_as_strict(tiny_dst):
    doms = [micro_domain(), get_domain("rest")]
    pol = MultiDomainPolicy(tiny_dst.observation_width, doms, rng=np.random.default_rng(4))
    cfg = TrpoConfig(max_kl=0.05, per_task_kl=True)
    batches = _batches(pol, tiny_dst, doms, 15, 4, cfg)
    new, info = trpo_step(pol, batches, cfg)
    if info.accepted:
        _, per = pol.mean_kl([(b.domain, b.observations, b.old_probs) for b in batches], new.values)
        assert max(per.values()) <= cfg.max_kl
