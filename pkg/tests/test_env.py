import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdrl import env
from mdrl.env import (BUILTIN_DOMAINS, ContractViolation, DialogEnv, MalformedActError, RewardConfig, episode_rng,
                      get_domain, run_rule_based, summarize, sys_act, trace_lines, user_act)

DOMAINS = sorted(BUILTIN_DOMAINS)


@pytest.mark.parametrize("name", DOMAINS)
def test_rule_based_is_perfect_without_noise(name):
    d = get_domain(name)
    runs = [summarize(run_rule_based(d, episode_rng(0, i), noise_p=0.0)) for i in range(200)]
    assert all(r.success for r in runs)
    assert max(r.length for r in runs) <= 15


def test_micro_optimum_by_enumeration(micro):
    best, seq = env.brute_force_optimal_return(micro, 4)
    assert best == 28.0
    assert seq == (("request", "item"), ("inform", "answer"))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(DOMAINS), st.integers(0, 10 ** 6), st.floats(0.0, 1.0))
def test_episodes_end_within_turn_cap_with_consistent_return(name, seed, noise):
    state = run_rule_based(get_domain(name), episode_rng(seed), noise_p=noise, explore_eps=0.5)
    assert state.done and state.turn_index <= 15
    assert state.total_return == pytest.approx(sum(state.rewards))
    expected = -state.turn_index + (30.0 if state.success else 0.0)
    assert state.total_return == pytest.approx(expected)


def test_seeded_traces_are_bit_reproducible():
    d = get_domain("bus")
    a = trace_lines(run_rule_based(d, episode_rng(7, 3), noise_p=0.3, explore_eps=0.3))
    b = trace_lines(run_rule_based(d, episode_rng(7, 3), noise_p=0.3, explore_eps=0.3))
    c = trace_lines(run_rule_based(d, episode_rng(7, 4), noise_p=0.3, explore_eps=0.3))
    assert a == b and a != c


def test_noise_never_corrupts_confirmations():
    d = get_domain("rest")
    state = env.open_dialog(d, np.random.default_rng(0))
    r = np.random.default_rng(1)
    for _ in range(50):
        (reply,) = env.user_respond(state, sys_act("confirm", "loc", state.goal.values["loc"]), 1.0, r)
        assert reply.act == "affirm"
    # with noise 1 an informed value is always wrong
    informs = [env.user_respond(state, sys_act("request", "loc"), 1.0, r)[0].value for _ in range(50)]
    assert state.goal.values["loc"] not in informs


def test_deny_reveals_the_true_value():
    d = get_domain("weather")
    state = env.open_dialog(d, np.random.default_rng(2))
    true = state.goal.values["datetime"]
    deny, inform = env.user_respond(state, sys_act("confirm", "datetime", (true + 1) % 7), 0.0, None)
    assert (deny.act, inform.act, inform.value) == ("deny", "inform", true)


def test_success_requires_every_requested_answer():
    d = get_domain("movie")
    state = env.open_dialog(d, np.random.default_rng(5))
    answers = env.kb_lookup(d, state.goal.values)
    cfg = RewardConfig()
    for i, slot in enumerate(state.goal.requested):
        res = env.step(state, sys_act("inform", slot, answers[slot]), cfg, 0.0, None)
        last = i == len(state.goal.requested) - 1
        assert res.done == last and res.success == last
        assert res.reward == (29.0 if last else -1.0)
    with pytest.raises(ContractViolation):
        env.step(state, sys_act("goodbye"), cfg, 0.0, None)


def test_turn_cap_ends_in_failure():
    d = get_domain("bus")
    state = env.open_dialog(d, np.random.default_rng(0))
    cfg = RewardConfig(max_turns=3)
    for _ in range(3):
        res = env.step(state, sys_act("request", "from_loc"), cfg, 0.0, np.random.default_rng(0))
    assert res.done and not res.success and state.total_return == -3


def test_malformed_acts_are_rejected():
    with pytest.raises(MalformedActError):
        sys_act("inform", "fare")
    with pytest.raises(MalformedActError):
        sys_act("shout")
    with pytest.raises(MalformedActError):
        user_act("affirm", "loc", 3)
    d = get_domain("rest")
    state = env.open_dialog(d, np.random.default_rng(0))
    with pytest.raises(MalformedActError):
        env.user_respond(state, sys_act("request", "price"), 0.0, None)
    with pytest.raises(MalformedActError):
        env.user_respond(state, user_act("greet"), 0.0, None)
    with pytest.raises(MalformedActError):
        env.ground(d, ("shout", "loc"), {})


def test_goal_sampling_covers_nonempty_subsets():
    d = get_domain("weather")
    r = np.random.default_rng(0)
    seen = {env.sample_goal(d, r).requested for _ in range(300)}
    assert seen == {("temperature",), ("forecast",), ("temperature", "forecast")}
    assert len(env.all_goals(d)) == 11 * 7 * 3


def test_kb_is_deterministic_and_domain_specific():
    rest, rest_slot = get_domain("rest"), get_domain("rest_slot")
    vals = {"loc": 1, "food": 2}
    assert env.kb_lookup(rest, vals) == env.kb_lookup(rest, dict(vals))
    assert env.kb_lookup(rest, vals) != env.kb_lookup(rest_slot, vals)
    with pytest.raises(KeyError):
        env.kb_lookup(rest, {"loc": 1})


def test_domain_file_roundtrip(tmp_path):
    for d in BUILTIN_DOMAINS.values():
        path = tmp_path / f"{d.name}.toml"
        path.write_text(env.dump_domain(d))
        assert env.load_domain_file(path) == d


def test_domain_validation():
    with pytest.raises(ValueError):
        env.DomainSpec("x", (("a", 1),), ("b",))
    with pytest.raises(ValueError):
        env.DomainSpec("x", (("a", 3),), ("a",))
    with pytest.raises(KeyError):
        get_domain("spaceship")
    with pytest.raises(ValueError):
        DialogEnv(get_domain("rest"), noise_p=1.5)


def test_gold_tracker_confirmation_raises_confidence():
    d = get_domain("rest")
    tracker = env.GoldTracker(d, heard_confidence=0.8)
    tracker.update(sys_act("request", "loc"), (user_act("inform", "loc", 4),))
    assert tracker.tracked["loc"] == (4, 0.8)
    tracker.update(sys_act("confirm", "loc", 4), (user_act("affirm", "loc"),))
    assert tracker.tracked["loc"] == (4, 1.0) and "loc" in tracker.progress.confirmed


def test_confirming_rule_based_recovers_from_noise():
    d = get_domain("rest")
    plain = np.mean([run_rule_based(d, episode_rng(1, i), noise_p=0.3).success for i in range(300)])
    careful = np.mean([run_rule_based(d, episode_rng(1, i), noise_p=0.3, confirm_threshold=1.0).success
                       for i in range(300)])
    assert careful > plain
