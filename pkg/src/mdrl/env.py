"""Slot-filling dialog MDP with a goal-driven simulated user.

The user holds a goal (one value per user slot plus a set of system slots it
wants answered). User informs pass through a noisy channel; confirmations are
answered truthfully. System answers come from a deterministic hashed knowledge
base, so the only thing the system has to get right is the user's values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

SYSTEM, USER = "system", "user"
ACT_TYPES = ("greet", "request", "inform", "confirm", "affirm", "deny", "goodbye")
ANSWER_CARDINALITY = 20

# Chosen by scripts/calibrate_noise.py: closest rule-based average success to 64.5%.
DEFAULT_NOISE_P = 0.20


class MalformedActError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    user_slots: tuple[tuple[str, int], ...]
    system_slots: tuple[str, ...]
    nlg_style: str = "plain"
    value_vocab_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "user_slots", tuple((str(s), int(k)) for s, k in self.user_slots))
        object.__setattr__(self, "system_slots", tuple(str(s) for s in self.system_slots))
        names = [s for s, _ in self.user_slots] + list(self.system_slots)
        if len(set(names)) != len(names):
            raise ValueError(f"{self.name}: slot names must be unique")
        if not self.user_slots or not self.system_slots:
            raise ValueError(f"{self.name}: needs at least one user and one system slot")
        for slot, k in self.user_slots:
            if k < 2:
                raise ValueError(f"{self.name}: slot {slot} cardinality {k} < 2")

    @property
    def user_slot_names(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.user_slots)

    def cardinality(self, slot: str) -> int:
        for s, k in self.user_slots:
            if s == slot:
                return k
        raise KeyError(slot)


BUILTIN_DOMAINS: dict[str, DomainSpec] = {
    d.name: d
    for d in [
        DomainSpec("bus", (("from_loc", 13), ("to_loc", 13), ("datetime", 30)), ("duration", "fare"), "plain", 11),
        DomainSpec("movie", (("genre", 15), ("year", 7), ("rating", 10)), ("title", "showtime", "cinema"), "plain", 12),
        DomainSpec("rest", (("loc", 11), ("food", 13)), ("price", "open", "parking"), "plain", 13),
        DomainSpec("rest_slot", (("loc", 11), ("food", 13)), ("price", "open", "parking"), "plain", 14),
        DomainSpec("rest_style", (("loc", 11), ("food", 13)), ("price", "open", "parking"), "formal", 13),
        DomainSpec("weather", (("loc", 11), ("datetime", 7)), ("temperature", "forecast"), "plain", 15),
    ]
}
DOMAIN_ORDER = tuple(BUILTIN_DOMAINS)


def micro_domain() -> DomainSpec:
    """One binary user slot, one system slot: the smallest non-trivial task."""
    return DomainSpec("micro", (("item", 2),), ("answer",), "plain", 99)


def get_domain(name: str) -> DomainSpec:
    if name == "micro":
        return micro_domain()
    try:
        return BUILTIN_DOMAINS[name]
    except KeyError:
        raise KeyError(f"unknown domain {name!r}") from None


def load_domain_file(path: str | Path) -> DomainSpec:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return DomainSpec(
        name=raw["name"],
        user_slots=tuple((s["name"], s["cardinality"]) for s in raw["user_slots"]),
        system_slots=tuple(raw["system_slots"]),
        nlg_style=raw.get("nlg_style", "plain"),
        value_vocab_seed=int(raw.get("value_vocab_seed", 0)),
    )


def dump_domain(domain: DomainSpec) -> str:
    lines = [
        f'name = "{domain.name}"',
        f'nlg_style = "{domain.nlg_style}"',
        f"value_vocab_seed = {domain.value_vocab_seed}",
        "system_slots = [" + ", ".join(f'"{s}"' for s in domain.system_slots) + "]",
    ]
    for slot, k in domain.user_slots:
        lines += ["", "[[user_slots]]", f'name = "{slot}"', f"cardinality = {k}"]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DialogAct:
    actor: str
    act: str
    slot: str | None = None
    value: int | None = None

    def __post_init__(self):
        if self.actor not in (SYSTEM, USER):
            raise MalformedActError(f"unknown actor {self.actor!r}")
        if self.act not in ACT_TYPES:
            raise MalformedActError(f"unknown act type {self.act!r}")
        if self.act in ("request", "confirm") and self.slot is None:
            raise MalformedActError(f"{self.act} needs a slot")
        if self.act == "inform" and (self.slot is None or self.value is None):
            raise MalformedActError("inform needs a slot and a value")
        if self.act in ("affirm", "deny") and self.value is not None:
            raise MalformedActError(f"{self.act} carries no value")

    def __str__(self):
        if self.slot is None:
            return self.act
        if self.value is None:
            return f"{self.act}({self.slot})"
        return f"{self.act}({self.slot}={self.value})"


def sys_act(act: str, slot: str | None = None, value: int | None = None) -> DialogAct:
    return DialogAct(SYSTEM, act, slot, value)


def user_act(act: str, slot: str | None = None, value: int | None = None) -> DialogAct:
    return DialogAct(USER, act, slot, value)


@dataclass(frozen=True)
class UserGoal:
    values: dict[str, int]
    requested: tuple[str, ...]


@dataclass(frozen=True)
class RewardConfig:
    step_reward: float = -1.0
    success_bonus: float = 30.0
    max_turns: int = 15

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


@dataclass
class EnvState:
    domain: DomainSpec
    goal: UserGoal
    turn_index: int = 0
    history: list[tuple[DialogAct, tuple[DialogAct, ...]]] = field(default_factory=list)
    informed_correct: set[str] = field(default_factory=set)
    done: bool = False
    success: bool = False
    total_return: float = 0.0
    rewards: list[float] = field(default_factory=list)


def sample_goal(domain: DomainSpec, rng: np.random.Generator) -> UserGoal:
    values = {slot: int(rng.integers(k)) for slot, k in domain.user_slots}
    n = len(domain.system_slots)
    # uniform over the 2^n - 1 non-empty subsets
    code = int(rng.integers(1, 2 ** n))
    requested = tuple(s for i, s in enumerate(domain.system_slots) if code >> i & 1)
    return UserGoal(values, requested)


def kb_lookup(domain: DomainSpec, user_values: dict[str, int]) -> dict[str, int]:
    missing = [s for s in domain.user_slot_names if s not in user_values]
    if missing:
        raise KeyError(f"missing user slot values: {missing}")
    key = "|".join([domain.name, str(domain.value_vocab_seed)]
                   + [f"{s}={int(user_values[s])}" for s in sorted(domain.user_slot_names)])
    digest = hashlib.blake2b(key.encode(), digest_size=64).digest()
    out = {}
    for i, slot in enumerate(domain.system_slots):
        chunk = digest[(4 * i) % 64:(4 * i) % 64 + 4]
        out[slot] = int.from_bytes(chunk, "little") % ANSWER_CARDINALITY
    return out


def kb_answer(domain: DomainSpec, user_values: dict[str, int], slot: str) -> int:
    return kb_lookup(domain, user_values)[slot]


def open_dialog(domain: DomainSpec, rng: np.random.Generator) -> EnvState:
    """Sample a goal and perform the uncharged greeting exchange."""
    goal = sample_goal(domain, rng)
    state = EnvState(domain, goal)
    opening = (user_act("greet"),) + tuple(user_act("request", s) for s in goal.requested)
    state.history.append((sys_act("greet"), opening))
    return state


def user_respond(state: EnvState, act: DialogAct, noise_p: float, rng: np.random.Generator) -> tuple[DialogAct, ...]:
    if state.done:
        raise ContractViolation("user_respond on a finished dialog")
    if act.actor != SYSTEM:
        raise MalformedActError("user can only respond to system acts")
    domain, goal = state.domain, state.goal
    if act.act == "greet":
        return (user_act("greet"),)
    if act.act == "goodbye":
        return (user_act("goodbye"),)
    if act.act == "request":
        if act.slot not in goal.values:
            raise MalformedActError(f"request of non-user slot {act.slot!r}")
        value = goal.values[act.slot]
        if noise_p > 0 and rng.random() < noise_p:
            k = domain.cardinality(act.slot)
            other = int(rng.integers(k - 1))
            value = other if other < value else other + 1
        return (user_act("inform", act.slot, value),)
    if act.act == "confirm":
        if act.slot not in goal.values or act.value is None:
            raise MalformedActError("confirm needs a user slot and a value")
        if act.value == goal.values[act.slot]:
            return (user_act("affirm", act.slot),)
        return (user_act("deny", act.slot), user_act("inform", act.slot, goal.values[act.slot]))
    if act.act == "inform":
        if act.slot not in domain.system_slots:
            raise MalformedActError(f"inform of non-system slot {act.slot!r}")
        if act.value == kb_answer(domain, goal.values, act.slot):
            return (user_act("affirm", act.slot),)
        return (user_act("deny", act.slot),)
    raise MalformedActError(f"system cannot {act.act}")


@dataclass(frozen=True)
class StepResult:
    user_acts: tuple[DialogAct, ...]
    reward: float
    done: bool
    success: bool


def step(state: EnvState, act: DialogAct, reward_cfg: RewardConfig, noise_p: float, rng: np.random.Generator) -> StepResult:
    """Advance one turn (system act + user response), mutating `state`."""
    if state.done:
        raise ContractViolation("step after episode end")
    user_acts = user_respond(state, act, noise_p, rng)
    state.turn_index += 1
    reward = reward_cfg.step_reward
    if act.act == "inform" and user_acts[0].act == "affirm":
        state.informed_correct.add(act.slot)
    if set(state.goal.requested) <= state.informed_correct:
        state.done = state.success = True
        reward += reward_cfg.success_bonus
    elif state.turn_index >= reward_cfg.max_turns:
        state.done = True
    state.history.append((act, user_acts))
    state.rewards.append(reward)
    state.total_return += reward
    return StepResult(user_acts, reward, state.done, state.success)


class DialogEnv:
    """Convenience wrapper binding a domain to reward and noise settings."""

    def __init__(self, domain: DomainSpec, reward: RewardConfig | None = None, noise_p: float = DEFAULT_NOISE_P):
        if not 0.0 <= noise_p <= 1.0:
            raise ValueError("noise_p must lie in [0, 1]")
        self.domain = domain
        self.reward = reward or RewardConfig()
        self.noise_p = noise_p

    def reset(self, rng: np.random.Generator) -> EnvState:
        return open_dialog(self.domain, rng)

    def step(self, state: EnvState, act: DialogAct, rng: np.random.Generator) -> StepResult:
        return step(state, act, self.reward, self.noise_p, rng)


def format_user_turn(acts: Iterable[DialogAct]) -> str:
    return "+".join(str(a) for a in acts)


def trace_lines(state: EnvState) -> list[str]:
    """Tab-separated per-turn trace: turn, system act, user act(s), reward, cumulative return."""
    lines = []
    total = 0.0
    for t, (s, u) in enumerate(state.history[1:], start=1):
        r = state.rewards[t - 1]
        total += r
        lines.append(f"{t}\t{s}\t{format_user_turn(u)}\t{r:g}\t{total:g}")
    return lines


# ---------------------------------------------------------------------------
# action space shared by the RL policy and the corpus generator


def action_space(domain: DomainSpec) -> list[tuple[str, str]]:
    """request(u) and confirm(u) for each user slot, inform(s) for each system slot."""
    acts = [("request", s) for s in domain.user_slot_names]
    acts += [("confirm", s) for s in domain.user_slot_names]
    acts += [("inform", s) for s in domain.system_slots]
    return acts


def ground(domain: DomainSpec, action: tuple[str, str], values: dict[str, int]) -> DialogAct:
    """Turn an abstract (act, slot) into a concrete system act given believed user values."""
    kind, slot = action
    if kind == "request":
        return sys_act("request", slot)
    if kind == "confirm":
        return sys_act("confirm", slot, int(values[slot]))
    if kind == "inform":
        return sys_act("inform", slot, kb_answer(domain, values, slot))
    raise MalformedActError(f"unknown action kind {kind!r}")


# ---------------------------------------------------------------------------
# rule-based baseline


@dataclass
class Progress:
    greeted: bool = False
    requested: tuple[str, ...] = ()
    confirmed: frozenset[str] = frozenset()
    answered: frozenset[str] = frozenset()


def rule_based_policy(domain: DomainSpec, tracked: dict[str, tuple[int, float] | None], progress: Progress,
                      confirm_threshold: float) -> DialogAct:
    if not progress.greeted:
        return sys_act("greet")
    for slot in domain.user_slot_names:
        if tracked.get(slot) is None:
            return sys_act("request", slot)
    for slot in domain.user_slot_names:
        value, conf = tracked[slot]
        if conf < confirm_threshold and slot not in progress.confirmed:
            return sys_act("confirm", slot, value)
    values = {slot: tracked[slot][0] for slot in domain.user_slot_names}
    for slot in domain.system_slots:
        if slot in progress.requested and slot not in progress.answered:
            return sys_act("inform", slot, kb_answer(domain, values, slot))
    return sys_act("goodbye")


class GoldTracker:
    """Tracks the dialog from the user acts exactly as delivered (no DST)."""

    def __init__(self, domain: DomainSpec, heard_confidence: float = 1.0):
        self.domain = domain
        self.heard_confidence = heard_confidence
        self.tracked: dict[str, tuple[int, float] | None] = {s: None for s in domain.user_slot_names}
        self.progress = Progress()

    def update(self, system: DialogAct, user: Sequence[DialogAct]) -> None:
        p = self.progress
        if system.act == "greet":
            p.greeted = True
        confirmed, answered, requested = set(p.confirmed), set(p.answered), list(p.requested)
        for a in user:
            if a.act == "request" and a.slot not in requested:
                requested.append(a.slot)
            elif a.act == "inform":
                after_confirm = system.act == "confirm" and system.slot == a.slot
                conf = 1.0 if after_confirm else self.heard_confidence
                self.tracked[a.slot] = (a.value, conf)
                if after_confirm:
                    confirmed.add(a.slot)
            elif a.act == "affirm" and system.act == "confirm":
                self.tracked[a.slot] = (system.value, 1.0)
                confirmed.add(a.slot)
            elif a.act == "affirm" and system.act == "inform":
                answered.add(a.slot)
        p.requested = tuple(requested)
        p.confirmed = frozenset(confirmed)
        p.answered = frozenset(answered)

    def values(self) -> dict[str, int]:
        return {s: (v[0] if v is not None else 0) for s, v in self.tracked.items()}


@dataclass(frozen=True)
class EpisodeSummary:
    success: bool
    total_return: float
    length: int  # charged turns, greeting excluded


def run_rule_based(domain: DomainSpec, rng: np.random.Generator, noise_p: float = DEFAULT_NOISE_P,
                   reward: RewardConfig | None = None, confirm_threshold: float = 0.0,
                   explore_eps: float = 0.0) -> EnvState:
    """Play one episode with the rule-based policy; with explore_eps > 0 a random
    RL action (grounded on the tracker) replaces the rule act with that probability."""
    reward = reward or RewardConfig()
    state = open_dialog(domain, rng)
    # a value heard over the channel is right with probability 1 - noise_p
    tracker = GoldTracker(domain, heard_confidence=1.0 - noise_p)
    tracker.update(*state.history[0])
    actions = action_space(domain)
    while not state.done:
        if explore_eps > 0 and rng.random() < explore_eps:
            act = ground(domain, actions[int(rng.integers(len(actions)))], tracker.values())
        else:
            act = rule_based_policy(domain, tracker.tracked, tracker.progress, confirm_threshold)
        result = step(state, act, reward, noise_p, rng)
        tracker.update(act, result.user_acts)
    return state


def summarize(state: EnvState) -> EpisodeSummary:
    return EpisodeSummary(state.success, state.total_return, state.turn_index)


def episode_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def all_goals(domain: DomainSpec) -> list[UserGoal]:
    """Every (user values, non-empty requested subset) combination."""
    grids = np.array(np.meshgrid(*[np.arange(k) for _, k in domain.user_slots], indexing="ij")).reshape(
        len(domain.user_slots), -1).T
    n = len(domain.system_slots)
    subsets = [tuple(s for i, s in enumerate(domain.system_slots) if code >> i & 1) for code in range(1, 2 ** n)]
    return [UserGoal(dict(zip(domain.user_slot_names, map(int, row))), req) for row in grids for req in subsets]


def brute_force_optimal_return(domain: DomainSpec, max_len: int, reward: RewardConfig | None = None) -> tuple[float, tuple]:
    """Best return a fixed sequence of abstract actions guarantees over every goal, noise-free.

    Actions are grounded on what the user has said so far (unheard slots default to value 0);
    a sequence that leaves any goal's dialog unfinished guarantees nothing.
    """
    reward = reward or RewardConfig()
    space = action_space(domain)
    goals = all_goals(domain)
    best, best_seq = -np.inf, ()

    def play(seq, goal):
        state = EnvState(domain, goal)
        tracker = GoldTracker(domain)
        for a in seq:
            if state.done:
                return None  # sequence continues past the end of this dialog
            act = ground(domain, space[a], tracker.values())
            result = step(state, act, reward, 0.0, np.random.default_rng(0))
            tracker.update(act, result.user_acts)
        return state.total_return if state.done else None

    for length in range(1, max_len + 1):
        for seq in np.ndindex(*([len(space)] * length)):
            returns = [play(seq, g) for g in goals]
            if any(r is None for r in returns):
                continue
            worst = min(returns)
            if worst > best:
                best, best_seq = worst, tuple(space[a] for a in seq)
    return float(best), best_seq
