"""TRPO with GAE, in single-domain, batch multi-task and transfer modes."""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .dst import DstModel
from .env import DEFAULT_NOISE_P, DomainSpec, RewardConfig, action_space, episode_rng, ground, open_dialog, step
from .nlg import turn_tokens
from .policy import MultiDomainPolicy, PolicyConfig, ValueBaselines, sample_action

log = logging.getLogger(__name__)

LOG_HEADER = ["run_id", "mode", "domain", "seed", "dialogs_seen", "success_rate", "avg_length", "mean_kl",
              "surrogate_gain", "accepted"]
KL_GRID = (0.001, 0.003, 0.005, 0.01, 0.03, 0.05, 0.1, 0.3, 0.5)
DIALOGS_GRID = (10, 20, 50, 100, 200, 500, 1000)

TRAIN_STREAM, EVAL_STREAM, SOURCE_STREAM = 0, 1, 2


@dataclass
class TrpoConfig:
    max_kl: float = 0.01
    dialogs_per_iteration: int = 50
    cg_iterations: int = 10
    cg_damping: float = 0.1
    backtrack_steps: int = 10
    backtrack_coefficient: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.97
    value_epochs: int = 5
    per_task_kl: bool = False  # MTL: constrain every task's KL instead of the pooled KL

    def __post_init__(self):
        if not self.max_kl > 0:
            raise ValueError("max_kl must be > 0")
        for name in ("dialogs_per_iteration", "cg_iterations", "backtrack_steps", "value_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.backtrack_coefficient < 1:
            raise ValueError("backtrack_coefficient must lie in (0, 1)")
        if self.cg_damping < 0:
            raise ValueError("cg_damping must be >= 0")
        for name in ("gamma", "gae_lambda"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")


@dataclass
class Schedule:
    """How long to train and how to measure progress."""
    budget: int = 3000
    checkpoint_interval: int = 250
    eval_dialogs: int = 200
    noise_p: float = DEFAULT_NOISE_P
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if self.budget < self.checkpoint_interval:
            raise ValueError("budget must be >= checkpoint interval")
        if self.checkpoint_interval < 1 or self.eval_dialogs < 1:
            raise ValueError("checkpoint_interval and eval_dialogs must be >= 1")


@dataclass
class Trajectory:
    domain: str
    observations: np.ndarray  # (T, obs width)
    actions: np.ndarray
    rewards: np.ndarray
    old_logp: np.ndarray
    old_probs: np.ndarray  # (T, |A|)
    success: bool

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


def domain_key(name: str) -> int:
    return zlib.crc32(name.encode())


def collect_rollouts(policy: MultiDomainPolicy, dst: DstModel, domain: DomainSpec, n_dialogs: int, seed: int,
                     start: int = 0, stream: int = TRAIN_STREAM, noise_p: float = DEFAULT_NOISE_P,
                     reward: RewardConfig | None = None) -> list[Trajectory]:
    """Run `n_dialogs` episodes in lockstep. Episode i draws everything (goal, noise, actions)
    from its own generator keyed by (seed, domain, stream, start + i), so results do not depend
    on batching."""
    if n_dialogs < 1:
        raise ValueError("n_dialogs must be >= 1")
    reward = reward or RewardConfig()
    space = action_space(domain)
    key = domain_key(domain.name)
    rngs = [episode_rng(seed, key, stream, start + i) for i in range(n_dialogs)]
    states = [open_dialog(domain, r) for r in rngs]
    h, c = dst.initial_state(n_dialogs)
    buf = [dict(obs=[], act=[], rew=[], logp=[], probs=[]) for _ in range(n_dialogs)]
    active = np.arange(n_dialogs)
    while active.size:
        tokens = [turn_tokens(*states[i].history[-1], domain) for i in active]
        h_a, c_a = dst.dialog_step(dst.utterance_vectors(tokens), h[active], c[active])
        h[active], c[active] = h_a, c_a
        beliefs = dst.predict_values(h_a, domain.name)
        probs = policy.action_probs(h_a, domain.name)
        for j, i in enumerate(active):
            a = sample_action(probs[j], rngs[i])
            result = step(states[i], ground(domain, space[a], beliefs[j]), reward, noise_p, rngs[i])
            b = buf[i]
            b["obs"].append(h_a[j])
            b["act"].append(a)
            b["rew"].append(result.reward)
            b["logp"].append(np.log(probs[j, a]))
            b["probs"].append(probs[j])
        active = np.array([i for i in active if not states[i].done], dtype=np.int64)
    return [Trajectory(domain.name, np.array(b["obs"]), np.array(b["act"], dtype=np.int64), np.array(b["rew"]),
                       np.array(b["logp"]), np.array(b["probs"]), s.success) for b, s in zip(buf, states)]


def evaluate(policy: MultiDomainPolicy, dst: DstModel, domain: DomainSpec, n_dialogs: int, seed: int,
             noise_p: float = DEFAULT_NOISE_P, reward: RewardConfig | None = None) -> tuple[float, float]:
    """(success rate, mean length) over held-out sampled dialogs; the same episodes at every call."""
    trajs = collect_rollouts(policy, dst, domain, n_dialogs, seed, stream=EVAL_STREAM, noise_p=noise_p,
                             reward=reward)
    return float(np.mean([t.success for t in trajs])), float(np.mean([t.length for t in trajs]))


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def compute_advantages(trajs: Sequence[Trajectory], value_fn: Callable[[np.ndarray], np.ndarray] | None,
                       gamma: float, lam: float, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages (concatenated over trajectories) and discounted return-to-go targets."""
    if not trajs:
        raise ValueError("empty trajectory batch")
    advs, targets = [], []
    for tr in trajs:
        v = value_fn(tr.observations) if value_fn is not None else np.zeros(tr.length)
        v_next = np.append(v[1:], 0.0)
        delta = tr.rewards + gamma * v_next - v
        advs.append(discounted_returns(delta, gamma * lam))
        targets.append(discounted_returns(tr.rewards, gamma))
    adv, tgt = np.concatenate(advs), np.concatenate(targets)
    if normalize:
        std = adv.std()
        adv = (adv - adv.mean()) / (std if std > 1e-12 else 1.0)
    return adv, tgt


def conjugate_gradient(fvp: Callable[[np.ndarray], np.ndarray], g: np.ndarray, iters: int = 10,
                       tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Approximately solve A x = g for symmetric positive-definite A given as a product; returns (x, ‖Ax − g‖)."""
    g = np.asarray(g, dtype=np.float64)
    x = np.zeros_like(g)
    r = g.copy()
    d = r.copy()
    rr = r @ r
    for _ in range(iters):
        if np.sqrt(rr) <= tol:
            break
        Ad = fvp(d)
        dAd = d @ Ad
        if not np.isfinite(dAd) or dAd <= 0:
            if not np.isfinite(dAd):
                raise nn.NumericError(f"conjugate gradient: non-finite curvature {dAd}")
            break
        alpha = rr / dAd
        x = x + alpha * d
        r = r - alpha * Ad
        rr_new = r @ r
        d = r + (rr_new / rr) * d
        rr = rr_new
        if not np.all(np.isfinite(x)):
            raise nn.NumericError("conjugate gradient: non-finite iterate")
    return x, float(np.linalg.norm(fvp(x) - g))


@dataclass
class TaskBatch:
    domain: str
    observations: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    old_logp: np.ndarray
    old_probs: np.ndarray

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], advantages: np.ndarray) -> "TaskBatch":
        return cls(trajs[0].domain, np.concatenate([t.observations for t in trajs]),
                   np.concatenate([t.actions for t in trajs]), advantages,
                   np.concatenate([t.old_logp for t in trajs]), np.concatenate([t.old_probs for t in trajs]))


def normalize_advantages(batches: Sequence[TaskBatch]) -> None:
    """Zero mean, unit variance over the whole update batch (all tasks pooled), in place."""
    pooled = np.concatenate([b.advantages for b in batches])
    mean, std = pooled.mean(), pooled.std()
    std = std if std > 1e-12 else 1.0
    for b in batches:
        b.advantages = (b.advantages - mean) / std


@dataclass
class StepInfo:
    accepted: bool
    mean_kl: float
    surrogate_gain: float
    step_norm: float
    backtracks: int
    cg_residual: float


def task_gradients(policy: MultiDomainPolicy, batches: Sequence[TaskBatch], theta=None):
    """Per-task (surrogate, gradient) pairs."""
    return [policy.surrogate_and_gradient(b.observations, b.actions, b.advantages, b.old_logp, b.domain, theta)
            for b in batches]


def combine_gradients(grads: Sequence[np.ndarray]) -> np.ndarray:
    """Aggregate gradient (1/N) sum_t g_t. Task t's gradient is zero on every other head, so shared
    coordinates get the mean of the task gradients and head t is driven by g_t only."""
    return np.sum(grads, axis=0) / len(grads)


def _surrogate(policy, batches, theta) -> float:
    return float(np.mean([policy.surrogate_and_gradient(b.observations, b.actions, b.advantages, b.old_logp,
                                                        b.domain, theta, need_grad=False)[0] for b in batches]))


def trpo_step(policy: MultiDomainPolicy, batches: Sequence[TaskBatch], config: TrpoConfig) -> tuple[nn.ParamVector, StepInfo]:
    """One trust-region update. Returns new parameters (a copy of the old ones if rejected)."""
    theta0 = policy.params.values.copy()
    results = task_gradients(policy, batches)
    L0 = float(np.mean([r[0] for r in results]))
    g = combine_gradients([r[1] for r in results])
    if not np.all(np.isfinite(g)):
        raise nn.NumericError("non-finite policy gradient")
    if not np.any(g):
        return policy.params.copy(), StepInfo(False, 0.0, 0.0, 0.0, 0, 0.0)
    states = [(b.domain, b.observations) for b in batches]
    old = [(b.domain, b.observations, b.old_probs) for b in batches]

    def fvp(v):
        return nn.fisher_vector_product(policy, theta0, states, v, config.cg_damping)

    x, residual = conjugate_gradient(fvp, g, config.cg_iterations)
    # damping only regularises the solve; the step is scaled by the undamped curvature
    xFx = float(x @ nn.fisher_vector_product(policy, theta0, states, x, 0.0))
    if not np.isfinite(xFx) or xFx <= 0:
        return policy.params.copy(), StepInfo(False, 0.0, 0.0, 0.0, 0, residual)
    full = np.sqrt(2.0 * config.max_kl / xFx) * x
    frac = 1.0
    for k in range(config.backtrack_steps):
        cand = theta0 + frac * full
        kl, per_task = policy.mean_kl(old, cand)
        gain = _surrogate(policy, batches, cand) - L0
        kl_ok = (max(per_task.values()) if config.per_task_kl else kl) <= config.max_kl
        if kl_ok and gain > 0 and np.isfinite(kl):
            return policy.params.like(cand), StepInfo(True, kl, gain, float(np.linalg.norm(cand - theta0)), k,
                                                      residual)
        frac *= config.backtrack_coefficient
    return policy.params.copy(), StepInfo(False, 0.0, 0.0, 0.0, config.backtrack_steps, residual)


# -- training loops --------------------------------------------------------------

@dataclass
class LogRow:
    run_id: str
    mode: str
    domain: str
    seed: int
    dialogs_seen: int
    success_rate: float
    avg_length: float
    mean_kl: float
    surrogate_gain: float
    accepted: int

    def as_list(self) -> list:
        return [self.run_id, self.mode, self.domain, self.seed, self.dialogs_seen, f"{self.success_rate:.6f}",
                f"{self.avg_length:.6f}", f"{self.mean_kl:.8g}", f"{self.surrogate_gain:.8g}", self.accepted]

    @classmethod
    def from_dict(cls, raw: dict) -> "LogRow":
        return cls(raw["run_id"], raw["mode"], raw["domain"], int(raw["seed"]), int(raw["dialogs_seen"]),
                   float(raw["success_rate"]), float(raw["avg_length"]), float(raw["mean_kl"]),
                   float(raw["surrogate_gain"]), int(raw["accepted"]))


@dataclass
class TrainRun:
    """Iteration rows use the training batch; evaluation rows use held-out dialogs at checkpoints."""
    mode: str
    domains: list[str]
    seed: int
    run_id: str
    iterations: list[LogRow] = field(default_factory=list)
    evaluations: list[LogRow] = field(default_factory=list)
    source_iterations: list[LogRow] = field(default_factory=list)
    policy: MultiDomainPolicy | None = None

    def curve(self, domain: str) -> list[tuple[int, float, float]]:
        return [(r.dialogs_seen, r.success_rate, r.avg_length) for r in self.evaluations if r.domain == domain]


def write_log(path: str | Path, rows: Sequence[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow(r.as_list())


def read_log(path: str | Path) -> list[LogRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [LogRow.from_dict(r) for r in reader]


def _seeded(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7919, *keys]))


def _train_loop(policy: MultiDomainPolicy, baselines: ValueBaselines, dst: DstModel, domains: Sequence[DomainSpec],
                config: TrpoConfig, schedule: Schedule, seed: int, mode: str, run_id: str,
                evaluate_progress: bool = True, stream: int = TRAIN_STREAM) -> tuple[list[LogRow], list[LogRow]]:
    """Alternate rollouts, value fitting and one joint trust-region step until each domain has seen
    `schedule.budget` dialogs. Returns (iteration rows, evaluation rows)."""
    fit_rng = _seeded(seed, stream, 1)
    iterations, evaluations = [], []

    def checkpoint(seen, info):
        for d in domains:
            s, length = evaluate(policy, dst, d, schedule.eval_dialogs, seed, schedule.noise_p, schedule.reward)
            evaluations.append(LogRow(run_id, mode, d.name, seed, seen, s, length,
                                      info.mean_kl if info else 0.0, info.surrogate_gain if info else 0.0,
                                      int(info.accepted) if info else 0))

    if evaluate_progress:
        checkpoint(0, None)
    seen = 0
    while seen < schedule.budget:
        n = min(config.dialogs_per_iteration, schedule.budget - seen)
        batches, stats = [], []
        for d in domains:
            trajs = collect_rollouts(policy, dst, d, n, seed, start=seen, stream=stream, noise_p=schedule.noise_p,
                                     reward=schedule.reward)
            obs = np.concatenate([t.observations for t in trajs])
            _, targets = compute_advantages(trajs, None, config.gamma, 1.0, normalize=False)
            baselines.fit(obs, targets, d.name, config.value_epochs, fit_rng)
            adv, _ = compute_advantages(trajs, lambda o, name=d.name: baselines.predict(o, name), config.gamma,
                                        config.gae_lambda, normalize=False)
            batches.append(TaskBatch.from_trajectories(trajs, adv))
            stats.append((np.mean([t.success for t in trajs]), np.mean([t.length for t in trajs])))
        normalize_advantages(batches)
        new_params, info = trpo_step(policy, batches, config)
        policy.params = new_params
        prev, seen = seen, seen + n
        for d, (s, length) in zip(domains, stats):
            iterations.append(LogRow(run_id, mode, d.name, seed, seen, float(s), float(length), info.mean_kl,
                                     info.surrogate_gain, int(info.accepted)))
        log.debug("%s %s seen=%d kl=%.4g gain=%.4g accepted=%s", run_id, mode, seen, info.mean_kl,
                  info.surrogate_gain, info.accepted)
        if evaluate_progress and (seen // schedule.checkpoint_interval > prev // schedule.checkpoint_interval
                                  or seen >= schedule.budget):
            checkpoint(seen, info)
    return iterations, evaluations


def _fresh(dst: DstModel, domains: Sequence[DomainSpec], policy_config: PolicyConfig | None, seed: int):
    pc = policy_config or PolicyConfig()
    policy = MultiDomainPolicy(dst.observation_width, domains, pc, rng=_seeded(seed, 0))
    return policy, ValueBaselines(dst.observation_width, domains, pc, rng=_seeded(seed, 1))


def train_single(domain: DomainSpec, dst: DstModel, config: TrpoConfig, schedule: Schedule, seed: int,
                 policy_config: PolicyConfig | None = None, run_id: str | None = None) -> TrainRun:
    run_id = run_id or f"single-{domain.name}-s{seed}"
    policy, baselines = _fresh(dst, [domain], policy_config, seed)
    its, evs = _train_loop(policy, baselines, dst, [domain], config, schedule, seed, "single", run_id)
    return TrainRun("single", [domain.name], seed, run_id, its, evs, policy=policy)


def train_mtl(domains: Sequence[DomainSpec], dst: DstModel, config: TrpoConfig, schedule: Schedule, seed: int,
              policy_config: PolicyConfig | None = None, run_id: str | None = None,
              evaluate_progress: bool = True, stream: int = TRAIN_STREAM) -> TrainRun:
    if len(domains) < 2:
        raise ValueError("multi-task training needs at least two domains")
    run_id = run_id or f"mtl-s{seed}"
    policy, baselines = _fresh(dst, domains, policy_config, seed)
    its, evs = _train_loop(policy, baselines, dst, domains, config, schedule, seed, "mtl", run_id,
                           evaluate_progress=evaluate_progress, stream=stream)
    return TrainRun("mtl", [d.name for d in domains], seed, run_id, its, evs, policy=policy)


def train_tl(sources: Sequence[DomainSpec], target: DomainSpec, dst: DstModel, config: TrpoConfig,
             schedule: Schedule, seed: int, policy_config: PolicyConfig | None = None,
             run_id: str | None = None, source_budget: int | None = None) -> TrainRun:
    """MTL pretraining on the sources, then a fresh head (and value baseline) fine-tuned on the target."""
    if target.name in {s.name for s in sources}:
        raise ValueError("target domain must not be among the sources")
    run_id = run_id or f"tl-{target.name}-s{seed}"
    src_schedule = Schedule(source_budget or schedule.budget, schedule.checkpoint_interval, schedule.eval_dialogs,
                            schedule.noise_p, schedule.reward)
    if len(sources) >= 2:
        pre = train_mtl(sources, dst, config, src_schedule, seed, policy_config, run_id=run_id,
                        evaluate_progress=False, stream=SOURCE_STREAM)
    else:
        policy, baselines = _fresh(dst, sources, policy_config, seed)
        its, _ = _train_loop(policy, baselines, dst, sources, config, src_schedule, seed, "mtl", run_id,
                             evaluate_progress=False, stream=SOURCE_STREAM)
        pre = TrainRun("mtl", [s.name for s in sources], seed, run_id, its, policy=policy)
    policy = pre.policy.clone_for_transfer(target, _seeded(seed, 2))
    baselines = ValueBaselines(dst.observation_width, [target], policy.config, rng=_seeded(seed, 1))
    its, evs = _train_loop(policy, baselines, dst, [target], config, schedule, seed, "tl", run_id)
    return TrainRun("tl", [target.name], seed, run_id, its, evs, source_iterations=pre.iterations, policy=policy)
