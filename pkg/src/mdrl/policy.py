"""Multi-domain categorical policy: a shared action-embedding layer feeding one softmax head per
domain, plus per-domain value baselines (kept in a separate parameter vector)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .dst import BeliefState, _domain_from_dict, _domain_to_dict
from .env import DialogAct, DomainSpec, action_space, ground

SHARED = "shared.embed"


@dataclass
class PolicyConfig:
    embed_width: int = 32
    head_init_scale: float = 0.01
    value_hidden: int = 32
    value_lr: float = 1e-2
    value_batch: int = 64

    def __post_init__(self):
        if self.embed_width < 1 or self.value_hidden < 1:
            raise ValueError("policy widths must be >= 1")
        if self.head_init_scale < 0:
            raise ValueError("head_init_scale must be >= 0")

    @classmethod
    def desk(cls, **kw) -> "PolicyConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "PolicyConfig":
        return cls(**{"embed_width": 100, **kw})


@dataclass(frozen=True)
class ActionSpace:
    domain: str
    actions: tuple[tuple[str, str], ...]

    @classmethod
    def of(cls, domain: DomainSpec) -> "ActionSpace":
        return cls(domain.name, tuple(action_space(domain)))

    def __len__(self) -> int:
        return len(self.actions)


# -- distribution helpers ------------------------------------------------------

def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def log_prob(probs: np.ndarray, a: int) -> float:
    p = float(probs[a])
    if p <= 0.0:
        raise ValueError(f"action {a} has zero probability")
    return float(np.log(p))


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def kl_divergence(p_old: np.ndarray, p_new: np.ndarray) -> float:
    """KL(p_old || p_new); rows are summed if 2-D inputs are given."""
    p_old, p_new = np.asarray(p_old, np.float64), np.asarray(p_new, np.float64)
    if p_old.shape != p_new.shape:
        raise ValueError(f"support mismatch: {p_old.shape} vs {p_new.shape}")
    nz = p_old > 0
    if np.any(p_new[nz] <= 0):
        return float("inf")
    return float(np.sum(p_old[nz] * (np.log(p_old[nz]) - np.log(p_new[nz]))))


def ground_action(a: int, beliefs: BeliefState | dict[str, int], domain: DomainSpec) -> DialogAct:
    """Concrete system act for action index `a` using the tracker's argmax values."""
    space = action_space(domain)
    if not 0 <= a < len(space):
        raise IndexError(f"action {a} outside {domain.name}'s {len(space)} actions")
    values = beliefs.values() if isinstance(beliefs, BeliefState) else beliefs
    return ground(domain, space[a], values)


# -- policy network --------------------------------------------------------------

class MultiDomainPolicy:
    """softmax(head_d(relu(shared · obs))). Parameters live in one flat vector."""

    def __init__(self, obs_width: int, domains: Sequence[DomainSpec], config: PolicyConfig | None = None,
                 rng: np.random.Generator | None = None, params: nn.ParamVector | None = None):
        self.config = config or PolicyConfig()
        self.obs_width = obs_width
        self.domains = {d.name: d for d in domains}
        if len(self.domains) != len(domains):
            raise ValueError("duplicate domain names")
        self.spaces = {d.name: ActionSpace.of(d) for d in domains}
        shapes = self._shapes()
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = nn.ParamVector.zeros(shapes)
            nn.init_dense(params, SHARED, rng)
            for name in self.domains:
                nn.init_dense(params, f"head.{name}", rng, scale=self.config.head_init_scale)
        elif [(n, tuple(s)) for n, _, s in params.layout] != shapes:
            raise nn.ConfigurationError("parameter layout does not match the policy architecture")
        self.params = params

    def _shapes(self):
        E = self.config.embed_width
        shapes = nn.dense_shapes(SHARED, self.obs_width, E)
        for name, space in self.spaces.items():
            shapes += nn.dense_shapes(f"head.{name}", E, len(space))
        return shapes

    def _check(self, domain: str):
        if domain not in self.domains:
            raise KeyError(f"unknown domain {domain!r}")

    def _view(self, theta) -> nn.ParamVector:
        if theta is None:
            return self.params
        if isinstance(theta, nn.ParamVector):
            return theta
        return self.params.like(np.asarray(theta))

    def _forward(self, obs: np.ndarray, domain: str, theta=None):
        self._check(domain)
        p = self._view(theta)
        obs = np.atleast_2d(obs)
        if obs.shape[1] != self.obs_width:
            raise ValueError(f"observation width {obs.shape[1]} != {self.obs_width}")
        z = obs @ p[SHARED + ".weight"].T + p[SHARED + ".bias"]
        h = np.maximum(z, 0.0)
        logits = h @ p[f"head.{domain}.weight"].T + p[f"head.{domain}.bias"]
        return z, h, logits

    def logits(self, obs: np.ndarray, domain: str, theta=None) -> np.ndarray:
        return self._forward(obs, domain, theta)[2]

    def action_probs(self, obs: np.ndarray, domain: str, theta=None) -> np.ndarray:
        """Action distribution(s); a 1-D observation gives a 1-D distribution."""
        probs = nn.softmax(self.logits(obs, domain, theta))
        return probs[0] if np.ndim(obs) == 1 else probs

    def _vjp(self, p: nn.ParamVector, obs, z, h, domain, dlogits) -> np.ndarray:
        g = p.zeros_like()
        head = f"head.{domain}"
        g[head + ".weight"][...] = dlogits.T @ h
        g[head + ".bias"][...] = dlogits.sum(axis=0)
        dz = (dlogits @ p[head + ".weight"]) * (z > 0)
        g[SHARED + ".weight"][...] = dz.T @ obs
        g[SHARED + ".bias"][...] = dz.sum(axis=0)
        return g.values

    def _jvp(self, p: nn.ParamVector, obs, z, h, domain, v) -> np.ndarray:
        dv = p.like(v)
        head = f"head.{domain}"
        dz = obs @ dv[SHARED + ".weight"].T + dv[SHARED + ".bias"]
        dh = dz * (z > 0)
        return dh @ p[head + ".weight"].T + h @ dv[head + ".weight"].T + dv[head + ".bias"]

    def surrogate_and_gradient(self, obs: np.ndarray, actions: np.ndarray, advantages: np.ndarray,
                               old_logp: np.ndarray, domain: str, theta=None, need_grad: bool = True):
        """L = mean(pi/pi_old * A) over the batch, and dL/dtheta (zero outside shared + head.domain)."""
        p = self._view(theta)
        obs = np.atleast_2d(obs)
        z, h, logits = self._forward(obs, domain, p)
        logp = nn.log_softmax(logits)
        n = len(actions)
        rows = np.arange(n)
        ratio = np.exp(logp[rows, actions] - old_logp)
        loss = float(np.mean(ratio * advantages))
        if not need_grad:
            return loss, None
        probs = np.exp(logp)
        dlogits = -probs
        dlogits[rows, actions] += 1.0
        dlogits *= (ratio * advantages / n)[:, None]
        return loss, self._vjp(p, obs, z, h, domain, dlogits)

    def mean_kl(self, states: Sequence[tuple[str, np.ndarray, np.ndarray]], theta=None) -> tuple[float, dict[str, float]]:
        """Pooled mean KL(old || theta) over (domain, obs, old_probs) groups, plus per-group means."""
        total, count, per = 0.0, 0, {}
        for domain, obs, old in states:
            new = nn.softmax(self.logits(obs, domain, theta))
            with np.errstate(divide="ignore"):
                kl = np.sum(np.where(old > 0, old * (np.log(old) - np.log(new)), 0.0), axis=1)
            per[domain] = float(kl.mean())
            total += float(kl.sum())
            count += len(kl)
        return total / count, per

    def fisher_terms(self, theta, states):
        """states: sequence of (domain, obs) groups; see nn.fisher_vector_product."""
        p = self._view(theta)
        terms = []
        for domain, obs in states:
            obs = np.atleast_2d(obs)
            z, h, logits = self._forward(obs, domain, p)
            terms.append((nn.softmax(logits),
                          lambda v, o=obs, z=z, h=h, d=domain: self._jvp(p, o, z, h, d, v),
                          lambda dl, o=obs, z=z, h=h, d=domain: self._vjp(p, o, z, h, d, dl)))
        return terms

    # -- transfer / persistence -------------------------------------------------
    def clone_for_transfer(self, new_domain: DomainSpec, rng: np.random.Generator) -> "MultiDomainPolicy":
        """Copy every existing parameter bit-exactly and add a freshly initialised head."""
        if new_domain.name in self.domains:
            raise ValueError(f"domain {new_domain.name!r} already has a head")
        out = MultiDomainPolicy(self.obs_width, list(self.domains.values()) + [new_domain], self.config,
                                rng=np.random.default_rng(0))
        for name in self.params.names():
            out.params[name][...] = self.params[name]
        nn.init_dense(out.params, f"head.{new_domain.name}", rng, scale=self.config.head_init_scale)
        return out

    def metadata(self) -> dict:
        return {"obs_width": self.obs_width, "config": asdict(self.config),
                "domains": [_domain_to_dict(d) for d in self.domains.values()]}


class ValueBaselines:
    """Per-domain obs -> hidden(relu) -> scalar regressors, fit by minibatch Adam on squared error."""

    def __init__(self, obs_width: int, domains: Sequence[DomainSpec], config: PolicyConfig | None = None,
                 rng: np.random.Generator | None = None, params: nn.ParamVector | None = None):
        self.config = config or PolicyConfig()
        self.obs_width = obs_width
        self.domain_names = [d.name for d in domains]
        H = self.config.value_hidden
        shapes = []
        for name in self.domain_names:
            shapes += nn.dense_shapes(f"value.{name}.hidden", obs_width, H) + nn.dense_shapes(f"value.{name}.out", H, 1)
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = nn.ParamVector.zeros(shapes)
            for name in self.domain_names:
                nn.init_dense(params, f"value.{name}.hidden", rng)
                nn.init_dense(params, f"value.{name}.out", rng)
        self.params = params
        self._opt: dict[str, nn.Adam] = {}

    def _layers(self, domain: str):
        p = self.params
        return (p[f"value.{domain}.hidden.weight"], p[f"value.{domain}.hidden.bias"],
                p[f"value.{domain}.out.weight"], p[f"value.{domain}.out.bias"])

    def predict(self, obs: np.ndarray, domain: str) -> np.ndarray:
        if domain not in self.domain_names:
            raise KeyError(f"no value baseline for {domain!r}")
        W1, b1, W2, b2 = self._layers(domain)
        h = np.maximum(np.atleast_2d(obs) @ W1.T + b1, 0.0)
        return (h @ W2.T + b2)[:, 0]

    def loss_and_grad(self, obs: np.ndarray, targets: np.ndarray, domain: str) -> tuple[float, dict[str, np.ndarray]]:
        W1, b1, W2, b2 = self._layers(domain)
        z = obs @ W1.T + b1
        h = np.maximum(z, 0.0)
        err = (h @ W2.T + b2)[:, 0] - targets
        n = len(targets)
        dy = (err / n)[:, None]
        dz = (dy @ W2) * (z > 0)
        grads = {"hidden.weight": dz.T @ obs, "hidden.bias": dz.sum(0), "out.weight": dy.T @ h, "out.bias": dy.sum(0)}
        return 0.5 * float(np.mean(err ** 2)), grads

    def fit(self, obs: np.ndarray, targets: np.ndarray, domain: str, epochs: int, rng: np.random.Generator) -> float:
        """A few epochs of minibatch regression; returns the final full-batch loss."""
        names = [f"value.{domain}.{k}" for k in ("hidden.weight", "hidden.bias", "out.weight", "out.bias")]
        idx = np.flatnonzero(self.params.mask(f"value.{domain}."))
        opt = self._opt.setdefault(domain, nn.Adam(len(idx), lr=self.config.value_lr))
        bs = self.config.value_batch
        for _ in range(epochs):
            order = rng.permutation(len(targets))
            for start in range(0, len(order), bs):
                sel = order[start:start + bs]
                _, grads = self.loss_and_grad(obs[sel], targets[sel], domain)
                g = np.concatenate([grads[k.split(".", 2)[2]].ravel() for k in names])
                vals = self.params.values[idx]
                opt.step(vals, g)
                self.params.values[idx] = vals
        return self.loss_and_grad(obs, targets, domain)[0]


def save_policy(path: str | Path, policy: MultiDomainPolicy, baselines: ValueBaselines | None = None) -> None:
    """nn checkpoint holding shared.embed / head.<d> / value.<d> tensors, plus a JSON sidecar."""
    path = Path(path)
    pvs = [policy.params] + ([baselines.params] if baselines is not None else [])
    nn.save_params(path, nn.concat_params(*pvs))
    path.with_suffix(".json").write_text(json.dumps(policy.metadata(), indent=1))


def load_policy(path: str | Path) -> tuple[MultiDomainPolicy, ValueBaselines | None]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    domains = [_domain_from_dict(d) for d in meta["domains"]]
    config = PolicyConfig(**meta["config"])
    full = nn.load_params(path)
    pol_names = [n for n, _, _ in full.layout if not n.startswith("value.")]
    n_pol = sum(int(np.prod(full[n].shape)) for n in pol_names)
    policy = MultiDomainPolicy(meta["obs_width"], domains, config)
    policy.params.values[:] = full.values[:n_pol]
    baselines = None
    if n_pol < len(full):
        baselines = ValueBaselines(meta["obs_width"], domains, config)
        baselines.params.values[:] = full.values[n_pol:]
    return policy, baselines
