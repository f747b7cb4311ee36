"""Multi-domain dialog state tracker.

Tokens -> word embeddings -> bidirectional utterance LSTM (final states
concatenated) -> dialog LSTM -> shared ReLU dense -> one softmax head per
(domain, user slot). The dialog LSTM hidden state is the RL observation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .env import DEFAULT_NOISE_P, DomainSpec, get_domain, run_rule_based
from .nlg import Vocab, build_vocab, turn_tokens, value_token

log = logging.getLogger(__name__)


@dataclass
class DstConfig:
    word_emb_width: int = 32
    utt_hidden_width: int = 32
    dialog_hidden_width: int = 32
    shared_dense_width: int = 32
    epochs: int = 80
    learning_rate: float = 5e-3
    weight_decay: float = 0.0
    embed_init: float = 1.0
    dropout: float = 0.2
    dialog_forget_bias: float = 1.0
    augment: float = 0.8  # per-dialog probability of value relabelling during training
    batch_size: int = 32
    val_fraction: float = 0.2
    n_train: int = 300
    n_test: int = 100
    noise_p: float = DEFAULT_NOISE_P
    explore_eps: float = 0.3
    confirm_fraction: float = 0.5  # share of corpus dialogs where the generator confirms every slot

    def __post_init__(self):
        widths = (self.word_emb_width, self.utt_hidden_width, self.dialog_hidden_width, self.shared_dense_width)
        if min(widths) < 1:
            raise ValueError("DST widths must be >= 1")

    @classmethod
    def desk(cls, **kw) -> "DstConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "DstConfig":
        base = dict(word_emb_width=400, utt_hidden_width=300, dialog_hidden_width=200, shared_dense_width=200,
                    n_train=2000, n_test=500)
        base.update(kw)
        return cls(**base)

    @property
    def observation_width(self) -> int:
        return self.dialog_hidden_width


@dataclass
class LabeledDialog:
    domain: str
    turns: list[list[str]]
    labels: dict[str, int]

    def to_json(self) -> str:
        return json.dumps({"domain": self.domain, "turns": self.turns, "labels": self.labels})

    @classmethod
    def from_json(cls, line: str) -> "LabeledDialog":
        raw = json.loads(line)
        return cls(raw["domain"], raw["turns"], {k: int(v) for k, v in raw["labels"].items()})


@dataclass(frozen=True)
class BeliefState:
    slots: dict[str, tuple[int, float]]  # slot -> (argmax value, its probability)

    def values(self) -> dict[str, int]:
        return {s: v for s, (v, _) in self.slots.items()}


def generate_corpus(domain: DomainSpec, n_dialogs: int, noise_p: float, rng: np.random.Generator,
                    explore_eps: float = 0.3, confirm_fraction: float = 0.5) -> list[LabeledDialog]:
    """Rule-based (epsilon-exploring) dialogs against the simulated user, rendered to tokens.

    A `confirm_fraction` share of dialogs confirms every heard value, so the tracker
    sees affirm/deny exchanges; the rest never confirm.
    """
    if n_dialogs < 1:
        raise ValueError("n_dialogs must be >= 1")
    out = []
    for _ in range(n_dialogs):
        threshold = 1.0 if rng.random() < confirm_fraction else 0.0
        state = run_rule_based(domain, rng, noise_p=noise_p, confirm_threshold=threshold, explore_eps=explore_eps)
        turns = [turn_tokens(s, u, domain) for s, u in state.history]
        out.append(LabeledDialog(domain.name, turns, dict(state.goal.values)))
    return out


def write_corpus(path: str | Path, dialogs: Sequence[LabeledDialog]) -> None:
    with open(path, "w") as fh:
        for d in dialogs:
            fh.write(d.to_json() + "\n")


def read_corpus(path: str | Path) -> list[LabeledDialog]:
    with open(path) as fh:
        return [LabeledDialog.from_json(line) for line in fh if line.strip()]


def mention_mask(dialog: LabeledDialog, domain: DomainSpec) -> dict[str, np.ndarray]:
    """Per slot, whether any value of that slot has been uttered by turn t (inclusive)."""
    owner = {value_token(domain, slot, v): slot for slot, k in domain.user_slots for v in range(k)}
    seen: set[str] = set()
    out = {slot: np.zeros(len(dialog.turns), dtype=bool) for slot in domain.user_slot_names}
    for t, tokens in enumerate(dialog.turns):
        seen.update(owner[tok] for tok in tokens if tok in owner)
        for slot in seen:
            out[slot][t] = True
    return out


def relabel(dialog: LabeledDialog, domain: DomainSpec, rng: np.random.Generator) -> LabeledDialog:
    """Consistently permute each user slot's value indices in tokens and labels.

    The permuted dialog is exactly what the simulator would have produced for the permuted goal
    (with the permuted noise draws), up to the system answer tokens, which the tracker does not predict.
    """
    mapping, labels = {}, dict(dialog.labels)
    for slot, k in domain.user_slots:
        perm = rng.permutation(k)
        for v in range(k):
            mapping[value_token(domain, slot, v)] = value_token(domain, slot, int(perm[v]))
        if slot in labels:
            labels[slot] = int(perm[labels[slot]])
    turns = [[mapping.get(tok, tok) for tok in turn] for turn in dialog.turns]
    return LabeledDialog(dialog.domain, turns, labels)


def _pad(seqs: Sequence[Sequence[int]], reverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Left-aligned (L, N) id matrix and mask; `reverse` flips each sequence within its length."""
    lengths = np.array([len(s) for s in seqs])
    L = int(lengths.max())
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    for n, s in enumerate(seqs):
        ids[n, :len(s)] = s[::-1] if reverse else s
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
    return ids.T, mask.T


class DstModel:
    def __init__(self, domains: Sequence[DomainSpec], config: DstConfig, vocab: Vocab | None = None,
                 params: nn.ParamVector | None = None, rng: np.random.Generator | None = None):
        self.domains = {d.name: d for d in domains}
        self.config = config
        self.vocab = vocab or build_vocab(domains)
        E, U, D, S = (config.word_emb_width, config.utt_hidden_width, config.dialog_hidden_width,
                      config.shared_dense_width)
        shapes = [("embed", (len(self.vocab), E))]
        shapes += nn.lstm_shapes("utt.fwd", E, U) + nn.lstm_shapes("utt.bwd", E, U)
        shapes += nn.lstm_shapes("dialog", 2 * U, D)
        shapes += nn.dense_shapes("shared.dense", D, S)
        for d in domains:
            for slot, k in d.user_slots:
                shapes += nn.dense_shapes(f"head.{d.name}.{slot}", S, k)
        if params is None:
            params = nn.ParamVector.zeros(shapes)
            rng = rng or np.random.default_rng(0)
            params["embed"][...] = rng.normal(0.0, config.embed_init, size=params["embed"].shape)
            for name in ("utt.fwd", "utt.bwd"):
                nn.init_lstm(params, name, rng)
            nn.init_lstm(params, "dialog", rng, forget_bias=config.dialog_forget_bias)
            nn.init_dense(params, "shared.dense", rng)
            for d in domains:
                for slot, _ in d.user_slots:
                    nn.init_dense(params, f"head.{d.name}.{slot}", rng)
        elif [(n, s) for n, _, s in params.layout] != [(n, tuple(s)) for n, s in shapes]:
            raise nn.ConfigurationError("parameter layout does not match DST architecture")
        self.params = params
        self._utt_cache: dict[tuple[int, ...], np.ndarray] = {}

    # -- parameter views -------------------------------------------------
    def _cell(self, name: str, theta: nn.ParamVector | None = None) -> nn.LstmCell:
        p = theta if theta is not None else self.params
        return nn.LstmCell(p[name + ".weight"], p[name + ".bias"])

    @property
    def observation_width(self) -> int:
        return self.config.dialog_hidden_width

    def head_names(self, domain: str) -> list[str]:
        if domain not in self.domains:
            raise KeyError(f"no heads registered for domain {domain!r}")
        return [f"head.{domain}.{slot}" for slot in self.domains[domain].user_slot_names]

    # -- inference -------------------------------------------------------
    def encode_utterances(self, id_seqs: Sequence[Sequence[int]], theta: nn.ParamVector | None = None) -> np.ndarray:
        p = theta if theta is not None else self.params
        emb = p["embed"]
        fwd_ids, mask = _pad(id_seqs)
        bwd_ids, _ = _pad(id_seqs, reverse=True)
        Hf, _, _ = nn.lstm_sequence(self._cell("utt.fwd", p), emb[fwd_ids], mask)
        Hb, _, _ = nn.lstm_sequence(self._cell("utt.bwd", p), emb[bwd_ids], mask)
        return np.concatenate([Hf[-1], Hb[-1]], axis=1)

    def utterance_vectors(self, token_seqs: Sequence[Sequence[str]]) -> np.ndarray:
        """Cached utterance encodings (the model is frozen once trained)."""
        keys = [tuple(self.vocab.encode(t)) for t in token_seqs]
        missing = list({k for k in keys if k not in self._utt_cache})
        if missing:
            enc = self.encode_utterances(missing)
            for k, v in zip(missing, enc):
                self._utt_cache[k] = v
        return np.stack([self._utt_cache[k] for k in keys])

    def initial_state(self, batch: int = 1) -> tuple[np.ndarray, np.ndarray]:
        D = self.config.dialog_hidden_width
        return np.zeros((batch, D)), np.zeros((batch, D))

    def dialog_step(self, utt: np.ndarray, h: np.ndarray, c: np.ndarray):
        return nn.lstm_step(utt, h, c, self._cell("dialog"))

    def encode_turn(self, tokens: Sequence[str], hidden: tuple[np.ndarray, np.ndarray] | None = None):
        """One turn of tracking: returns (observation, new dialog hidden (h, c))."""
        h, c = hidden if hidden is not None else self.initial_state(1)
        h, c = np.atleast_2d(h), np.atleast_2d(c)
        utt = self.utterance_vectors([tokens])
        h, c = self.dialog_step(utt, h, c)
        return h[0].copy(), (h, c)

    def slot_probs(self, obs: np.ndarray, domain: str) -> dict[str, np.ndarray]:
        obs = np.atleast_2d(obs)
        hidden = nn.activate(obs @ self.params["shared.dense.weight"].T + self.params["shared.dense.bias"], "relu")
        out = {}
        for name, slot in zip(self.head_names(domain), self.domains[domain].user_slot_names):
            out[slot] = nn.softmax(hidden @ self.params[name + ".weight"].T + self.params[name + ".bias"])
        return out

    def predict_slots(self, obs: np.ndarray, domain: str) -> BeliefState:
        probs = self.slot_probs(obs, domain)
        return BeliefState({s: (int(p[0].argmax()), float(p[0].max())) for s, p in probs.items()})

    def predict_values(self, obs: np.ndarray, domain: str) -> list[dict[str, int]]:
        """Batched argmax values, one dict per observation row."""
        probs = self.slot_probs(obs, domain)
        n = np.atleast_2d(obs).shape[0]
        argmax = {s: p.argmax(axis=1) for s, p in probs.items()}
        return [{s: int(a[i]) for s, a in argmax.items()} for i in range(n)]

    def dialog_observations(self, dialog: LabeledDialog) -> np.ndarray:
        """Observation after every turn of a dialog (T, D)."""
        utt = self.utterance_vectors(dialog.turns)
        h, c = self.initial_state(1)
        out = []
        for t in range(len(utt)):
            h, c = self.dialog_step(utt[t:t + 1], h, c)
            out.append(h[0])
        return np.array(out)

    def final_observations(self, dialogs: Sequence[LabeledDialog], theta: nn.ParamVector | None = None) -> np.ndarray:
        fwd = self._forward(dialogs, theta if theta is not None else self.params, keep_cache=False)
        return fwd["final_obs"]

    # -- training forward / backward ---------------------------------------
    def _forward(self, dialogs: Sequence[LabeledDialog], p: nn.ParamVector, keep_cache: bool = True,
                 dropout: float = 0.0, rng: np.random.Generator | None = None) -> dict:
        turn_ids = [self.vocab.encode(t) for d in dialogs for t in d.turns]
        n_turns = np.array([len(d.turns) for d in dialogs])
        fwd_ids, tok_mask = _pad(turn_ids)
        bwd_ids, _ = _pad(turn_ids, reverse=True)
        emb = p["embed"]
        cf, cb, cd = self._cell("utt.fwd", p), self._cell("utt.bwd", p), self._cell("dialog", p)
        Hf, _, cache_f = nn.lstm_sequence(cf, emb[fwd_ids], tok_mask)
        Hb, _, cache_b = nn.lstm_sequence(cb, emb[bwd_ids], tok_mask)
        utt = np.concatenate([Hf[-1], Hb[-1]], axis=1)  # (N, 2U)
        drop_u = drop_o = None
        if dropout > 0:
            drop_u = (rng.random(utt.shape) >= dropout) / (1.0 - dropout)
            utt = utt * drop_u
        B, T = len(dialogs), int(n_turns.max())
        turn_mask = (np.arange(T)[:, None] < n_turns[None, :]).astype(np.float64)  # (T, B)
        # flat turn index n -> (t, b)
        tb = np.array([(t, b) for b in range(B) for t in range(n_turns[b])])
        X = np.zeros((T, B, utt.shape[1]))
        X[tb[:, 0], tb[:, 1]] = utt
        h_drop = None
        if dropout > 0:
            h_drop = (rng.random((T, B, cd.n_hidden)) >= dropout) / (1.0 - dropout)
        Hd, _, cache_d = nn.lstm_sequence(cd, X, turn_mask, h_drop=h_drop)
        obs = Hd[tb[:, 0], tb[:, 1]]  # (N, D)
        if dropout > 0:
            drop_o = (rng.random(obs.shape) >= dropout) / (1.0 - dropout)
        final_idx = np.cumsum(n_turns) - 1
        out = {"final_obs": obs[final_idx], "obs": obs, "n_turns": n_turns, "drop_u": drop_u, "drop_o": drop_o}
        if keep_cache:
            out.update(fwd_ids=fwd_ids, bwd_ids=bwd_ids, cache_f=cache_f, cache_b=cache_b, cache_d=cache_d,
                       tb=tb, shape=(T, B), utt_width=utt.shape[1])
        return out

    def loss_and_grad(self, dialogs: Sequence[LabeledDialog], theta: nn.ParamVector | None = None,
                      need_grad: bool = True, dropout: float = 0.0, rng: np.random.Generator | None = None) -> tuple[float, np.ndarray | None]:
        """Mean over domains of mean over slots of per-turn cross-entropy.

        A slot only contributes on turns after one of its values has been uttered.
        """
        p = theta if theta is not None else self.params
        fwd = self._forward(dialogs, p, keep_cache=need_grad, dropout=dropout, rng=rng)
        obs = fwd["obs"] if dropout == 0 else fwd["obs"] * fwd["drop_o"]
        dom_of_turn = np.repeat([d.domain for d in dialogs], fwd["n_turns"])
        labels_of_turn = [d.labels for d in dialogs for _ in range(len(d.turns))]
        masks = [mention_mask(d, self.domains[d.domain]) for d in dialogs]
        Ws, bs = p["shared.dense.weight"], p["shared.dense.bias"]
        z = obs @ Ws.T + bs
        hid = nn.activate(z, "relu")
        mentioned = {}
        for name in self.domains:
            for slot in self.domains[name].user_slot_names:
                mentioned[name, slot] = np.concatenate(
                    [mk.get(slot, np.zeros(len(d.turns), bool)) if d.domain == name else np.zeros(len(d.turns), bool)
                     for d, mk in zip(dialogs, masks)])
        present = [name for name in self.domains
                   if any(mentioned[name, s].any() for s in self.domains[name].user_slot_names)]
        g = p.zeros_like() if need_grad else None
        dhid = np.zeros_like(hid)
        total = 0.0
        for name in present:
            slots = [s for s in self.domains[name].user_slot_names if mentioned[name, s].any()]
            for slot in slots:
                head = f"head.{name}.{slot}"
                rows = np.flatnonzero(mentioned[name, slot])
                scale = 1.0 / (len(present) * len(slots) * len(rows))
                labels = np.array([labels_of_turn[r][slot] for r in rows])
                W, b = p[head + ".weight"], p[head + ".bias"]
                logits = hid[rows] @ W.T + b
                ce, dlogits = nn.cross_entropy(logits, labels)
                total += scale * ce.sum()
                if need_grad:
                    dlogits *= scale
                    g[head + ".weight"][...] = dlogits.T @ hid[rows]
                    g[head + ".bias"][...] = dlogits.sum(axis=0)
                    dhid[rows] += dlogits @ W
        if not need_grad:
            return float(total), None
        dz = dhid * (z > 0)
        g["shared.dense.weight"][...] = dz.T @ obs
        g["shared.dense.bias"][...] = dz.sum(axis=0)
        dobs = dz @ Ws
        if dropout > 0:
            dobs = dobs * fwd["drop_o"]
        T, B = fwd["shape"]
        tb = fwd["tb"]
        dHd = np.zeros((T, B, obs.shape[1]))
        dHd[tb[:, 0], tb[:, 1]] = dobs
        dX, dW, db, _, _ = nn.lstm_sequence_backward(self._cell("dialog", p), fwd["cache_d"], dHd)
        g["dialog.weight"][...] = dW
        g["dialog.bias"][...] = db
        dutt = dX[tb[:, 0], tb[:, 1]]
        if dropout > 0:
            dutt = dutt * fwd["drop_u"]
        U = self.config.utt_hidden_width
        L = fwd["fwd_ids"].shape[0]
        N = dutt.shape[0]
        demb = np.zeros_like(p["embed"])
        for name, ids, cache, du in (("utt.fwd", fwd["fwd_ids"], fwd["cache_f"], dutt[:, :U]),
                                     ("utt.bwd", fwd["bwd_ids"], fwd["cache_b"], dutt[:, U:])):
            dH = np.zeros((L, N, U))
            dH[-1] = du
            dx, dW, db, _, _ = nn.lstm_sequence_backward(self._cell(name, p), cache, dH)
            g[name + ".weight"][...] = dW
            g[name + ".bias"][...] = db
            np.add.at(demb, ids.ravel(), dx.reshape(-1, dx.shape[-1]))
        g["embed"][...] = demb
        return float(total), g.values

    def per_slot_losses(self, dialogs: Sequence[LabeledDialog]) -> dict[tuple[str, str], float]:
        """Mean cross-entropy over mentioned turns for every (domain, slot), each computed on its own."""
        out = {}
        for name in self.domains:
            ds = [d for d in dialogs if d.domain == name]
            if not ds:
                continue
            obs = self._forward(ds, self.params, keep_cache=False)["obs"]
            probs = self.slot_probs(obs, name)
            masks = [mention_mask(d, self.domains[name]) for d in ds]
            for slot in self.domains[name].user_slot_names:
                rows = np.flatnonzero(np.concatenate([m[slot] for m in masks]))
                if rows.size == 0:
                    continue
                labels = np.array([d.labels[slot] for d in ds for _ in d.turns])[rows]
                out[(name, slot)] = float(-np.mean(np.log(probs[slot][rows, labels])))
        return out

    # -- persistence -----------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        nn.save_params(path, self.params)
        meta = {"config": asdict(self.config), "domains": [_domain_to_dict(d) for d in self.domains.values()],
                "vocab": self.vocab.itos}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "DstModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        domains = [_domain_from_dict(d) for d in meta["domains"]]
        vocab = Vocab(meta["vocab"][3:])
        return cls(domains, DstConfig(**meta["config"]), vocab=vocab, params=nn.load_params(path))


class DstLoss:
    """Adapter so the tracker loss plugs into `nn.grad`."""

    def __init__(self, model: DstModel):
        self.model = model

    def value_and_grad(self, theta: nn.ParamVector, batch):
        return self.model.loss_and_grad(batch, theta)


def _domain_to_dict(d: DomainSpec) -> dict:
    return {"name": d.name, "user_slots": [list(s) for s in d.user_slots], "system_slots": list(d.system_slots),
            "nlg_style": d.nlg_style, "value_vocab_seed": d.value_vocab_seed}


def _domain_from_dict(raw: dict) -> DomainSpec:
    return DomainSpec(raw["name"], tuple(tuple(s) for s in raw["user_slots"]), tuple(raw["system_slots"]),
                      raw["nlg_style"], raw["value_vocab_seed"])


def joint_accuracy(model: DstModel, test_set: Sequence[LabeledDialog], domain: str) -> float:
    """Fraction of dialogs whose final-turn prediction gets every slot right."""
    dialogs = [d for d in test_set if d.domain == domain]
    if not dialogs:
        raise ValueError(f"no test dialogs for domain {domain!r}")
    preds = model.predict_values(model.final_observations(dialogs), domain)
    return float(np.mean([p == d.labels for p, d in zip(preds, dialogs)]))


@dataclass
class DstTrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1


def split_validation(dialogs: Sequence[LabeledDialog], fraction: float) -> tuple[list, list]:
    n_val = int(round(len(dialogs) * fraction))
    return list(dialogs[n_val:]), list(dialogs[:n_val])


def train_dst(corpora: dict[str, Sequence[LabeledDialog]], config: DstConfig, rng: np.random.Generator,
              domains: Sequence[DomainSpec] | None = None) -> tuple[DstModel, DstTrainLog]:
    """Mini-batch Adam on the multi-domain loss; returns the best-validation model.

    Model selection maximises mean validation joint accuracy; ties (common once small validation
    sets saturate) go to the lower validation loss.
    """
    if not corpora or any(len(v) == 0 for v in corpora.values()):
        raise ValueError("every domain needs at least one training dialog")
    domains = list(domains) if domains is not None else [get_domain(n) for n in corpora]
    model = DstModel(domains, config, rng=rng)
    by_name = {d.name: d for d in domains}
    train, val = [], []
    for name, dialogs in corpora.items():
        tr, va = split_validation(dialogs, config.val_fraction)
        train += tr
        val += va or tr[:1]
    opt = nn.Adam(len(model.params), lr=config.learning_rate, weight_decay=config.weight_decay)
    log_ = DstTrainLog()
    best_key, best_values = (-1.0, -np.inf), model.params.values.copy()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            if config.augment > 0:
                batch = [relabel(d, by_name[d.domain], rng) if rng.random() < config.augment else d
                         for d in batch]
            loss, g = model.loss_and_grad(batch, dropout=config.dropout, rng=rng)
            if not np.isfinite(loss):
                raise nn.NumericError(f"non-finite DST loss at epoch {epoch}")
            opt.step(model.params.values, g)
            losses.append(loss)
        acc = float(np.mean([joint_accuracy(model, val, name) for name in corpora]))
        log_.epoch_losses.append(float(np.mean(losses)))
        val_loss = model.loss_and_grad(val, need_grad=False)[0]
        log_.val_accuracy.append(acc)
        log_.val_losses.append(float(val_loss))
        log.info("dst epoch %d loss %.4f val joint acc %.3f val loss %.4f", epoch, log_.epoch_losses[-1], acc,
                 val_loss)
        if (acc, -val_loss) > best_key:
            best_key, best_values, log_.best_epoch = (acc, -val_loss), model.params.values.copy(), epoch
    model.params.values[:] = best_values
    model._utt_cache.clear()
    return model, log_
