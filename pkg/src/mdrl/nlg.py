"""Template rendering of dialog acts into token streams, and the shared vocabulary."""

from __future__ import annotations

from typing import Iterable, Sequence

from .env import ANSWER_CARDINALITY, DialogAct, DomainSpec, SYSTEM, USER

PAD, UNK, EMPTY = "<pad>", "<unk>", "<empty>"
SLOT, VALUE = "{slot}", "{value}"

# (actor, act) -> template. Two styles with disjoint function words.
TEMPLATES: dict[str, dict[tuple[str, str], tuple[str, ...]]] = {
    "plain": {
        (SYSTEM, "greet"): ("hello", "how", "can", "i", "help", "?"),
        (SYSTEM, "request"): ("what", SLOT, "do", "you", "want", "?"),
        (SYSTEM, "confirm"): ("do", "you", "mean", SLOT, VALUE, "?"),
        (SYSTEM, "inform"): ("the", SLOT, "is", VALUE, "."),
        (SYSTEM, "goodbye"): ("goodbye", "."),
        (USER, "greet"): ("hi", "."),
        (USER, "request"): ("i", "need", "the", SLOT, "."),
        (USER, "inform"): ("my", SLOT, "is", VALUE, "."),
        (USER, "affirm"): ("yes", SLOT, "is", "right", "."),
        (USER, "deny"): ("no", SLOT, "is", "wrong", "."),
        (USER, "goodbye"): ("bye", "."),
    },
    "formal": {
        (SYSTEM, "greet"): ("good", "day", "may", "we", "assist", "!"),
        (SYSTEM, "request"): ("kindly", "state", "your", "preferred", SLOT, "!"),
        (SYSTEM, "confirm"): ("shall", "we", "take", SLOT, "as", VALUE, "!"),
        (SYSTEM, "inform"): ("we", "find", SLOT, "equals", VALUE, "!"),
        (SYSTEM, "goodbye"): ("farewell", "!"),
        (USER, "greet"): ("greetings", "!"),
        (USER, "request"): ("please", "provide", "me", SLOT, "!"),
        (USER, "inform"): ("regarding", SLOT, "it", "shall", "be", VALUE, "!"),
        (USER, "affirm"): ("indeed", SLOT, "correct", "!"),
        (USER, "deny"): ("negative", SLOT, "incorrect", "!"),
        (USER, "goodbye"): ("regards", "!"),
    },
}


def value_token(domain: DomainSpec, slot: str, value: int) -> str:
    if slot in domain.system_slots:
        return f"{slot}=a{value}"
    return f"{slot}=v{domain.value_vocab_seed}_{value}"


def render_utterance(act: DialogAct, style: str, domain: DomainSpec) -> list[str]:
    try:
        template = TEMPLATES[style][(act.actor, act.act)]
    except KeyError:
        raise KeyError(f"no template for style {style!r} and act {act.actor}:{act.act}") from None
    out = []
    for tok in template:
        if tok == SLOT:
            out.append(act.slot if act.slot is not None else "none")
        elif tok == VALUE:
            out.append(value_token(domain, act.slot, act.value) if act.value is not None else "none")
        else:
            out.append(tok)
    return out


def render_turn(acts: Iterable[DialogAct], domain: DomainSpec) -> list[str]:
    return [tok for a in acts for tok in render_utterance(a, domain.nlg_style, domain)]


def turn_tokens(system: DialogAct, user: Sequence[DialogAct], domain: DomainSpec) -> list[str]:
    """DST input for one turn: previous system utterance followed by the user utterance."""
    return render_turn([system], domain) + render_turn(user, domain)


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.itos = [PAD, UNK, EMPTY]
        seen = set(self.itos)
        for t in tokens:
            if t not in seen:
                seen.add(t)
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        if not tokens:
            return [self.stoi[EMPTY]]
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]


def build_vocab(domains: Iterable[DomainSpec]) -> Vocab:
    tokens = ["none"]
    for style in sorted(TEMPLATES):
        for template in TEMPLATES[style].values():
            tokens += [t for t in template if t not in (SLOT, VALUE)]
    for d in domains:
        for slot, k in d.user_slots:
            tokens.append(slot)
            tokens += [value_token(d, slot, v) for v in range(k)]
        for slot in d.system_slots:
            tokens.append(slot)
            tokens += [value_token(d, slot, v) for v in range(ANSWER_CARDINALITY)]
    return Vocab(tokens)
