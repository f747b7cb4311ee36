import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdrl import nn
from mdrl.dst import (DstConfig, DstModel, LabeledDialog, generate_corpus, joint_accuracy, mention_mask, read_corpus,
                      relabel, train_dst, write_corpus)
from mdrl.env import get_domain, micro_domain
from mdrl.nlg import value_token

from conftest import TINY_DST


def _sample(domain, n, seed, noise=0.2):
    return generate_corpus(domain, n, noise, np.random.default_rng(seed))


def _jittered(model):
    """Same architecture, parameters nudged off zero so no ReLU sits exactly on its kink."""
    p = model.params.copy()
    p.values += 0.05 * np.random.default_rng(11).normal(size=len(p))
    return DstModel(list(model.domains.values()), model.config, vocab=model.vocab, params=p)


def _full_gradient_check(model, dialogs, dropout=0.0, seed=0):
    model = _jittered(model)
    def f(v):
        kw = dict(dropout=dropout, rng=np.random.default_rng(seed)) if dropout else {}
        return model.loss_and_grad(dialogs, model.params.like(v), need_grad=False, **kw)[0]

    kw = dict(dropout=dropout, rng=np.random.default_rng(seed)) if dropout else {}
    _, g = model.loss_and_grad(dialogs, **kw)
    # embedding rows of tokens absent from the batch must have an exactly zero gradient;
    # every other coordinate is checked numerically
    used = {i for x in dialogs for turn in x.turns for i in model.vocab.encode(turn)}
    span = model.params.span("embed")
    unused = np.zeros(len(model.params), dtype=bool)
    unused[span] = np.isin(np.arange(span.stop - span.start) // model.params["embed"].shape[1], list(used),
                           invert=True)
    assert np.all(g[unused] == 0)
    coords = np.flatnonzero(~unused)
    num = nn.numeric_grad(f, model.params.values, coords=coords)
    return nn.max_relative_error(g[coords], num[coords])


def test_full_tracker_gradient(tiny_dst):
    dialogs = _sample(micro_domain(), 2, 0) + _sample(get_domain("rest"), 2, 1)
    assert _full_gradient_check(tiny_dst, dialogs) <= 1e-4


def test_full_tracker_gradient_with_dropout(tiny_dst):
    dialogs = _sample(micro_domain(), 2, 3) + _sample(get_domain("rest"), 1, 4)
    assert _full_gradient_check(tiny_dst, dialogs, dropout=0.3, seed=9) <= 1e-4


def test_corpus_labels_are_the_goal_and_roundtrip(tmp_path):
    d = get_domain("weather")
    dialogs = _sample(d, 20, 0)
    assert all(set(x.labels) == set(d.user_slot_names) for x in dialogs)
    assert all(x.domain == "weather" for x in dialogs)
    write_corpus(tmp_path / "c.jsonl", dialogs)
    assert read_corpus(tmp_path / "c.jsonl") == dialogs


def test_noise_free_corpus_mentions_the_true_values():
    d = get_domain("rest")
    for x in _sample(d, 30, 1, noise=0.0):
        tokens = {t for turn in x.turns for t in turn}
        for slot, v in x.labels.items():
            if mention_mask(x, d)[slot][-1]:
                assert value_token(d, slot, v) in tokens


def test_mention_mask_is_monotone():
    d = get_domain("bus")
    for x in _sample(d, 20, 2):
        for m in mention_mask(x, d).values():
            assert np.all(np.diff(m.astype(int)) >= 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_relabel_is_a_consistent_value_permutation(seed):
    d = get_domain("movie")
    x = _sample(d, 1, seed % 1000)[0]
    y = relabel(x, d, np.random.default_rng(seed))
    assert len(y.turns) == len(x.turns)
    assert all(len(a) == len(b) for a, b in zip(x.turns, y.turns))
    for slot, k in d.user_slots:
        old = {value_token(d, slot, v): v for v in range(k)}
        pairs = {(old[a], old[b]) for ta, tb in zip(x.turns, y.turns) for a, b in zip(ta, tb) if a in old}
        # each old value maps to exactly one new value, injectively
        assert len({a for a, _ in pairs}) == len(pairs) == len({b for _, b in pairs})
        assert all((x.labels[slot], y.labels[slot]) == p for p in pairs if p[0] == x.labels[slot])
    for ta, tb in zip(x.turns, y.turns):
        for a, b in zip(ta, tb):
            if "=" not in a or a.split("=")[0] not in d.user_slot_names:
                assert a == b


def test_predict_and_observation_shapes(tiny_dst):
    x = _sample(get_domain("rest"), 3, 5)
    obs = tiny_dst.dialog_observations(x[0])
    assert obs.shape == (len(x[0].turns), tiny_dst.observation_width)
    final = tiny_dst.final_observations(x)
    assert np.allclose(final[0], obs[-1])
    belief = tiny_dst.predict_slots(final[0], "rest")
    assert set(belief.slots) == {"loc", "food"}
    assert all(0 <= p <= 1 for _, p in belief.slots.values())
    assert tiny_dst.predict_values(final, "rest")[0] == belief.values()
    with pytest.raises(KeyError):
        tiny_dst.head_names("bus")


def test_turn_by_turn_encoding_matches_batch(tiny_dst):
    x = _sample(micro_domain(), 1, 6)[0]
    hidden = None
    for tokens in x.turns:
        obs, hidden = tiny_dst.encode_turn(tokens, hidden)
    assert np.allclose(obs, tiny_dst.final_observations([x])[0])


def test_save_load_roundtrip(tmp_path, tiny_dst):
    tiny_dst.save(tmp_path / "dst.ckpt")
    back = DstModel.load(tmp_path / "dst.ckpt")
    assert np.array_equal(back.params.values, tiny_dst.params.values)
    assert back.vocab.itos == tiny_dst.vocab.itos and list(back.domains) == list(tiny_dst.domains)


def test_layout_mismatch_is_a_configuration_error(tiny_dst):
    with pytest.raises(nn.ConfigurationError):
        DstModel([get_domain("bus")], TINY_DST, params=tiny_dst.params)


def test_training_fits_the_micro_domain():
    d = micro_domain()
    r = np.random.default_rng(0)
    train, test = generate_corpus(d, 60, 0.0, r), generate_corpus(d, 40, 0.0, r)
    model, log = train_dst({"micro": train}, DstConfig(word_emb_width=8, utt_hidden_width=8, dialog_hidden_width=8,
                                                      shared_dense_width=8, epochs=8), r, domains=[d])
    assert log.epoch_losses[-1] < log.epoch_losses[0]
    assert joint_accuracy(model, test, "micro") >= 0.9
    assert 0 <= log.best_epoch < 8
    # selection: best validation accuracy, ties to the lower validation loss
    keys = list(zip(log.val_accuracy, [-v for v in log.val_losses]))
    assert keys[log.best_epoch] == max(keys)


def test_training_rejects_empty_corpora():
    with pytest.raises(ValueError):
        train_dst({"micro": []}, DstConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate_corpus(micro_domain(), 0, 0.0, np.random.default_rng(0))


def test_joint_accuracy_needs_domain_dialogs(tiny_dst):
    with pytest.raises(ValueError):
        joint_accuracy(tiny_dst, [LabeledDialog("rest", [["hi"]], {"loc": 0, "food": 0})], "micro")
