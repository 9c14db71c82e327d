import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgeline import policy as P
from forgeline import tensorstore as ts
from forgeline.errors import EmptyDataset, UnknownToken, ValidationError
from forgeline.gateway import EndpointConfig, MockClient
from forgeline.records import PreferencePair, SftRecord

from .oracles import (
    central_difference,
    logprob_stepwise,
    prob_contains_by_enumeration,
    relative_error,
    softmax_row,
)


def _vocab(v):
    return P.Vocab(("<bos>", "<eos>") + tuple(f"w{i}" for i in range(v - 2)), unk=None)


def _random_policy(v, rng, scale=1.0):
    return P.TabularPolicy(rng.normal(scale=scale, size=(v, v)), _vocab(v))


def _random_seqs(v, rng, count, max_len=5):
    return [rng.integers(1, v, size=rng.integers(1, max_len + 1)).tolist() for _ in range(count)]


def _random_pairs(v, rng, count):
    out = []
    while len(out) < count:
        a, b = _random_seqs(v, rng, 2)
        if a != b:
            out.append(P.PairIds(a, b))
    return out


# -- vocab and log-probs ----------------------------------------------------


def test_vocab():
    voc = P.Vocab.toy()
    assert voc.tokens[:3] == ("<bos>", "<eos>", "<unk>")
    ids = voc.encode("كتب zzz")
    assert ids == [voc.tokens.index("كتب"), voc.unk, voc.eos]
    assert voc.decode(ids) == "كتب <unk>"
    with pytest.raises(UnknownToken):
        _vocab(4).encode("nope")
    with pytest.raises(ValidationError):
        P.Vocab(("a",))
    with pytest.raises(ValidationError):
        P.Vocab(("a", "a"))
    with pytest.raises(ValidationError):
        P.Vocab(("a", "b"), bos=0, eos=0, unk=None)


def test_uniform_logprob():
    pol = P.TabularPolicy.uniform(_vocab(4))
    assert P.sequence_logprob(pol, [2, 3, 1]) == pytest.approx(3 * math.log(1 / 4), abs=1e-15)
    assert P.sequence_logprob(pol, [1]) == pytest.approx(math.log(1 / 4), abs=1e-15)
    with pytest.raises(ValidationError):
        P.sequence_logprob(pol, [])
    with pytest.raises(UnknownToken):
        P.sequence_logprob(pol, [7])


def test_logprob_matches_stepwise_oracle():
    rng = np.random.default_rng(0)
    for v in (4, 8, 13):
        pol = _random_policy(v, rng, scale=3.0)
        for seq in _random_seqs(v, rng, 20, 10):
            want = logprob_stepwise(pol.logits.tolist(), seq, pol.vocab.bos)
            assert abs(P.sequence_logprob(pol, seq) - want) <= 1e-12


def test_policy_invariants():
    with pytest.raises(ValidationError):
        P.TabularPolicy(np.zeros((3, 3)), _vocab(4))
    bad = np.zeros((4, 4))
    bad[1, 1] = np.inf
    with pytest.raises(ValidationError):
        P.TabularPolicy(bad, _vocab(4))
    with pytest.raises(ValidationError):
        P.DpoConfig(beta=0)


# -- SFT --------------------------------------------------------------------


def test_sft_descends():
    voc = _vocab(6)
    pol = P.TabularPolicy.uniform(voc)
    seqs = [[2, 3, 4, 1]] * 3
    losses = [P.sft_epoch(pol, seqs, 0.5) for _ in range(200)]
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_sft_on_records_and_empty():
    voc = P.Vocab.from_words(["a", "b"])
    pol = P.TabularPolicy.uniform(voc)
    rec = SftRecord("p", "a b", 1.0, "t")
    first = P.sft_epoch(pol, [rec], 0.5)
    assert first == pytest.approx(3 * math.log(len(voc)))
    with pytest.raises(EmptyDataset):
        P.sft_epoch(pol, [], 0.5)


@pytest.mark.parametrize("v", [4, 8])
def test_sft_gradient_finite_difference(v):
    rng = np.random.default_rng(v)
    pol = _random_policy(v, rng)
    seqs = _random_seqs(v, rng, 6)
    _, grad = P.sft_loss_and_grad(pol, seqs)

    def f(x):
        return P.sft_loss_and_grad(P.TabularPolicy(x, pol.vocab), seqs)[0]

    assert relative_error(grad, central_difference(f, pol.logits.copy())) <= 1e-5


# -- DPO --------------------------------------------------------------------


def test_dpo_at_reference_is_ln2():
    rng = np.random.default_rng(1)
    for v in (4, 8):
        pol = _random_policy(v, rng)
        for pair in _random_pairs(v, rng, 5):
            assert abs(P.dpo_loss(pol, pol.copy(), pair, 0.1) - math.log(2)) <= 1e-12


def test_dpo_compositional_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = int(rng.integers(3, 9))
        pol, ref = _random_policy(v, rng), _random_policy(v, rng)
        pair = _random_pairs(v, rng, 1)[0]
        beta = float(rng.uniform(0.05, 2))
        lp = lambda p, s: logprob_stepwise(p.logits.tolist(), list(s), 0)  # noqa: E731
        z = beta * ((lp(pol, pair.chosen) - lp(ref, pair.chosen)) - (lp(pol, pair.rejected) - lp(ref, pair.rejected)))
        want = -math.log(1 / (1 + math.exp(-z)))
        assert abs(P.dpo_loss(pol, ref, pair, beta) - want) <= 1e-12


def test_dpo_loss_decreases_when_chosen_more_likely():
    voc = _vocab(5)
    ref = P.TabularPolicy.uniform(voc)
    pair = P.PairIds([2, 3, 1], [4, 1])
    pol = ref.copy()
    before = P.dpo_loss(pol, ref, pair, 0.5)
    pol.logits[3, 1] += 1.0  # only the chosen path uses this transition
    assert P.dpo_loss(pol, ref, pair, 0.5) < before


@pytest.mark.parametrize("v", [4, 8])
def test_dpo_gradient_finite_difference(v):
    rng = np.random.default_rng(10 + v)
    pol, ref = _random_policy(v, rng), _random_policy(v, rng)
    pairs = _random_pairs(v, rng, 5)
    _, grad, _ = P.dpo_loss_and_grad(pol, ref, pairs, 0.7)

    def f(x):
        return P.dpo_loss_and_grad(P.TabularPolicy(x, pol.vocab), ref, pairs, 0.7)[0]

    assert relative_error(grad, central_difference(f, pol.logits.copy())) <= 1e-5


def test_dpo_margin_grows_monotonically():
    voc = _vocab(6)
    ref = P.TabularPolicy.uniform(voc)
    pol = ref.copy()
    pair = P.PairIds([2, 3, 1], [4, 5, 1])
    cfg = P.DpoConfig(beta=0.5, learning_rate=0.5)
    margins = []
    for _ in range(100):
        P.dpo_epoch(pol, ref, [pair], cfg)
        margins.append(float(P.dpo_loss_and_grad(pol, ref, [pair], cfg.beta)[2][0]))
    assert all(b > a for a, b in zip(margins, margins[1:]))


def test_lr_zero_is_identity():
    rng = np.random.default_rng(4)
    pol, ref = _random_policy(6, rng), _random_policy(6, rng)
    before = pol.logits.copy()
    P.dpo_epoch(pol, ref, _random_pairs(6, rng, 3), P.DpoConfig(learning_rate=0.0))
    assert before.tobytes() == pol.logits.tobytes()
    with pytest.raises(EmptyDataset):
        P.dpo_epoch(pol, ref, [], P.DpoConfig())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50), st.integers(0, 5))
def test_dpo_row_shift_invariance(seed, shift, row):
    rng = np.random.default_rng(seed)
    pol, ref = _random_policy(6, rng), _random_policy(6, rng)
    pair = _random_pairs(6, rng, 1)[0]
    base = P.dpo_loss(pol, ref, pair, 0.3)
    pol.logits[row] += shift
    ref.logits[row] += shift
    assert base > 0
    assert abs(P.dpo_loss(pol, ref, pair, 0.3) - base) <= 1e-12


def test_encode_pairs_drops_collapsed():
    voc = P.Vocab.from_words(["a"])
    pairs = [PreferencePair("p", "x", "y", 0.5), PreferencePair("p", "a", "y", 0.5)]
    assert P.encode_pairs(voc, pairs) == [P.PairIds([3, 1], [2, 1])]


# -- decoding ---------------------------------------------------------------


def test_sampling_never_emits_bos_or_empty():
    rng = np.random.default_rng(5)
    pol = _random_policy(5, rng, scale=2)
    pol.logits[0, 1] = 10  # eos strongly preferred after bos
    g = np.random.default_rng(0)
    for _ in range(300):
        ids = P.sample_ids(pol, g, max_len=6)
        assert 1 <= len(ids) <= 6 and 0 not in ids and 1 not in ids


@pytest.mark.parametrize("token", [2, 3, 4])
@pytest.mark.parametrize("max_len", [1, 2, 5])
def test_prob_contains_matches_enumeration(token, max_len):
    rng = np.random.default_rng(token * 10 + max_len)
    pol = _random_policy(5, rng, scale=1.5)
    want = prob_contains_by_enumeration(pol.probs().tolist(), 0, 1, token, max_len)
    assert P.prob_contains(pol, token, max_len) == pytest.approx(want, abs=1e-12)


def test_prob_contains_matches_sampling():
    rng = np.random.default_rng(8)
    pol = _random_policy(6, rng)
    p = P.prob_contains(pol, 3, 8)
    g = np.random.default_rng(1)
    trials = 4000
    hits = sum(3 in P.sample_ids(pol, g, 8) for _ in range(trials))
    assert abs(hits / trials - p) <= 4 * math.sqrt(p * (1 - p) / trials)


# -- snapshots --------------------------------------------------------------


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    voc = P.Vocab.toy()
    pol = P.TabularPolicy(rng.normal(size=(len(voc), len(voc))).astype(np.float32), voc)
    path = P.save_snapshot(pol, tmp_path / "a.safetensors", stage="sft")
    back = P.load_snapshot(path)
    assert back.vocab == voc
    assert back.logits.tobytes() == pol.logits.tobytes()
    assert ts.read_manifest(path).metadata["stage"] == "sft"
    assert ts.read_manifest(path).entries["logits"].dtype is ts.DType.F32


def test_snapshot_identity_merge(tmp_path):
    rng = np.random.default_rng(7)
    voc = _vocab(6)
    a = P.save_snapshot(P.TabularPolicy(rng.normal(size=(6, 6)).astype(np.float32), voc), tmp_path / "a")
    b = P.save_snapshot(P.TabularPolicy(rng.normal(size=(6, 6)).astype(np.float32), voc), tmp_path / "b")
    ts.merge_linear(ts.MergeRecipe(((a, 1.0), (b, 0.0))), tmp_path / "m")
    assert P.load_snapshot(tmp_path / "m").logits.tobytes() == P.load_snapshot(a).logits.tobytes()


def test_snapshot_rejects_foreign_checkpoint(tmp_path):
    p = ts.write_checkpoint(tmp_path / "x", [ts.TensorView.from_array("logits", np.zeros((2, 2)))])
    with pytest.raises(ValidationError):
        P.load_snapshot(p)


# -- iterative --------------------------------------------------------------

TARGET = "شكرا"


def _iterative(rounds, seed=0):
    voc = P.Vocab.toy()
    pol = P.TabularPolicy.uniform(voc)
    reward = MockClient(EndpointConfig(f"mock://reward?reward=contains:{TARGET}"))
    cfg = P.DpoConfig(beta=0.5, learning_rate=2.0, epochs=5, seed=seed)
    prompts = [f"p{i}" for i in range(8)]
    return P.iterative_dpo(pol, pol.copy(), prompts, reward, rounds, cfg, n=8)


def test_iterative_dpo_raises_target_probability():
    voc = P.Vocab.toy()
    t = voc.tokens.index(TARGET)
    before = P.prob_contains(P.TabularPolicy.uniform(voc), t)
    pol, metrics = _iterative(3)
    assert [m.round for m in metrics] == [0, 1, 2]
    assert P.prob_contains(pol, t) > before
    assert metrics[-1].mean_reward >= metrics[0].mean_reward


def test_iterative_is_deterministic():
    a, ma = _iterative(2, seed=3)
    b, mb = _iterative(2, seed=3)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert [m.to_dict() for m in ma] == [m.to_dict() for m in mb]


def test_one_round_equals_offline_cycle():
    voc = P.Vocab.toy()
    start = P.TabularPolicy.uniform(voc)
    reward = MockClient(EndpointConfig(f"mock://reward?reward=contains:{TARGET}"))
    cfg = P.DpoConfig(beta=0.5, learning_rate=2.0, epochs=4, seed=9)
    prompts = ["a", "b", "c"]
    it, _ = P.iterative_dpo(start.copy(), start.copy(), prompts, reward, 1, cfg, n=6)

    pairs, _ = P.collect_pairs(start, prompts, reward, 6, cfg.seed * 1_000_003, 0.05)
    offline, ref = start.copy(), start.copy()
    ids = P.encode_pairs(voc, pairs)
    for _ in range(cfg.epochs):
        P.dpo_epoch(offline, ref, ids, cfg)
    assert it.logits.tobytes() == offline.logits.tobytes()


def test_round_without_pairs_is_reported():
    voc = P.Vocab.toy()
    pol = P.TabularPolicy.uniform(voc)
    reward = MockClient(EndpointConfig("mock://reward?reward=contains:absent-token"))
    _, metrics = P.iterative_dpo(pol, pol.copy(), ["a"], reward, 2, P.DpoConfig(), n=4)
    assert all(m.no_pairs and m.pairs == 0 and m.mean_loss is None for m in metrics)
    with pytest.raises(ValidationError):
        P.iterative_dpo(pol, pol.copy(), ["a"], reward, 0, P.DpoConfig())
