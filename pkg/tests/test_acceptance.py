"""Exit criteria for the primary component.

Each test carries an ``acceptance`` marker; conftest prints one PASS/FAIL
line per criterion at the end of the run.
"""

import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from forgeline import _pykernels
from forgeline import arbitrage as A
from forgeline import constraints as C
from forgeline import evaluation as E
from forgeline import kernels
from forgeline import policy as P
from forgeline import refinement as R
from forgeline import tensorstore as ts
from forgeline import toy
from forgeline.cli import main
from forgeline.gateway import EndpointConfig, MockClient

from .conftest import _ckernels
from .oracles import (
    brute_force_pair,
    central_difference,
    count_diacritics_by_codepoint,
    merge_scalar,
    prob_contains_by_enumeration,
    relative_error,
    ulp_distance_f32,
)
FIXTURES = Path(__file__).parent / "fixtures"


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def _use_backend(monkeypatch, impl):
    for name in ("accumulate", "f64_to_bf16", "bf16_to_f32", "transition_counts"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    monkeypatch.setattr(kernels, "BACKEND", impl.BACKEND)


def _impls():
    return [m for m in (_ckernels, _pykernels) if m is not None]


# -- 1. merge ---------------------------------------------------------------


@pytest.mark.acceptance("merge correctness: 1 ulp vs scalar oracle, identity bitwise, IO round trip, < 5 s")
def test_merge_correctness(tmp_path, monkeypatch):
    rng = np.random.default_rng(2024)
    names = [f"layer{i:02d}.w" for i in range(10)]
    experts = []
    for _ in range(3):
        experts.append({n: rng.normal(scale=3.0, size=int(rng.integers(1, 10_001))).astype(np.float32)
                        if not experts else
                        rng.normal(scale=3.0, size=experts[0][n].shape).astype(np.float32)
                        for n in names})
    for impl in _impls():
        _use_backend(monkeypatch, impl)
        d = tmp_path / impl.BACKEND
        d.mkdir()
        with Stopwatch() as sw:
            paths = []
            for i, arrays in enumerate(experts):
                views = [ts.TensorView.from_array(n, a) for n, a in arrays.items()]
                paths.append(ts.write_checkpoint(d / f"e{i}.safetensors", views))
            ts.merge_linear(ts.MergeRecipe.equal(paths), d / "eq.safetensors")
            ts.merge_linear(ts.MergeRecipe(((paths[0], 1.0), (paths[1], 0.0), (paths[2], 0.0))),
                            d / "id.safetensors")
            merged, _ = ts.read_checkpoint(d / "eq.safetensors")
            identity, _ = ts.read_checkpoint(d / "id.safetensors")
            back, _ = ts.read_checkpoint(paths[0])
        assert sw.elapsed < 5.0, f"{impl.BACKEND}: {sw.elapsed:.2f}s"

        merged = {t.name: t for t in merged}
        for n in names:
            want = np.array(merge_scalar([e[n] for e in experts], [1 / 3] * 3), dtype=np.float32)
            assert ulp_distance_f32(merged[n].to_array().reshape(-1), want).max() <= 1, n
        first = {t.name: t.data for t in back}
        assert {t.name: t.data for t in identity} == first
        assert first == {n: a.tobytes() for n, a in experts[0].items()}


# -- 2. DPO numerics --------------------------------------------------------


def _vocab(v):
    return P.Vocab(("<bos>", "<eos>") + tuple(f"w{i}" for i in range(v - 2)), unk=None)


def _seqs(v, rng, count):
    return [rng.integers(1, v, size=rng.integers(1, 6)).tolist() for _ in range(count)]


def _pairs(v, rng, count):
    out = []
    while len(out) < count:
        a, b = _seqs(v, rng, 2)
        if a != b:
            out.append(P.PairIds(a, b))
    return out


@pytest.mark.acceptance("DPO numerics: ln 2 at reference, SFT and DPO gradients vs finite differences, < 10 s")
def test_dpo_numerics():
    rng = np.random.default_rng(7)
    worst = 0.0
    with Stopwatch() as sw:
        for _ in range(20):
            voc = _vocab(8)
            pol = P.TabularPolicy(rng.normal(size=(8, 8)), voc)
            ref = P.TabularPolicy(rng.normal(size=(8, 8)), voc)
            pairs = _pairs(8, rng, 4)
            seqs = _seqs(8, rng, 4)
            for pair in pairs:
                assert abs(P.dpo_loss(pol, pol.copy(), pair, 0.1) - math.log(2)) <= 1e-12

            _, g_dpo, _ = P.dpo_loss_and_grad(pol, ref, pairs, 0.5)
            fd_dpo = central_difference(
                lambda x: P.dpo_loss_and_grad(P.TabularPolicy(x, voc), ref, pairs, 0.5)[0], pol.logits.copy())
            _, g_sft = P.sft_loss_and_grad(pol, seqs)
            fd_sft = central_difference(
                lambda x: P.sft_loss_and_grad(P.TabularPolicy(x, voc), seqs)[0], pol.logits.copy())
            worst = max(worst, relative_error(g_dpo, fd_dpo), relative_error(g_sft, fd_sft))
    assert worst <= 1e-5, worst
    assert sw.elapsed < 10.0, sw.elapsed


# -- 3. iterative improvement -----------------------------------------------

TARGET = "شكرا"


@pytest.mark.acceptance("iterative DPO: 3 rounds raise the exact probability of the rewarded token, < 60 s")
def test_iterative_improvement():
    voc = P.Vocab.toy()
    t = voc.tokens.index(TARGET)
    start = P.TabularPolicy.uniform(voc)
    reward = MockClient(EndpointConfig(f"mock://reward?reward=contains:{TARGET}"))
    cfg = P.DpoConfig(beta=0.5, learning_rate=2.0, epochs=5, seed=0)
    with Stopwatch() as sw:
        final, metrics = P.iterative_dpo(start.copy(), start.copy(), [f"p{i}" for i in range(8)], reward, 3, cfg, n=8)
    assert len(metrics) == 3
    assert sw.elapsed < 60.0, sw.elapsed

    # short horizon: the recursion agrees with brute-force enumeration
    before = prob_contains_by_enumeration(start.probs().tolist(), voc.bos, voc.eos, t, 4)
    after = prob_contains_by_enumeration(final.probs().tolist(), voc.bos, voc.eos, t, 4)
    assert P.prob_contains(start, t, 4) == pytest.approx(before, abs=1e-12)
    assert P.prob_contains(final, t, 4) == pytest.approx(after, abs=1e-12)
    assert after > before
    assert P.prob_contains(final, t) > P.prob_contains(start, t)


# -- 4. pair construction ---------------------------------------------------


@pytest.mark.acceptance("pair construction matches the O(n^2) oracle on 1000 random sets")
def test_pair_oracle():
    rng = random.Random(1000)
    for _ in range(1000):
        n = rng.randint(1, 8)
        rewards = [rng.choice([0.0, 0.5, 1.0, rng.random()]) for _ in range(n)]
        passing = [rng.random() < 0.8 for _ in range(n)]
        texts = [f"t{i}" for i in range(n)]
        cs = A.CompletionSet("p", tuple(A.ScoredCompletion(x, r, ok) for x, r, ok in zip(texts, rewards, passing)))
        got = A.build_preference_pair(cs, 0.0)
        best = brute_force_pair(rewards, passing, texts)
        want = None
        if best is not None and sum(passing) >= 2 and best[0] > 0:
            _, i, j = best
            want = (texts[i], texts[j], rewards[i] - rewards[j])
        assert (got and (got.chosen, got.rejected, got.margin)) == (want or None)


# -- 5. constraint checkers -------------------------------------------------


@pytest.mark.acceptance("constraint checkers: diacritic corpus, Arabic comma, strict <= loose")
def test_constraint_checkers():
    corpus = [json.loads(line)["text"] for line in (FIXTURES / "arabic_corpus.jsonl").read_text("utf-8").splitlines()]
    assert len(corpus) == 50
    assert [C.count_diacritics(s) for s in corpus] == [count_diacritics_by_codepoint(s) for s in corpus]
    assert not C.check(C.NoCommas(), "قرأت الكتاب، ثم نمت").passed
    rows = [json.loads(line) for line in (FIXTURES / "ifeval_relaxation.jsonl").read_text("utf-8").splitlines()]
    for r in rows:
        item = E.InstructionItem(r["id"], r["prompt"], tuple(C.spec_from_dict(c) for c in r["constraints"]))
        res = E.run_ifeval([item], lambda p, resp=r["response"]: resp)
        assert res.strict <= res.loose


# -- 6. arena ---------------------------------------------------------------


@pytest.mark.acceptance("arena: identical answerers 0.500, fixture {win, win, tie, loss} 0.625")
def test_arena_symmetry():
    items = [E.ArenaItem(f"a{i}", f"prompt {i}") for i in range(4)]
    for rule in ("prefer_longer", "prefer_first", "always_tie", "prefer_contains:x"):
        ans = lambda p: p + " x"  # noqa: E731
        assert E.run_arena(items, ans, ans, MockClient(pair=rule)).win_rate == 0.5
    a = {"prompt 0": "long answer", "prompt 1": "long answer", "prompt 2": "same", "prompt 3": "s"}
    b = {"prompt 0": "s", "prompt 1": "s", "prompt 2": "same", "prompt 3": "long answer"}
    assert E.run_arena(items, a.__getitem__, b.__getitem__, MockClient(pair="prefer_longer")).win_rate == 0.625


# -- 7. aggregation ---------------------------------------------------------


@pytest.mark.acceptance("aggregation: {82.2, 60.9, 69.0, 83.0, 51.6} averages to 69.34")
def test_aggregation_fixture():
    r = E.aggregate({"t1": 82.2, "t2": 60.9, "t3": 69.0, "t4": 83.0, "t5": 51.6})
    assert r.average == pytest.approx(69.34, abs=1e-9)
    assert f"{r.average:.1f}" == "69.3"


# -- 8. refinement campaign -------------------------------------------------


@pytest.mark.acceptance("refinement campaign: only the planted good candidate accepted, chain verifies, replay matches, < 120 s")
def test_refinement_campaign(tmp_path):
    refs = {}
    for name in ("base", "good", "bad"):
        p = tmp_path / f"{name}.jsonl"
        p.write_bytes((FIXTURES / "campaign" / f"{name}.jsonl").read_bytes())
        refs[name] = R.DatasetRef.load(p)
    suite = E.Suite.load(toy.write_suite(tmp_path / "suite"))
    cfg = R.CampaignConfig(suite.critical_capabilities, epsilon=0.5, max_refinement_rounds=0)
    with Stopwatch() as sw:
        final, ledger = R.run_campaign([refs["base"]], [refs["good"], refs["bad"]], R.ToyTrainer(tmp_path / "snaps"),
                                       R.SuiteHarness(suite, seed=0), cfg, R.Ledger(tmp_path / "ledger.jsonl"))
    assert sw.elapsed < 120.0, sw.elapsed
    assert {r.id for r in final.components} == {"base", "good"}
    assert [(e["candidate_id"], e["decision"]) for e in ledger.entries] == [("good", "accept"), ("bad", "reject")]
    R.Ledger(tmp_path / "ledger.jsonl").verify()
    reloaded = R.Ledger(tmp_path / "ledger.jsonl")
    assert R.replay_mixture_hash(reloaded.entries, [refs["base"]]) == final.mixture_hash


# -- 9. end-to-end ----------------------------------------------------------


@pytest.mark.acceptance("end-to-end mock pipeline: 3 merged snapshots, final beats base, bit-identical manifest")
def test_end_to_end_pipeline(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("FORGELINE_MOCK", raising=False)
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert main(["pipeline", "--mock", "--seed", "0", "--out", str(tmp_path / "a")]) == 0
    assert main(["pipeline", "--mock", "--seed", "0", "--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text("utf-8"))
    merged = [s["merged"] for s in manifest["stages"]]
    assert [s["name"] for s in manifest["stages"]] == ["sft", "offline-dpo", "iterative-dpo"]
    assert len(set(merged)) == 3
    for m in merged:
        assert ts.read_manifest(tmp_path / "a" / m).entries
        assert (tmp_path / "a" / m).read_bytes() == (tmp_path / "b" / m).read_bytes()
    assert manifest["final_average"] > manifest["base_average"]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
