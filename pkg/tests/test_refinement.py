import json
import shutil
import sys
from pathlib import Path

import numpy as np
import pytest

from forgeline import policy as P
from forgeline import refinement as R
from forgeline import toy
from forgeline.errors import EmptyRefinement, LedgerError, TrainerFailure, ValidationError
from forgeline.evaluation import EvalReport, Suite, aggregate
from forgeline.gateway import EndpointConfig, MockClient
from forgeline.records import SftRecord, read_sft, write_jsonl

from .oracles import merge_scalar, ulp_distance_f32

CAMPAIGN = Path(__file__).parent / "fixtures" / "campaign"


def _copy_fixtures(tmp_path):
    d = tmp_path / "data"
    d.mkdir(parents=True)
    for name in ("base", "good", "bad"):
        shutil.copy(CAMPAIGN / f"{name}.jsonl", d / f"{name}.jsonl")
    return {name: R.DatasetRef.load(d / f"{name}.jsonl") for name in ("base", "good", "bad")}


def _toy_setup(tmp_path):
    suite = Suite.load(toy.write_suite(tmp_path / "suite"))
    return R.ToyTrainer(tmp_path / "snaps"), R.SuiteHarness(suite, seed=0), suite


# -- stubs ------------------------------------------------------------------


class StubTrainer:
    """Writes a marker file per mixture; records every call."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.calls = []

    def train(self, mixture, seed):
        self.calls.append(mixture)
        self.out_dir.mkdir(exist_ok=True)
        p = self.out_dir / f"{mixture.mixture_hash[:16]}.bin"
        p.write_text(json.dumps(sorted(r.id.split("@")[0] for r in mixture.components)))
        return p


class StubHarness:
    """Score of task t = base score + sum of per-dataset uplifts present in the mixture."""

    def __init__(self, uplifts, base=50.0):
        self.uplifts = uplifts
        self.base = base

    def __call__(self, snapshot):
        ids = json.loads(Path(snapshot).read_text())
        scores = {"t1": self.base, "t2": self.base}
        for i in ids:
            for t, u in self.uplifts.get(i, {}).items():
                scores[t] += u
        return aggregate(scores, timestamp="t")


def _ds(tmp_path, name, rows=1):
    p = tmp_path / f"{name}.jsonl"
    write_jsonl(p, [SftRecord(f"{name}-p{i}", f"{name} text {i}", 0.5, name) for i in range(rows)])
    return R.DatasetRef.load(p, name)


# -- hashing and datasets ---------------------------------------------------


def test_dataset_ref_and_mixture(tmp_path):
    a, b = _ds(tmp_path, "a"), _ds(tmp_path, "b", rows=3)
    assert b.record_count == 3 and len(a.content_hash) == 64
    m1 = R.MixtureSpec((a,), b)
    m2 = R.MixtureSpec((b, a))
    assert m1.mixture_hash == m2.mixture_hash
    assert R.MixtureSpec((a, a)).mixture_hash == R.MixtureSpec((a,)).mixture_hash
    with pytest.raises(ValidationError):
        R.MixtureSpec(())
    b.path.write_text("{}\n")
    with pytest.raises(ValidationError):
        b.verify()


def test_canonical_hash_ignores_timestamps():
    assert R.canonical_hash({"a": 1, "timestamp": "x", "n": [{"timestamp": 1}]}) == R.canonical_hash(
        {"n": [{"timestamp": 2}], "a": 1}
    )
    assert R.canonical_hash({"a": 1}) != R.canonical_hash({"a": 2})


# -- ledger -----------------------------------------------------------------


def test_ledger_chain_and_tamper(tmp_path):
    path = tmp_path / "ledger.jsonl"
    led = R.Ledger(path)
    for i in range(3):
        led.append(decision="reject", candidate_id=f"c{i}")
    assert [e["seq"] for e in led.entries] == [0, 1, 2]
    assert led.entries[0]["prev_hash"] == R.GENESIS
    assert led.entries[2]["prev_hash"] == led.entries[1]["hash"]
    reopened = R.Ledger(path)
    assert reopened.content_hash() == led.content_hash()

    lines = path.read_text("utf-8").splitlines()
    entry = json.loads(lines[1])
    entry["decision"] = "accept"
    lines[1] = json.dumps(entry, ensure_ascii=False)
    path.write_text("\n".join(lines) + "\n", "utf-8")
    with pytest.raises(LedgerError):
        R.Ledger(path)


def test_ledger_rejects_dropped_entry(tmp_path):
    path = tmp_path / "ledger.jsonl"
    led = R.Ledger(path)
    for i in range(3):
        led.append(decision="reject", candidate_id=f"c{i}")
    lines = path.read_text("utf-8").splitlines()
    path.write_text("\n".join([lines[0], lines[2]]) + "\n", "utf-8")
    with pytest.raises(LedgerError):
        R.Ledger(path)


# -- decisions --------------------------------------------------------------


def _report(t1, t2=50.0):
    return aggregate({"t1": t1, "t2": t2}, timestamp="t")


@pytest.mark.parametrize(
    "score,round,expected",
    [(50.5, 0, "accept"), (50.49, 0, "refine"), (50.49, 2, "reject"), (55.0, 2, "accept"), (49.0, 1, "refine")],
)
def test_decide_boundaries(score, round, expected):
    cfg = R.CampaignConfig(("t1",), epsilon=0.5, max_refinement_rounds=2)
    assert R.decide(_report(score), _report(50.0), cfg, round) == expected


def test_regression_veto_is_opt_in():
    base = aggregate({"t1": 50.0, "t2": 50.0}, timestamp="t")
    rep = aggregate({"t1": 60.0, "t2": 40.0}, timestamp="t")
    assert R.decide(rep, base, R.CampaignConfig(("t1", "t2")), 0) == "accept"
    assert R.decide(rep, base, R.CampaignConfig(("t1", "t2"), regression_delta=5.0), 0) == "refine"


def test_boundary_uplift_with_stubs(tmp_path):
    base = _ds(tmp_path, "base")
    cand = _ds(tmp_path, "edge")
    trainer = StubTrainer(tmp_path / "snaps")
    harness = StubHarness({"edge": {"t1": 0.5}})
    cfg = R.CampaignConfig(("t1",), epsilon=0.5)
    baseline = harness(trainer.train(R.MixtureSpec((base,)), 0))
    decision, entry = R.evaluate_candidate([base], cand, trainer, harness, baseline, cfg, R.Ledger())
    assert decision == "accept"
    assert entry["eval_report"]["per_task"]["t1"] == 50.5


def test_budget_bound(tmp_path):
    base = _ds(tmp_path, "base")
    cands = [_ds(tmp_path, "n1"), _ds(tmp_path, "n2")]
    trainer = StubTrainer(tmp_path / "snaps")
    refined = []

    def refiner(cand, rnd):
        new = _ds(tmp_path, f"{cand.id.split('@')[0]}.r{rnd}")
        refined.append(new.id)
        return R.DatasetRef(f"{cand.id.split('@')[0]}@r{rnd}", new.path, new.content_hash, new.record_count)

    for max_rounds in (0, 1, 3):
        trainer.calls.clear()
        cfg = R.CampaignConfig(("t1",), max_refinement_rounds=max_rounds)
        final, ledger = R.run_campaign([base], cands, trainer, StubHarness({}), cfg, R.Ledger(), refiner)
        assert final.mixture_hash == R.MixtureSpec((base,)).mixture_hash
        per_candidate = {}
        for m in trainer.calls[1:]:
            per_candidate[m.candidate.id.split("@")[0]] = per_candidate.get(m.candidate.id.split("@")[0], 0) + 1
        assert per_candidate == {"n1": 1 + max_rounds, "n2": 1 + max_rounds}
        assert [e["decision"] for e in ledger.entries][-1] == "reject"
        assert len(ledger.entries) == 2 * (1 + max_rounds)


def test_trainer_failure_is_deferred_and_skipped(tmp_path):
    base, bad, good = _ds(tmp_path, "base"), _ds(tmp_path, "boom"), _ds(tmp_path, "good")

    class Flaky(StubTrainer):
        def train(self, mixture, seed):
            if mixture.candidate is not None and mixture.candidate.id == "boom":
                raise RuntimeError("out of memory")
            return super().train(mixture, seed)

    cfg = R.CampaignConfig(("t1",))
    final, ledger = R.run_campaign([base], [bad, good], Flaky(tmp_path / "s"), StubHarness({"good": {"t1": 3}}), cfg)
    assert [e["decision"] for e in ledger.entries] == ["deferred", "accept"]
    assert "out of memory" in ledger.entries[0]["error"]
    assert {r.id for r in final.components} == {"base", "good"}
    with pytest.raises(TrainerFailure):
        R.evaluate_candidate([base], bad, Flaky(tmp_path / "s"), StubHarness({}), _report(50), cfg, R.Ledger())


def test_baseline_updates_after_accept(tmp_path):
    base = _ds(tmp_path, "base")
    first, second = _ds(tmp_path, "first"), _ds(tmp_path, "second")
    # each lifts t1 by 1 point: the second must beat base+first, not base alone
    harness = StubHarness({"first": {"t1": 1.0}, "second": {"t1": 0.25}})
    cfg = R.CampaignConfig(("t1",), max_refinement_rounds=0)
    final, ledger = R.run_campaign([base], [first, second], StubTrainer(tmp_path / "s"), harness, cfg)
    assert [e["decision"] for e in ledger.entries] == ["accept", "reject"]
    assert ledger.entries[1]["baseline_report"]["per_task"]["t1"] == 51.0


# -- planted campaign (toy trainer) -----------------------------------------


def _planted(tmp_path):
    refs = _copy_fixtures(tmp_path)
    trainer, harness, suite = _toy_setup(tmp_path)
    cfg = R.CampaignConfig(suite.critical_capabilities, epsilon=0.5, max_refinement_rounds=0)
    final, ledger = R.run_campaign(
        [refs["base"]], [refs["good"], refs["bad"]], trainer, harness, cfg, R.Ledger(tmp_path / "ledger.jsonl")
    )
    return refs, final, ledger


def test_planted_uplift_fixture(tmp_path):
    refs = _copy_fixtures(tmp_path)
    trainer, harness, _ = _toy_setup(tmp_path)
    base = harness(trainer.train(R.MixtureSpec((refs["base"],)), 0))
    good = harness(trainer.train(R.MixtureSpec((refs["base"],), refs["good"]), 0))
    bad = harness(trainer.train(R.MixtureSpec((refs["base"],), refs["bad"]), 0))
    assert good.per_task["toy_diacritics"] - base.per_task["toy_diacritics"] >= 5.0
    assert all(bad.per_task[t] - base.per_task[t] < 0.5 for t in base.per_task)


def test_planted_campaign(tmp_path):
    refs, final, ledger = _planted(tmp_path)
    assert {r.id for r in final.components} == {"base", "good"}
    assert [(e["candidate_id"], e["decision"]) for e in ledger.entries] == [("good", "accept"), ("bad", "reject")]
    R.Ledger(tmp_path / "ledger.jsonl").verify()
    assert R.replay_mixture_hash(ledger.entries, [refs["base"]]) == final.mixture_hash


def test_campaign_replay_is_deterministic(tmp_path):
    _, f1, l1 = _planted(tmp_path / "a")
    _, f2, l2 = _planted(tmp_path / "b")
    assert f1.mixture_hash == f2.mixture_hash
    assert l1.content_hash() == l2.content_hash()


def test_identical_content_candidate_not_accepted(tmp_path):
    refs = _copy_fixtures(tmp_path)
    twin_path = tmp_path / "data" / "twin.jsonl"
    shutil.copy(refs["base"].path, twin_path)
    twin = R.DatasetRef.load(twin_path)
    trainer, harness, suite = _toy_setup(tmp_path)
    cfg = R.CampaignConfig(suite.critical_capabilities, max_refinement_rounds=0)
    final, ledger = R.run_campaign([refs["base"]], [twin], trainer, harness, cfg)
    assert ledger.entries[0]["decision"] == "reject"
    assert ledger.entries[0]["eval_report"]["per_task"] == ledger.entries[0]["baseline_report"]["per_task"]


def test_campaign_config_validation():
    with pytest.raises(ValidationError):
        R.CampaignConfig(())
    with pytest.raises(ValidationError):
        R.CampaignConfig(("t",), max_refinement_rounds=-1)


# -- refinement -------------------------------------------------------------


def _gen_reward():
    return MockClient(EndpointConfig("mock://gen"), seed=4), MockClient(EndpointConfig("mock://reward"))


def test_refine_deterministic_and_not_worse(tmp_path):
    cand = _ds(tmp_path, "cand", rows=6)
    gen, rew = _gen_reward()
    a = R.refine_candidate(cand, gen, rew, n=4, seed=1, round=1, out_dir=tmp_path / "a")
    b = R.refine_candidate(cand, gen, rew, n=4, seed=1, round=1, out_dir=tmp_path / "b")
    assert a.content_hash == b.content_hash and a.id == "cand@r1"
    assert a.content_hash != cand.content_hash
    before = {r.prompt: rew.score_reward(r.prompt, r.completion) for r in read_sft(cand.path)}
    after = read_sft(a.path)
    assert len(after) == len(before)
    for r in after:
        assert r.reward >= before[r.prompt]
        assert r.reward == rew.score_reward(r.prompt, r.completion)


def test_refine_empty(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    gen, rew = _gen_reward()
    with pytest.raises(EmptyRefinement):
        R.refine_candidate(R.DatasetRef.load(p), gen, rew)
    cand = _ds(tmp_path, "c", rows=2)
    with pytest.raises(EmptyRefinement):
        R.refine_candidate(cand, gen, rew, [MockClient(quality="always_fail")], out_dir=tmp_path)


# -- stages -----------------------------------------------------------------


def _experts(tmp_path):
    refs = _copy_fixtures(tmp_path)
    return [R.MixtureSpec((refs["base"],)), R.MixtureSpec((refs["good"],))]


def test_run_stage_identity_and_mean(tmp_path):
    trainer = R.ToyTrainer(tmp_path / "snaps", epochs=5)
    experts = _experts(tmp_path)
    out, snaps, report = R.run_stage(experts, trainer, tmp_path / "id.safetensors", [1.0, 0.0], stage="t")
    assert P.load_snapshot(out).logits.tobytes() == P.load_snapshot(snaps[0]).logits.tobytes()
    assert report.tensor_count == 1

    out, snaps, _ = R.run_stage(experts, trainer, tmp_path / "mean.safetensors")
    a, b = (P.load_snapshot(s).logits for s in snaps)
    want = np.array(merge_scalar([a, b], [0.5, 0.5]), dtype=np.float32)
    got = P.load_snapshot(out).logits.astype(np.float32).reshape(-1)
    assert ulp_distance_f32(got, want).max() <= 1

    with pytest.raises(ValidationError):
        R.run_stage(experts[:1], trainer, tmp_path / "x")


def test_toy_trainer_is_deterministic(tmp_path):
    experts = _experts(tmp_path)
    a = R.ToyTrainer(tmp_path / "a", epochs=5).train(experts[1], 3)
    b = R.ToyTrainer(tmp_path / "b", epochs=5).train(experts[1], 3)
    assert a.read_bytes() == b.read_bytes()


def test_command_trainer(tmp_path):
    experts = _experts(tmp_path)
    src = R.ToyTrainer(tmp_path / "snaps", epochs=1).train(experts[0], 0)
    script = f"import shutil,sys; shutil.copy({str(src)!r}, sys.argv[1])"
    trainer = R.CommandTrainer(f"{sys.executable} -c {json.dumps(script)} {{out}}", tmp_path / "ext")
    out = trainer.train(experts[0], 0)
    assert out.read_bytes() == src.read_bytes()
    assert json.loads(next((tmp_path / "ext").glob("*.mixture.json")).read_text())["mixture_hash"] == experts[0].mixture_hash
    failing = R.CommandTrainer(f"{sys.executable} -c 'import sys; sys.exit(3)'", tmp_path / "ext")
    with pytest.raises(TrainerFailure):
        failing.train(experts[0], 0)
