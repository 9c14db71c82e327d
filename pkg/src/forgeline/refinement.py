"""Iterative supervised refinement and train-experts-then-merge stages.

A campaign walks candidate datasets in order: train on base + candidate,
evaluate, and accept the candidate if any critical task improves on the
baseline by at least ``epsilon``. Otherwise the candidate is refined through
arbitrage and retried until the refinement budget runs out. Every
evaluation is appended to a hash-chained JSONL ledger.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import shlex
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from forgeline import arbitrage
from forgeline import policy as pl
from forgeline import tensorstore as ts
from forgeline.errors import (
    EmptyRefinement,
    ForgelineError,
    HarnessFailure,
    LedgerError,
    TrainerFailure,
    ValidationError,
)
from forgeline.evaluation import EvalReport, Suite, policy_answerer, run_suite, utc_timestamp
from forgeline.records import SftRecord, dumps, iter_jsonl, read_prefs, read_sft, write_jsonl

log = logging.getLogger(__name__)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_hash(obj) -> str:
    """sha256 of canonical JSON, ignoring every ``timestamp`` key."""

    def scrub(x):
        if isinstance(x, dict):
            return {k: scrub(v) for k, v in x.items() if k != "timestamp"}
        if isinstance(x, list):
            return [scrub(v) for v in x]
        return x

    blob = json.dumps(scrub(obj), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DatasetRef:
    id: str
    path: Path
    content_hash: str
    record_count: int

    @classmethod
    def load(cls, path: str | Path, id: str | None = None) -> "DatasetRef":
        path = Path(path)
        count = sum(1 for _ in iter_jsonl(path))
        return cls(id or path.stem, path, sha256_file(path), count)

    def verify(self) -> None:
        if sha256_file(self.path) != self.content_hash:
            raise ValidationError(f"dataset {self.id!r} changed on disk since it was loaded")

    def to_dict(self) -> dict:
        return {"id": self.id, "path": self.path.name, "content_hash": self.content_hash,
                "record_count": self.record_count}


def mixture_hash_of(hashes) -> str:
    return hashlib.sha256(json.dumps(sorted(set(hashes))).encode()).hexdigest()


@dataclass(frozen=True)
class MixtureSpec:
    base: tuple[DatasetRef, ...]
    candidate: DatasetRef | None = None

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(self.base))
        if not self.base:
            raise ValidationError("a mixture needs at least one base dataset")

    @property
    def components(self) -> list[DatasetRef]:
        """Distinct datasets by content hash, in hash order (deterministic training order)."""
        seen = {}
        for ref in self.base + ((self.candidate,) if self.candidate else ()):
            seen.setdefault(ref.content_hash, ref)
        return [seen[h] for h in sorted(seen)]

    @property
    def mixture_hash(self) -> str:
        return mixture_hash_of(r.content_hash for r in self.components)

    def to_dict(self) -> dict:
        return {
            "base": [r.to_dict() for r in self.base],
            "candidate": self.candidate.to_dict() if self.candidate else None,
            "mixture_hash": self.mixture_hash,
        }


class State(enum.Enum):
    PENDING = "pending"
    TRAINING = "training"
    EVALUATED = "evaluated"
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    REFINING = "refining"


@dataclass(frozen=True)
class CandidateState:
    state: State = State.PENDING
    round: int = 0


# -- ledger -----------------------------------------------------------------

GENESIS = "0" * 64


class Ledger:
    """Append-only, hash-chained JSONL log. Hashes ignore timestamps."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []
        if self.path and self.path.exists():
            self.entries = [obj for _, obj in iter_jsonl(self.path)]
            self.verify()

    def append(self, **fields) -> dict:
        entry = {
            "seq": len(self.entries),
            "timestamp": utc_timestamp(),
            **fields,
            "prev_hash": self.entries[-1]["hash"] if self.entries else GENESIS,
        }
        entry["hash"] = canonical_hash(entry)
        if self.path:
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(dumps(entry) + "\n")
                    fh.flush()
            except OSError as exc:
                raise LedgerError(f"cannot append to ledger {self.path}: {exc}") from exc
        self.entries.append(entry)
        return entry

    def verify(self) -> None:
        prev = GENESIS
        for i, entry in enumerate(self.entries):
            body = {k: v for k, v in entry.items() if k != "hash"}
            if entry.get("seq") != i:
                raise LedgerError(f"ledger entry {i} has sequence number {entry.get('seq')}")
            if entry.get("prev_hash") != prev:
                raise LedgerError(f"ledger entry {i} does not chain to its predecessor")
            if canonical_hash(body) != entry.get("hash"):
                raise LedgerError(f"ledger entry {i} was modified")
            prev = entry["hash"]

    def content_hash(self) -> str:
        return self.entries[-1]["hash"] if self.entries else GENESIS


def replay_mixture_hash(entries: Sequence[Mapping], base: Sequence[DatasetRef]) -> str:
    """Final mixture hash implied by the accept decisions in a ledger."""
    hashes = [r.content_hash for r in base]
    for e in entries:
        if e.get("decision") == "accept":
            hashes.append(e["candidate_hash"])
    return mixture_hash_of(hashes)


# -- trainers and harnesses -------------------------------------------------


class Trainer(Protocol):
    def train(self, mixture: MixtureSpec, seed: int) -> Path: ...


@dataclass
class ToyTrainer:
    """Full-batch SFT of a bigram policy on every record in the mixture."""

    out_dir: Path
    vocab: pl.Vocab = field(default_factory=pl.Vocab.toy)
    epochs: int = 40
    lr: float = 2.0
    init: Path | None = None
    stage: str = "sft"

    def train(self, mixture: MixtureSpec, seed: int) -> Path:
        tag = canonical_hash([self.epochs, self.lr, self.vocab.hash, sha256_file(self.init) if self.init else ""])
        out = Path(self.out_dir) / f"{self.stage}-{mixture.mixture_hash[:12]}-{tag[:8]}-s{seed}.safetensors"
        if out.exists():
            return out
        records = []
        for ref in mixture.components:
            ref.verify()
            records += read_sft(ref.path)
        policy = pl.load_snapshot(self.init) if self.init else pl.TabularPolicy.uniform(self.vocab)
        seqs = pl.encode_records(policy.vocab, records)
        for _ in range(self.epochs):
            pl.sft_epoch(policy, seqs, self.lr)
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        return pl.save_snapshot(policy, out, self.stage)


@dataclass
class DpoTrainer:
    """Offline DPO from ``init`` against a frozen ``ref`` on the mixture's preference pairs."""

    out_dir: Path
    init: Path
    ref: Path | None = None
    cfg: pl.DpoConfig = field(default_factory=pl.DpoConfig)
    stage: str = "dpo"

    def train(self, mixture: MixtureSpec, seed: int) -> Path:
        tag = canonical_hash([self.cfg.beta, self.cfg.learning_rate, self.cfg.epochs,
                              sha256_file(self.init), sha256_file(self.ref or self.init)])
        out = Path(self.out_dir) / f"{self.stage}-{mixture.mixture_hash[:12]}-{tag[:8]}-s{seed}.safetensors"
        if out.exists():
            return out
        policy = pl.load_snapshot(self.init)
        ref = pl.load_snapshot(self.ref or self.init)
        pairs = []
        for ds in mixture.components:
            ds.verify()
            pairs += read_prefs(ds.path)
        ids = pl.encode_pairs(policy.vocab, pairs)
        for _ in range(self.cfg.epochs):
            pl.dpo_epoch(policy, ref, ids, self.cfg)
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        return pl.save_snapshot(policy, out, self.stage)


@dataclass
class IterativeDpoTrainer:
    """Iterative DPO; the mixture's datasets are seed-instruction JSONL files."""

    out_dir: Path
    init: Path
    prompt_gateway: object
    reward: object
    cfg: pl.DpoConfig = field(default_factory=pl.DpoConfig)
    rounds: int = 3
    n: int = 8
    k_per_seed: int = 4
    min_margin: float = 0.05
    judges: Sequence = ()
    stage: str = "iterative-dpo"
    metrics: dict = field(default_factory=dict)

    def train(self, mixture: MixtureSpec, seed: int) -> Path:
        out = Path(self.out_dir) / f"{self.stage}-{mixture.mixture_hash[:16]}-s{seed}.safetensors"
        seeds = []
        for ds in mixture.components:
            ds.verify()
            seeds += arbitrage.load_seeds(ds.path)
        prompts = arbitrage.expand_seeds(seeds, self.prompt_gateway, self.k_per_seed, seed)
        policy = pl.load_snapshot(self.init)
        cfg = replace(self.cfg, seed=seed)
        policy, metrics = pl.iterative_dpo(
            policy, policy.copy(), prompts, self.reward, self.rounds, cfg,
            n=self.n, min_margin=self.min_margin, judges=self.judges,
        )
        self.metrics[out.name] = [m.to_dict() for m in metrics]
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        return pl.save_snapshot(policy, out, self.stage)


@dataclass
class CommandTrainer:
    """Runs a user command; ``{mixture}``, ``{seed}`` and ``{out}`` are substituted.

    The mixture is written as JSON next to the expected output checkpoint.
    """

    command: str
    out_dir: Path

    def train(self, mixture: MixtureSpec, seed: int) -> Path:
        out_dir = Path(self.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"ext-{mixture.mixture_hash[:16]}-s{seed}"
        spec = out_dir / f"{stem}.mixture.json"
        spec.write_text(json.dumps({
            **mixture.to_dict(),
            "paths": [str(r.path) for r in mixture.components],
        }, ensure_ascii=False), encoding="utf-8")
        out = out_dir / f"{stem}.safetensors"
        argv = [a.format(mixture=spec, seed=seed, out=out) for a in shlex.split(self.command)]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise TrainerFailure(f"trainer exited {proc.returncode}: {proc.stderr.strip()[-500:]}")
        if not out.exists():
            raise TrainerFailure(f"trainer did not produce {out}")
        return out


@dataclass
class SuiteHarness:
    """Evaluates a policy snapshot on a suite with a deterministic sampler."""

    suite: Suite
    seed: int = 0
    max_len: int = 24

    def __call__(self, snapshot: Path) -> EvalReport:
        policy = pl.load_snapshot(snapshot)
        return run_suite(
            self.suite, policy_answerer(policy, self.seed, self.max_len),
            model_id=Path(snapshot).name, seed=self.seed,
        )


# -- campaign ---------------------------------------------------------------


@dataclass(frozen=True)
class CampaignConfig:
    critical_capabilities: tuple[str, ...]
    epsilon: float = 0.5
    max_refinement_rounds: int = 2
    seed: int = 0
    regression_delta: float | None = None  # optional veto, off by default

    def __post_init__(self):
        object.__setattr__(self, "critical_capabilities", tuple(self.critical_capabilities))
        if not self.critical_capabilities:
            raise ValidationError("at least one critical capability is required")
        if self.max_refinement_rounds < 0:
            raise ValidationError("max_refinement_rounds must be >= 0")


def decide(report: EvalReport, baseline: EvalReport, cfg: CampaignConfig, round: int) -> str:
    for t in cfg.critical_capabilities:
        if t not in report.per_task or t not in baseline.per_task:
            raise HarnessFailure(f"critical task {t!r} missing from report")
    # 1e-9 absorbs float noise so an uplift of exactly epsilon is accepted
    improved = any(
        report.per_task[t] - baseline.per_task[t] >= cfg.epsilon - 1e-9 for t in cfg.critical_capabilities
    )
    if improved and cfg.regression_delta is not None:
        improved = not any(
            baseline.per_task[t] - report.per_task[t] > cfg.regression_delta for t in cfg.critical_capabilities
        )
    if improved:
        return "accept"
    return "refine" if round < cfg.max_refinement_rounds else "reject"


def _snapshot_info(path: Path) -> dict:
    return {"name": Path(path).name, "sha256": sha256_file(path)}


def evaluate_candidate(
    base: Sequence[DatasetRef],
    candidate: DatasetRef,
    trainer: Trainer,
    harness: Callable[[Path], EvalReport],
    baseline_report: EvalReport,
    cfg: CampaignConfig,
    ledger: Ledger,
    round: int = 0,
) -> tuple[str, dict]:
    mixture = MixtureSpec(tuple(base), candidate)
    common = {
        "mixture_hash": mixture.mixture_hash,
        "candidate_id": candidate.id,
        "candidate_hash": candidate.content_hash,
        "round": round,
        "critical_capabilities": list(cfg.critical_capabilities),
        "baseline_report": baseline_report.to_dict(),
    }
    try:
        snapshot = trainer.train(mixture, cfg.seed)
    except Exception as exc:
        ledger.append(**common, snapshot=None, eval_report=None, decision="deferred", error=str(exc))
        raise TrainerFailure(str(exc)) from exc
    try:
        report = harness(snapshot)
    except Exception as exc:
        ledger.append(**common, snapshot=_snapshot_info(snapshot), eval_report=None,
                      decision="deferred", error=str(exc))
        raise HarnessFailure(str(exc)) from exc
    decision = decide(report, baseline_report, cfg, round)
    entry = ledger.append(**common, snapshot=_snapshot_info(snapshot), eval_report=report.to_dict(),
                          decision=decision)
    return decision, entry


def refine_candidate(
    candidate: DatasetRef,
    generator,
    reward,
    judges: Sequence = (),
    *,
    quorum: int | None = None,
    n: int = 8,
    seed: int = 0,
    round: int = 1,
    out_dir: str | Path | None = None,
) -> DatasetRef:
    """Re-select every record's completion by best-of-N over fresh samples plus the original."""
    records = read_sft(candidate.path)
    if not records:
        raise EmptyRefinement(f"dataset {candidate.id!r} is empty")
    refined: list[SftRecord] = []
    for rec in records:
        cs = arbitrage.sample_and_score(rec.prompt, generator, reward, n=n, seed=seed * 7919 + round)
        original = arbitrage.ScoredCompletion(rec.completion, reward.score_reward(rec.prompt, rec.completion))
        cs = replace(cs, completions=(original,) + cs.completions)
        if judges:
            cs = arbitrage.panel_filter(cs, judges, quorum or len(judges) // 2 + 1)
        else:
            cs = replace(cs, completions=tuple(replace(c, panel_pass=True) for c in cs.completions))
        best = arbitrage.build_sft_record(cs, f"refined-r{round}:{rec.source}")
        if best is not None:
            refined.append(best)
    if not refined:
        raise EmptyRefinement(f"no records of {candidate.id!r} survived refinement")
    out_dir = Path(out_dir or candidate.path.parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = candidate.id.split("@")[0]
    path = write_jsonl(out_dir / f"{stem}.r{round}.jsonl", refined)
    return DatasetRef.load(path, f"{stem}@r{round}")


def run_campaign(
    base: Sequence[DatasetRef],
    candidates: Sequence[DatasetRef],
    trainer: Trainer,
    harness: Callable[[Path], EvalReport],
    cfg: CampaignConfig,
    ledger: Ledger | None = None,
    refiner: Callable[[DatasetRef, int], DatasetRef] | None = None,
) -> tuple[MixtureSpec, Ledger]:
    if not candidates:
        raise ValidationError("a campaign needs at least one candidate")
    ledger = ledger if ledger is not None else Ledger()
    base = list(base)
    try:
        baseline = harness(trainer.train(MixtureSpec(tuple(base)), cfg.seed))
    except ForgelineError:
        raise
    except Exception as exc:
        raise HarnessFailure(f"baseline evaluation failed: {exc}") from exc

    for cand in candidates:
        current, round = cand, 0
        while True:
            try:
                decision, entry = evaluate_candidate(base, current, trainer, harness, baseline, cfg, ledger, round)
            except (TrainerFailure, HarnessFailure) as exc:
                log.warning("candidate %s skipped: %s", current.id, exc)
                break
            if decision == "accept":
                base.append(current)
                # same trainer and seed on the same mixture: this report is the new baseline
                baseline = EvalReport.from_dict(entry["eval_report"])
                break
            if decision == "reject" or refiner is None:
                if decision == "refine":
                    log.info("no refiner configured; %s not retried", current.id)
                break
            try:
                current = refiner(current, round + 1)
            except ForgelineError as exc:
                ledger.append(mixture_hash=entry["mixture_hash"], candidate_id=current.id,
                              candidate_hash=current.content_hash, round=round + 1,
                              critical_capabilities=list(cfg.critical_capabilities),
                              baseline_report=baseline.to_dict(), snapshot=None, eval_report=None,
                              decision="reject", error=str(exc))
                break
            round += 1
    return MixtureSpec(tuple(base)), ledger


def run_stage(
    experts: Sequence[MixtureSpec],
    trainer: Trainer,
    out: str | Path,
    merge_weights: str | Sequence[float] = "equal",
    seed: int = 0,
    stage: str = "",
) -> tuple[Path, list[Path], ts.MergeReport]:
    """Train one expert per mixture and merge them linearly into ``out``."""
    if len(experts) < 2:
        raise ValidationError("a stage needs at least 2 experts to merge")
    snapshots = [trainer.train(m, seed) for m in experts]
    if len(set(snapshots)) != len(snapshots):
        raise ValidationError("experts produced identical snapshot paths; use distinct mixtures")
    if isinstance(merge_weights, str):
        recipe = ts.parse_weights(merge_weights, snapshots)
    else:
        recipe = ts.MergeRecipe(tuple(zip(snapshots, merge_weights)))
    report = ts.merge_linear(recipe, out, {"stage": stage or "merged"})
    return Path(out), snapshots, report
