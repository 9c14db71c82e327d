"""The three-stage recipe: SFT experts -> merge, offline DPO experts -> merge,
iterative DPO experts -> merge, with evaluation of every merged model.

Everything is written under one output directory and summarized in
``manifest.json``; paths in the manifest are relative so reruns with the
same seed produce an identical file.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from forgeline import arbitrage, toy
from forgeline import policy as pl
from forgeline.errors import ForgelineError, ValidationError
from forgeline.evaluation import Suite
from forgeline.gateway import Client, EndpointConfig, MockClient, connect, mock_forced
from forgeline.records import write_jsonl
from forgeline.refinement import (
    CampaignConfig,
    DatasetRef,
    DpoTrainer,
    IterativeDpoTrainer,
    Ledger,
    MixtureSpec,
    SuiteHarness,
    ToyTrainer,
    canonical_hash,
    refine_candidate,
    run_campaign,
    run_stage,
    sha256_file,
)

log = logging.getLogger(__name__)

_VAR_RE = re.compile(r"\$\{(\w+)\}")


def interpolate(obj):
    """Replace ``${VAR}`` in every string with the environment value."""
    if isinstance(obj, dict):
        return {k: interpolate(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [interpolate(v) for v in obj]
    if isinstance(obj, str):
        def sub(m):
            if m.group(1) not in os.environ:
                raise ValidationError(f"environment variable {m.group(1)} is not set")
            return os.environ[m.group(1)]
        return _VAR_RE.sub(sub, obj)
    return obj


@dataclass
class GlobalConfig:
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    judges: list[EndpointConfig] = field(default_factory=list)
    seed: int = 0
    mock_mode: bool = False
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None, *, mock: bool = False, seed: int | None = None) -> "GlobalConfig":
        raw = {}
        if path:
            try:
                raw = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON config: {exc}") from exc
            raw = interpolate(raw)
        eps = raw.get("endpoints", {})
        endpoints = {k: EndpointConfig.from_dict(v) for k, v in eps.items() if k != "judges"}
        judges = [EndpointConfig.from_dict(j) for j in eps.get("judges", [])]
        return cls(
            endpoints, judges,
            seed=raw.get("seed", 0) if seed is None else seed,
            mock_mode=mock or bool(raw.get("mock", False)) or mock_forced(),
            raw=raw,
        )

    def require(self, *roles: str) -> None:
        if self.mock_mode:
            return
        missing = [r for r in roles if r != "judges" and r not in self.endpoints]
        if "judges" in roles and not self.judges:
            missing.append("judges")
        if missing:
            raise ValidationError(f"endpoints not configured and mock mode is off: {', '.join(missing)}")

    def client(self, role: str, **mock_kw) -> Client:
        cfg = self.endpoints.get(role)
        if self.mock_mode:
            return MockClient(cfg if cfg and cfg.is_mock else EndpointConfig(f"mock://{role}"),
                              seed=self.seed, **mock_kw)
        if cfg is None:
            raise ValidationError(f"endpoint {role!r} is not configured")
        return connect(cfg)

    def judge_clients(self) -> list[Client]:
        if self.mock_mode:
            judges = self.judges or [EndpointConfig(f"mock://judge{i}") for i in range(3)]
            return [MockClient(j if j.is_mock else EndpointConfig(f"mock://judge{i}"), seed=self.seed)
                    for i, j in enumerate(judges)]
        return [connect(j) for j in self.judges]


DEFAULTS = {
    "arbitrage": {"k_per_seed": 6, "n": 8, "min_margin": 0.05, "base_k_per_seed": 2},
    "campaign": {"epsilon": 0.5, "max_refinement_rounds": 1},
    "sft": {"epochs": 60, "lr": 2.0},
    "offline_dpo": {"beta": 0.5, "lr": 2.0, "epochs": 20},
    "iterative_dpo": {"beta": 0.5, "lr": 2.0, "epochs": 10, "rounds": 3, "n": 8, "k_per_seed": 3},
    "merge_weights": "equal",
    "suite_items_per_task": 24,
}


def _section(raw: Mapping, name: str) -> dict:
    value = DEFAULTS[name]
    if isinstance(value, dict):
        return {**value, **raw.get(name, {})}
    return raw.get(name, value)


class StageFailure(ForgelineError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.exit_code = getattr(cause, "exit_code", 4)
        super().__init__(f"stage {stage!r} failed: {cause}")


def _rel(path: Path, root: Path) -> str:
    return Path(path).resolve().relative_to(root.resolve()).as_posix()


def run_pipeline(config: GlobalConfig, out_dir: str | Path) -> dict:
    root = Path(out_dir)
    for sub in ("data", "snapshots", "reports", "suite"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    config.require("generator", "reward", "judges")
    raw, seed = config.raw, config.seed
    arb = _section(raw, "arbitrage")

    generator = config.client("generator")
    reward = config.client("reward")
    judges = config.judge_clients()
    quorum = arb.get("quorum", len(judges) // 2 + 1)

    seeds_path = Path(raw["seeds"]) if "seeds" in raw else toy.write_seeds(root / "data" / "seeds.jsonl")
    suite_path = Path(raw["suite"]) if "suite" in raw else toy.write_suite(
        root / "suite", _section(raw, "suite_items_per_task"))
    seeds = arbitrage.load_seeds(seeds_path)
    suite = Suite.load(suite_path)
    if len(seeds) < 2:
        raise ValidationError("the pipeline needs at least 2 seed instructions")
    harness = SuiteHarness(suite, seed)
    vocab = pl.Vocab.toy()
    weights = _section(raw, "merge_weights")

    manifest: dict = {"seed": seed, "stages": [], "ledgers": [], "reports": {}}
    snapshots = root / "snapshots"

    base = pl.save_snapshot(pl.TabularPolicy.uniform(vocab), snapshots / "base.safetensors", "base")
    base_report = harness(base)
    base_report.write(root / "reports" / "base.json")
    manifest["reports"]["base"] = {"path": "reports/base.json", "average": base_report.average}

    stage = "sft"
    try:
        data = root / "data"
        general = arbitrage.run_arbitrage(seeds, generator, reward, judges, k_per_seed=arb["base_k_per_seed"],
                                          n=arb["n"], quorum=quorum, min_margin=arb["min_margin"],
                                          seed=seed, source="general")
        base_ds = DatasetRef.load(write_jsonl(data / "sft-general.jsonl", general.sft), "general")
        candidates, prefs_refs = [], []
        for s in seeds:
            res = arbitrage.run_arbitrage([s], generator, reward, judges, k_per_seed=arb["k_per_seed"],
                                          n=arb["n"], quorum=quorum, min_margin=arb["min_margin"],
                                          seed=seed + 1, source=s.id)
            candidates.append(DatasetRef.load(write_jsonl(data / f"sft-{s.id}.jsonl", res.sft), s.id))
            prefs_refs.append(DatasetRef.load(write_jsonl(data / f"prefs-{s.id}.jsonl", res.prefs), f"prefs-{s.id}"))

        sft_cfg = _section(raw, "sft")
        camp = _section(raw, "campaign")
        trainer = ToyTrainer(snapshots / "sft", vocab, sft_cfg["epochs"], sft_cfg["lr"])
        ccfg = CampaignConfig(tuple(camp.get("critical_capabilities", suite.critical_capabilities)),
                              camp["epsilon"], camp["max_refinement_rounds"], seed)
        ledger_path = root / "ledger-sft.jsonl"
        ledger_path.unlink(missing_ok=True)

        def refiner(cand, rnd):
            return refine_candidate(cand, generator, reward, judges, quorum=quorum, n=arb["n"],
                                    seed=seed, round=rnd, out_dir=data)

        final_mix, ledger = run_campaign([base_ds], candidates, trainer, harness, ccfg,
                                         Ledger(ledger_path), refiner)
        manifest["ledgers"].append({"path": ledger_path.name, "hash": ledger.content_hash(),
                                    "final_mixture_hash": final_mix.mixture_hash})
        accepted = [r for r in final_mix.base if r.content_hash != base_ds.content_hash]
        experts = [MixtureSpec((base_ds,), r) for r in accepted]
        if len(experts) < 2:
            experts.append(final_mix)
        if len(experts) < 2:
            experts.append(MixtureSpec((base_ds,), candidates[0]))
        sft_merged, sft_experts, _ = run_stage(experts, trainer, snapshots / "sft-merged.safetensors",
                                               weights, seed, "sft")
        _record(manifest, root, "sft", sft_experts, sft_merged, harness)

        stage = "offline-dpo"
        d = _section(raw, "offline_dpo")
        dcfg = pl.DpoConfig(d["beta"], d["lr"], d["epochs"], seed)
        usable = [r for r in prefs_refs if r.record_count > 0]
        if len(usable) < 2:
            raise ValidationError("fewer than 2 non-empty preference datasets for offline DPO experts")
        groups = [tuple(usable[0::2]), tuple(usable[1::2])]
        dpo_trainer = DpoTrainer(snapshots / "offline-dpo", sft_merged, sft_merged, dcfg, "offline-dpo")
        off_merged, off_experts, _ = run_stage([MixtureSpec(g) for g in groups], dpo_trainer,
                                               snapshots / "offline-dpo-merged.safetensors", weights, seed,
                                               "offline-dpo")
        _record(manifest, root, "offline-dpo", off_experts, off_merged, harness)

        stage = "iterative-dpo"
        it = _section(raw, "iterative_dpo")
        icfg = pl.DpoConfig(it["beta"], it["lr"], it["epochs"], seed)
        seed_groups = []
        for g, chunk in enumerate((seeds[0::2], seeds[1::2])):
            path = data / f"iter-seeds-{g}.jsonl"
            write_jsonl(path, [{"id": s.id, "template": s.template, "constraints": list(s.constraints),
                                "ranges": {k: list(v) for k, v in s.ranges.items()}, "language": s.language}
                               for s in chunk])
            seed_groups.append(DatasetRef.load(path, f"iter-seeds-{g}"))
        it_trainer = IterativeDpoTrainer(snapshots / "iterative-dpo", off_merged, generator, reward, icfg,
                                         it["rounds"], it["n"], it["k_per_seed"], arb["min_margin"], judges)
        final, it_experts, _ = run_stage([MixtureSpec((g,)) for g in seed_groups], it_trainer,
                                         snapshots / "final-merged.safetensors", weights, seed, "iterative-dpo")
        _record(manifest, root, "iterative-dpo", it_experts, final, harness)
        (root / "reports" / "iterative-dpo-metrics.json").write_text(
            json.dumps(it_trainer.metrics, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except ForgelineError as exc:
        raise StageFailure(stage, exc) from exc

    # reports and ledgers carry wall-clock timestamps; they are summarized by
    # timestamp-free hashes and averages above instead of file digests
    files = sorted(p for sub in ("data", "snapshots", "suite") for p in (root / sub).rglob("*") if p.is_file())
    manifest["files"] = {_rel(p, root): sha256_file(p) for p in files}
    manifest["base_average"] = base_report.average
    manifest["final_average"] = manifest["reports"]["iterative-dpo"]["average"]
    manifest["manifest_hash"] = canonical_hash(manifest)
    (root / "manifest.json").write_text(json.dumps(manifest, ensure_ascii=False, indent=2) + "\n",
                                        encoding="utf-8")
    return manifest


def _record(manifest, root, name, experts, merged, harness):
    report = harness(merged)
    path = root / "reports" / f"{name}.json"
    report.write(path)
    manifest["stages"].append({
        "name": name,
        "experts": [_rel(p, root) for p in experts],
        "merged": _rel(merged, root),
    })
    manifest["reports"][name] = {"path": _rel(path, root), "average": report.average}
