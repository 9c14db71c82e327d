"""``forgeline`` command-line entry point.

Exit codes: 0 ok, 2 usage/validation, 3 IO/transport, 4 internal invariant breach.
Data goes to files and stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from forgeline import arbitrage, evaluation, kernels
from forgeline import policy as pl
from forgeline import tensorstore as ts
from forgeline.errors import ForgelineError, SchemaError, ValidationError
from forgeline.gateway import EndpointConfig, connect
from forgeline.pipeline import GlobalConfig, run_pipeline
from forgeline.records import read_prefs, write_jsonl
from forgeline.refinement import (
    CampaignConfig,
    CommandTrainer,
    DatasetRef,
    Ledger,
    SuiteHarness,
    ToyTrainer,
    refine_candidate,
    replay_mixture_hash,
    run_campaign,
    sha256_file,
)

log = logging.getLogger("forgeline")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False, indent=2) + "\n")


def _config(args) -> GlobalConfig:
    return GlobalConfig.load(args.config, mock=args.mock, seed=args.seed)


# -- merge ------------------------------------------------------------------


def cmd_merge(args) -> int:
    for p in args.inputs:
        if not Path(p).is_file():
            raise FileNotFoundError(f"input checkpoint {p} does not exist")
    recipe = ts.parse_weights(args.weights, args.inputs)
    if args.dtype:
        recipe = ts.MergeRecipe(recipe.inputs, ts.DType(args.dtype))
    report = ts.merge_linear(recipe, args.out, workers=args.workers)
    _emit(report.to_dict())
    return 0


# -- arbitrage --------------------------------------------------------------


def cmd_arbitrage(args) -> int:
    cfg = _config(args)
    cfg.require("generator", "reward", "judges")
    seeds = arbitrage.load_seeds(args.seeds)
    if not seeds:
        raise ValidationError(f"{args.seeds}: no seed instructions")
    judges = cfg.judge_clients()
    result = arbitrage.run_arbitrage(
        seeds, cfg.client("generator"), cfg.client("reward"), judges,
        k_per_seed=args.k, n=args.n, quorum=args.quorum, min_margin=args.min_margin, seed=cfg.seed,
    )
    sft, prefs = arbitrage.write_outputs(result, args.out)
    _emit({**result.stats(), "sft": {"path": str(sft), "sha256": sha256_file(sft)},
           "prefs": {"path": str(prefs), "sha256": sha256_file(prefs)}})
    return 0


# -- refine -----------------------------------------------------------------


def cmd_refine(args) -> int:
    cfg = _config(args)
    path = Path(args.campaign)
    try:
        camp = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid campaign JSON: {exc}") from exc
    here = path.parent
    try:
        base = [DatasetRef.load(here / p) for p in camp["base"]]
        candidates = [DatasetRef.load(here / p) for p in camp["candidates"]]
        suite = evaluation.Suite.load(here / camp["suite"])
    except KeyError as exc:
        raise ValidationError(f"{path}: missing key {exc}") from exc
    seed = args.seed if args.seed is not None else camp.get("seed", 0)
    ccfg = CampaignConfig(
        tuple(camp.get("critical_capabilities", suite.critical_capabilities)),
        camp.get("epsilon", 0.5), camp.get("max_refinement_rounds", 2), seed,
        camp.get("regression_delta"),
    )
    out = Path(args.out or here / camp.get("out", "campaign-out"))
    out.mkdir(parents=True, exist_ok=True)
    tcfg = camp.get("trainer", {"kind": "toy"})
    if tcfg.get("kind", "toy") == "command":
        trainer = CommandTrainer(tcfg["command"], out / "snapshots")
    else:
        trainer = ToyTrainer(out / "snapshots", epochs=tcfg.get("epochs", 40), lr=tcfg.get("lr", 2.0))
    refiner = None
    if ccfg.max_refinement_rounds > 0:
        cfg.require("generator", "reward")
        gen, rew = cfg.client("generator"), cfg.client("reward")
        judges = cfg.judge_clients() if (cfg.mock_mode or cfg.judges) else []
        rc = camp.get("refine", {})

        def refiner(cand, rnd):
            return refine_candidate(cand, gen, rew, judges, quorum=rc.get("quorum"), n=rc.get("n", 8),
                                    seed=seed, round=rnd, out_dir=out / "data")

    ledger_path = Path(camp.get("ledger", out / "ledger.jsonl"))
    if not ledger_path.is_absolute() and "ledger" in camp:
        ledger_path = here / ledger_path
    if ledger_path.exists() and not args.resume:
        ledger_path.unlink()
    ledger = Ledger(ledger_path)
    final, ledger = run_campaign(base, candidates, trainer, SuiteHarness(suite, seed), ccfg, ledger, refiner)
    ledger.verify()
    _emit({
        "final_mixture": final.to_dict(),
        "accepted": [r.id for r in final.base[len(base):]],
        "ledger": str(ledger_path),
        "ledger_hash": ledger.content_hash(),
        "replayed_mixture_hash": replay_mixture_hash(ledger.entries, base),
    })
    return 0


# -- eval -------------------------------------------------------------------


def _answerer(spec: str, suite, cfg: GlobalConfig, seed: int):
    if spec in ("oracle", "mock://oracle"):
        return evaluation.gold_answerer(suite), "oracle"
    path = Path(spec)
    if spec.endswith(".safetensors"):
        return evaluation.policy_answerer(pl.load_snapshot(path), seed), path.name
    if path.is_file():
        ep = EndpointConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))
    else:
        ep = EndpointConfig(spec)
    if not ep.is_mock and cfg.mock_mode:
        ep = EndpointConfig("mock://model")
    return evaluation.client_answerer(connect(ep, seed=seed) if ep.is_mock else connect(ep), seed), ep.model_id


def cmd_eval(args) -> int:
    cfg = _config(args)
    suite = evaluation.Suite.load(args.suite)
    answerer, model_id = _answerer(args.model_endpoint, suite, cfg, cfg.seed)
    baseline = judge = None
    if args.baseline:
        baseline, _ = _answerer(args.baseline, suite, cfg, cfg.seed)
    if any(t.kind is evaluation.TaskKind.PAIRWISE_ARENA for t in suite.tasks):
        if suite.judge:
            judge = connect(EndpointConfig.from_dict(suite.judge)) if not cfg.mock_mode else None
        if judge is None:
            cfg.require("judge")
            judge = cfg.client("judge")
    report = evaluation.run_suite(suite, answerer, model_id=model_id, baseline=baseline, judge=judge,
                                  seed=cfg.seed)
    if args.out:
        report.write(args.out)
    _emit(report.to_dict())
    return 0


# -- dpo --------------------------------------------------------------------


def cmd_dpo(args) -> int:
    cfg = _config(args)
    policy = pl.load_snapshot(args.policy) if args.policy else pl.TabularPolicy.uniform(pl.Vocab.toy())
    ref = pl.load_snapshot(args.ref) if args.ref else policy.copy()
    dcfg = pl.DpoConfig(args.beta, args.lr, args.epochs, cfg.seed)
    if args.iterative:
        if not args.seeds:
            raise ValidationError("--iterative needs --seeds")
        cfg.require("generator", "reward")
        prompts = arbitrage.expand_seeds(arbitrage.load_seeds(args.seeds), cfg.client("generator"),
                                         args.k, cfg.seed)
        policy, metrics = pl.iterative_dpo(policy, ref, prompts, cfg.client("reward"), args.rounds, dcfg,
                                           n=args.n, refresh_ref=not args.keep_ref)
        for m in metrics:
            sys.stdout.write(json.dumps(m.to_dict()) + "\n")
    else:
        if not args.prefs:
            raise ValidationError("offline DPO needs --prefs")
        pairs = pl.encode_pairs(policy.vocab, read_prefs(args.prefs))
        for epoch in range(dcfg.epochs):
            loss = pl.dpo_epoch(policy, ref, pairs, dcfg)
            sys.stdout.write(json.dumps({"epoch": epoch, "loss": round(loss, 4), "raw_loss": loss}) + "\n")
    pl.save_snapshot(policy, args.out, "dpo-iterative" if args.iterative else "dpo-offline")
    return 0


# -- pipeline ---------------------------------------------------------------


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    manifest = run_pipeline(cfg, args.out)
    _emit({k: v for k, v in manifest.items() if k != "files"})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--mock", action="store_true", default=argparse.SUPPRESS,
                        help="use deterministic mock endpoints everywhere")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="forgeline", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", parents=[common], help="linear merge of checkpoints")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--weights", default="equal", help="equal | w1,w2,... | proportional:c1,c2,...")
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=[d.value for d in ts.DType])
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("arbitrage", parents=[common], help="seeds.jsonl -> sft.jsonl + prefs.jsonl")
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4, help="prompts per seed")
    p.add_argument("--n", type=int, default=arbitrage.DEFAULT_N, help="best-of-N width")
    p.add_argument("--quorum", type=int)
    p.add_argument("--min-margin", type=float, default=arbitrage.DEFAULT_MIN_MARGIN)
    p.set_defaults(func=cmd_arbitrage)

    p = sub.add_parser("refine", parents=[common], help="iterative supervised refinement campaign")
    p.add_argument("--campaign", required=True)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true", help="append to an existing ledger")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="run an evaluation suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--model-endpoint", required=True,
                   help="endpoint JSON file, URL, policy .safetensors, or 'oracle'")
    p.add_argument("--baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dpo", parents=[common], help="offline or iterative DPO on the toy policy")
    p.add_argument("--prefs")
    p.add_argument("--policy")
    p.add_argument("--ref")
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--iterative", action="store_true")
    p.add_argument("--seeds")
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--keep-ref", action="store_true", help="do not refresh the reference each round")
    p.set_defaults(func=cmd_dpo)

    p = sub.add_parser("pipeline", parents=[common], help="full three-stage recipe")
    p.add_argument("--out", default="forgeline-run")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("mock", False), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.mock:
        os.environ.setdefault("SOURCE_DATE_EPOCH", "0")
    log.info("kernel backend: %s", kernels.BACKEND)
    try:
        return args.func(args)
    except ForgelineError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (OSError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 3
    except KeyboardInterrupt:
        log.error("interrupted; ledger entries already written are flushed")
        return 130
    except Exception:  # invariant breach
        log.exception("internal error")
        return 4


if __name__ == "__main__":
    sys.exit(main())
