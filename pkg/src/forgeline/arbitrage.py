"""Synthetic data via multilingual arbitrage.

seed instructions -> synthetic prompts -> N sampled completions -> reward
scores -> judge-panel quality gate -> best-of-N SFT records and
max-reward-difference preference pairs.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from forgeline import constraints as C
from forgeline.errors import MissingScores, UnparseableVerdict, UnresolvedPlaceholder, ValidationError
from forgeline.gateway import ChatMessage, Client, GenerationRequest, stable_seed
from forgeline.records import PreferencePair, SftRecord, iter_jsonl, write_jsonl

log = logging.getLogger(__name__)

PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")
DEFAULT_N = 8
DEFAULT_MIN_MARGIN = 0.05
PROMPT_WRITER = (
    "أنت تكتب مهام تدريبية باللغة العربية. اكتب موضوعا قصيرا لمهمة تتبع التعليمات التالية."
)


@dataclass(frozen=True)
class SeedInstruction:
    id: str
    template: str
    constraints: tuple[dict, ...] = ()
    language: str = "ar"
    ranges: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.template:
            raise ValidationError(f"seed {self.id!r} has an empty template")
        object.__setattr__(self, "constraints", tuple(dict(c) for c in self.constraints))
        object.__setattr__(self, "ranges", {k: (int(v[0]), int(v[1])) for k, v in dict(self.ranges).items()})

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SeedInstruction":
        return cls(
            id=str(obj["id"]),
            template=obj["template"],
            constraints=tuple(obj.get("constraints", ())),
            language=obj.get("language", "ar"),
            ranges=obj.get("ranges", {}),
        )

    def instantiate(self, rng: random.Random) -> tuple[str, tuple]:
        """Draw placeholder values and fill both the template and constraint params."""
        names = set(PLACEHOLDER_RE.findall(self.template))
        for c in self.constraints:
            for v in c.values():
                if isinstance(v, str):
                    names.update(PLACEHOLDER_RE.findall(v))
        missing = names - set(self.ranges)
        if missing:
            raise UnresolvedPlaceholder(f"seed {self.id!r}: no range for {sorted(missing)}")
        values = {name: rng.randint(*self.ranges[name]) for name in sorted(names)}

        def fill(v):
            if not isinstance(v, str):
                return v
            whole = PLACEHOLDER_RE.fullmatch(v)
            if whole:
                return values[whole.group(1)]
            return PLACEHOLDER_RE.sub(lambda m: str(values[m.group(1)]), v)

        text = PLACEHOLDER_RE.sub(lambda m: str(values[m.group(1)]), self.template)
        specs = tuple(C.spec_from_dict({k: fill(v) for k, v in c.items()}) for c in self.constraints)
        return text, specs


def load_seeds(path: str | Path) -> list[SeedInstruction]:
    seeds = []
    for lineno, obj in iter_jsonl(path):
        try:
            seeds.append(SeedInstruction.from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad seed instruction: {exc}") from exc
    return seeds


@dataclass(frozen=True)
class SyntheticPrompt:
    id: str
    seed_id: str
    prompt: str
    constraints: tuple = ()


def expand_seeds(
    seeds: Sequence[SeedInstruction], gateway: Client, k_per_seed: int, rng_seed: int
) -> list[SyntheticPrompt]:
    if k_per_seed < 1:
        raise ValidationError("k_per_seed must be >= 1")
    jobs = []
    for seed in seeds:
        for k in range(k_per_seed):
            rng = random.Random(stable_seed("expand", rng_seed, seed.id, k))
            instruction, specs = seed.instantiate(rng)
            jobs.append((seed, k, instruction, specs))

    def run(job):
        seed, k, instruction, specs = job
        req = GenerationRequest(
            (ChatMessage("system", PROMPT_WRITER), ChatMessage("user", instruction)),
            n=1,
            max_tokens=32,
            seed=stable_seed("topic", rng_seed, seed.id, k),
        )
        topic = gateway.generate(req)[0].strip()
        return SyntheticPrompt(f"{seed.id}-{k}", seed.id, f"{topic}\n{instruction}", specs)

    return gateway.map(run, jobs)


@dataclass(frozen=True)
class ScoredCompletion:
    text: str
    reward: float | None = None
    panel_pass: bool | None = None


@dataclass(frozen=True)
class CompletionSet:
    prompt: str
    completions: tuple[ScoredCompletion, ...]
    constraints: tuple = ()
    prompt_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "completions", tuple(self.completions))
        if not self.completions:
            raise ValidationError("a CompletionSet needs at least one completion")

    @property
    def rewards(self) -> list[float | None]:
        return [c.reward for c in self.completions]


def sample_and_score(
    prompt: SyntheticPrompt | str,
    gateway_gen: Client,
    gateway_reward: Client,
    n: int = DEFAULT_N,
    constraints: Sequence = (),
    seed: int = 0,
) -> CompletionSet:
    if isinstance(prompt, SyntheticPrompt):
        text, constraints, pid = prompt.prompt, prompt.constraints, prompt.id
    else:
        text, pid = prompt, ""
    req = GenerationRequest.user(text, n=n, seed=stable_seed("sample", seed, pid, text))
    outs = gateway_gen.generate(req)
    # score everything before constructing the set so failures never leave it half-scored
    rewards = [gateway_reward.score_reward(text, o, constraints) for o in outs]
    return CompletionSet(
        text, tuple(ScoredCompletion(o, r) for o, r in zip(outs, rewards)), tuple(constraints), pid
    )


def panel_filter(
    cs: CompletionSet, judges: Sequence[Client], quorum: int, rubric: str | None = None
) -> CompletionSet:
    """Flag each completion with ``passes >= quorum``; nothing is removed."""
    if quorum < 1 or quorum > len(judges):
        raise ValidationError(f"quorum {quorum} impossible with {len(judges)} judges")
    flagged = []
    for comp in cs.completions:
        votes = 0
        for judge in judges:
            try:
                votes += judge.judge_quality(cs.prompt, comp.text, rubric).passed
            except UnparseableVerdict as exc:
                log.warning("unparseable judge verdict counted as fail: %s", exc)
        flagged.append(replace(comp, panel_pass=votes >= quorum))
    return replace(cs, completions=tuple(flagged))


def _survivors(cs: CompletionSet) -> list[tuple[int, ScoredCompletion]]:
    if any(c.reward is None or c.panel_pass is None for c in cs.completions):
        raise MissingScores("rewards and panel flags must be populated")
    return [(i, c) for i, c in enumerate(cs.completions) if c.panel_pass]


def build_sft_record(cs: CompletionSet, source: str = "arbitrage") -> SftRecord | None:
    """Best panel-passing completion; earliest index wins ties."""
    best = None
    for i, c in _survivors(cs):
        if best is None or c.reward > best.reward:
            best = c
    if best is None:
        return None
    return SftRecord(cs.prompt, best.text, best.reward, source)


def build_preference_pair(cs: CompletionSet, min_margin: float = DEFAULT_MIN_MARGIN) -> PreferencePair | None:
    """(argmax, argmin) reward over panel-passing completions, i.e. the max-difference pair."""
    if min_margin < 0:
        raise ValidationError("min_margin must be >= 0")
    alive = _survivors(cs)
    if len(alive) < 2:
        return None
    hi = lo = alive[0][1]
    for _, c in alive[1:]:
        if c.reward > hi.reward:
            hi = c
        if c.reward < lo.reward:
            lo = c
    margin = hi.reward - lo.reward
    if margin <= 0 or margin < min_margin or hi.text == lo.text:
        return None
    return PreferencePair(cs.prompt, hi.text, lo.text, margin)


@dataclass
class ArbitrageResult:
    sets: list[CompletionSet]
    sft: list[SftRecord]
    prefs: list[PreferencePair]

    def stats(self) -> dict:
        return {"prompts": len(self.sets), "sft_records": len(self.sft), "preference_pairs": len(self.prefs)}


def run_arbitrage(
    seeds: Sequence[SeedInstruction],
    generator: Client,
    reward: Client,
    judges: Sequence[Client],
    *,
    k_per_seed: int = 4,
    n: int = DEFAULT_N,
    quorum: int | None = None,
    min_margin: float = DEFAULT_MIN_MARGIN,
    seed: int = 0,
    source: str = "arbitrage",
) -> ArbitrageResult:
    prompts = expand_seeds(seeds, generator, k_per_seed, seed)
    quorum = quorum if quorum is not None else len(judges) // 2 + 1

    def one(p: SyntheticPrompt) -> CompletionSet:
        cs = sample_and_score(p, generator, reward, n=n, seed=seed)
        return panel_filter(cs, judges, quorum) if judges else replace(
            cs, completions=tuple(replace(c, panel_pass=True) for c in cs.completions)
        )

    sets = generator.map(one, prompts)
    sft = [r for r in (build_sft_record(cs, f"{source}:{cs.prompt_id}") for cs in sets) if r]
    prefs = [p for p in (build_preference_pair(cs, min_margin) for cs in sets) if p]
    return ArbitrageResult(sets, sft, prefs)


def write_outputs(result: ArbitrageResult, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return write_jsonl(out_dir / "sft.jsonl", result.sft), write_jsonl(out_dir / "prefs.jsonl", result.prefs)
