"""Benchmark runners and report aggregation.

Task files are JSONL, one item per line:

* ``MCQ`` / ``FaithMCQ``: ``{id, question, options, gold_index[, context]}``
* ``SpanQA``: ``{id, question, passage, gold_answers}``
* ``VerifiableInstruction``: ``{id, prompt, constraints}``
* ``PairwiseArena``: ``{id, prompt}``

An answerer is any callable mapping a prompt string to a response string.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import random
import unicodedata
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

from forgeline import constraints as C
from forgeline.errors import EmptyReport, SchemaError, UnparseableVerdict, ValidationError
from forgeline.gateway import Client, GenerationRequest, stable_seed
from forgeline.records import iter_jsonl

log = logging.getLogger(__name__)

Answerer = Callable[[str], str]

LATIN_LABELS = "ABCDEFGHIJ"
ARABIC_LABELS = "أبجدهوزحطي"  # abjad order
ARABIC_INDIC_DIGITS = "١٢٣٤٥٦٧٨٩"
_ALEF_VARIANTS = {"ا": "أ", "إ": "أ", "آ": "أ"}
UNANSWERABLE = "لا يمكن الإجابة"


class TaskKind(str, enum.Enum):
    MCQ = "MCQ"
    SPAN_QA = "SpanQA"
    VERIFIABLE_INSTRUCTION = "VerifiableInstruction"
    FAITH_MCQ = "FaithMCQ"
    PAIRWISE_ARENA = "PairwiseArena"


@dataclass(frozen=True)
class McqItem:
    id: str
    question: str
    options: tuple[str, ...]
    gold_index: int
    context: str = ""


@dataclass(frozen=True)
class SpanQaItem:
    id: str
    question: str
    passage: str
    gold_answers: tuple[str, ...]


@dataclass(frozen=True)
class InstructionItem:
    id: str
    prompt: str
    constraints: tuple


@dataclass(frozen=True)
class ArenaItem:
    id: str
    prompt: str


def _item(kind: TaskKind, obj: dict, where: str):
    try:
        if kind in (TaskKind.MCQ, TaskKind.FAITH_MCQ):
            item = McqItem(str(obj["id"]), obj["question"], tuple(obj["options"]), int(obj["gold_index"]),
                           obj.get("context", ""))
            if not 0 <= item.gold_index < len(item.options):
                raise SchemaError(f"{where}: gold_index outside options")
            if len(item.options) > len(LATIN_LABELS):
                raise SchemaError(f"{where}: too many options")
            return item
        if kind is TaskKind.SPAN_QA:
            item = SpanQaItem(str(obj["id"]), obj["question"], obj["passage"], tuple(obj["gold_answers"]))
            if not item.gold_answers:
                raise SchemaError(f"{where}: gold_answers is empty")
            return item
        if kind is TaskKind.VERIFIABLE_INSTRUCTION:
            specs = tuple(C.spec_from_dict(c) for c in obj["constraints"])
            if not specs:
                raise SchemaError(f"{where}: constraints is empty")
            return InstructionItem(str(obj["id"]), obj["prompt"], specs)
        return ArenaItem(str(obj["id"]), obj["prompt"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"{where}: bad {kind.value} item: {exc}") from exc


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kind: TaskKind
    items_path: Path

    def load(self) -> list:
        items = [_item(self.kind, obj, f"{self.items_path}:{n}") for n, obj in iter_jsonl(self.items_path)]
        return sorted(items, key=lambda it: it.id)


def _items(task) -> list:
    return task.load() if isinstance(task, TaskSpec) else list(task)


def _answer_all(answerer: Answerer, prompts: Sequence[str], parallelism: int) -> list[str]:
    if parallelism <= 1:
        return [answerer(p) for p in prompts]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(answerer, prompts))


# -- multiple choice --------------------------------------------------------


def render_mcq(item: McqItem) -> str:
    lines = []
    if item.context:
        lines += [item.context, ""]
    lines.append(item.question)
    lines += [f"{LATIN_LABELS[i]}. {opt}" for i, opt in enumerate(item.options)]
    lines.append("أجب بحرف الخيار الصحيح فقط.")
    return "\n".join(lines)


def _trim_punct(tok: str) -> str:
    start, end = 0, len(tok)
    while start < end and unicodedata.category(tok[start])[0] in "PS":
        start += 1
    while end > start and unicodedata.category(tok[end - 1])[0] in "PS":
        end -= 1
    return tok[start:end]


def extract_option(response: str, n_options: int = 4) -> int | None:
    """Index of the first standalone option label in the response.

    A label is a whitespace token that, after trimming punctuation, is a
    single Latin capital (A, B, ...), an abjad-order Arabic letter
    (أ ب ج د ...) or an Arabic-Indic digit (١ ٢ ...).
    """
    for raw in C.nfc(response).split():
        tok = _trim_punct(raw)
        if len(tok) != 1:
            continue
        tok = _ALEF_VARIANTS.get(tok, tok)
        for labels in (LATIN_LABELS, ARABIC_LABELS, ARABIC_INDIC_DIGITS):
            i = labels.find(tok)
            if 0 <= i < n_options:
                return i
    return None


@dataclass(frozen=True)
class McqScore:
    score: float
    correct: int
    total: int
    unextractable: int


def run_mcq(task, answerer: Answerer, parallelism: int = 1) -> McqScore:
    items = _items(task)
    if not items:
        raise EmptyReport("task has no items")
    responses = _answer_all(answerer, [render_mcq(it) for it in items], parallelism)
    correct = unextractable = 0
    for item, resp in zip(items, responses):
        idx = extract_option(resp, len(item.options))
        if idx is None:
            unextractable += 1
        elif idx == item.gold_index:
            correct += 1
    return McqScore(100.0 * correct / len(items), correct, len(items), unextractable)


# -- span QA ----------------------------------------------------------------


def render_span_qa(item: SpanQaItem) -> str:
    return f"{item.passage}\n\nالسؤال: {item.question}\nاستخرج الإجابة من النص كما هي."


def normalize_answer(text: str) -> str:
    text = C.strip_diacritics(text).replace(C.TATWEEL, "")
    toks = [_trim_punct(t) for t in text.split()]
    return " ".join(t for t in toks if t)


def span_f1(prediction: str, gold: str) -> float:
    p, g = normalize_answer(prediction).split(), normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class SpanScore:
    em: float
    f1: float


def run_span_qa(task, answerer: Answerer, parallelism: int = 1) -> SpanScore:
    items = _items(task)
    if not items:
        raise EmptyReport("task has no items")
    responses = _answer_all(answerer, [render_span_qa(it) for it in items], parallelism)
    em = f1 = 0.0
    for item, resp in zip(items, responses):
        pred = normalize_answer(resp)
        em += float(any(pred and pred == normalize_answer(g) for g in item.gold_answers))
        f1 += max(span_f1(resp, g) for g in item.gold_answers)
    return SpanScore(100.0 * em / len(items), 100.0 * f1 / len(items))


# -- verifiable instructions ------------------------------------------------


def loose_variants(response: str) -> list[str]:
    """The raw response plus markdown-stripped and boundary-line-dropped variants."""
    lines = response.split("\n")
    dropped = [
        response,
        "\n".join(lines[1:]).strip(),
        "\n".join(lines[:-1]).strip(),
        "\n".join(lines[1:-1]).strip(),
    ]
    out = []
    for v in dropped + [d.replace("*", "") for d in dropped]:
        if (v == response or v.strip()) and v not in out:
            out.append(v)
    return out


@dataclass(frozen=True)
class IfScore:
    strict: float
    loose: float


def run_ifeval(task, answerer: Answerer, lexicons=None, parallelism: int = 1) -> IfScore:
    items = _items(task)
    if not items:
        raise EmptyReport("task has no items")
    responses = _answer_all(answerer, [it.prompt for it in items], parallelism)
    strict = loose = 0
    for item, resp in zip(items, responses):
        ok = all(r.passed for r in C.check_all(item.constraints, resp, lexicons))
        strict += ok
        loose += ok or any(
            all(r.passed for r in C.check_all(item.constraints, v, lexicons)) for v in loose_variants(resp)
        )
    return IfScore(100.0 * strict / len(items), 100.0 * loose / len(items))


# -- arena ------------------------------------------------------------------

_POINTS_FIRST = {"A": 1.0, "B": 0.0, "tie": 0.5}
_POINTS_SWAPPED = {"A": 0.0, "B": 1.0, "tie": 0.5}


@dataclass(frozen=True)
class MatchResult:
    prompt_id: str
    orderings: tuple[str, str]  # verdicts for (A shown first, B shown first)
    points: float


@dataclass(frozen=True)
class ArenaResult:
    win_rate: float
    matches: tuple[MatchResult, ...]


def _verdict(judge: Client, prompt: str, first: str, second: str, rubric) -> str:
    # an empty answer loses without consulting the judge
    if not first.strip() or not second.strip():
        return "tie" if first.strip() == second.strip() else ("B" if not first.strip() else "A")
    try:
        return judge.judge_pair(prompt, first, second, rubric).kind
    except UnparseableVerdict as exc:
        log.warning("unparseable pairwise verdict scored as tie: %s", exc)
        return "tie"


def run_arena(
    task, answerer_a: Answerer, answerer_b: Answerer, judge: Client, seed: int = 0,
    rubric: str | None = None, parallelism: int = 1,
) -> ArenaResult:
    """Win-rate of A: every prompt is judged in both presentation orders."""
    items = _items(task)
    if not items:
        raise EmptyReport("task has no items")
    prompts = [it.prompt for it in items]
    outs_a = _answer_all(answerer_a, prompts, parallelism)
    outs_b = _answer_all(answerer_b, prompts, parallelism)
    matches = []
    for item, a, b in zip(items, outs_a, outs_b):
        # the seed only decides which ordering is requested first
        swapped_first = random.Random(stable_seed("arena", seed, item.id)).random() < 0.5
        if swapped_first:
            v2 = _verdict(judge, item.prompt, b, a, rubric)
            v1 = _verdict(judge, item.prompt, a, b, rubric)
        else:
            v1 = _verdict(judge, item.prompt, a, b, rubric)
            v2 = _verdict(judge, item.prompt, b, a, rubric)
        points = (_POINTS_FIRST[v1] + _POINTS_SWAPPED[v2]) / 2
        matches.append(MatchResult(item.id, (v1, v2), points))
    total = sum(m.points for m in matches)
    return ArenaResult(total / len(matches), tuple(matches))


# -- reports ----------------------------------------------------------------


def utc_timestamp() -> str:
    """ISO timestamp; honours SOURCE_DATE_EPOCH for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class EvalReport:
    per_task: dict[str, float]
    average: float
    model_id: str = ""
    timestamp: str = ""
    details: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "timestamp": self.timestamp,
            "per_task": dict(sorted(self.per_task.items())),
            "average": self.average,
            "details": {k: self.details[k] for k in sorted(self.details)},
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "EvalReport":
        return cls(dict(obj["per_task"]), float(obj["average"]), obj.get("model_id", ""),
                   obj.get("timestamp", ""), dict(obj.get("details", {})))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
        return path


def aggregate(
    scores: Mapping[str, float], model_id: str = "", timestamp: str | None = None,
    details: Mapping[str, dict] | None = None,
) -> EvalReport:
    """Unweighted mean over tasks."""
    if not scores:
        raise EmptyReport("no task scores to aggregate")
    per_task = dict(sorted((k, float(v)) for k, v in scores.items()))
    average = sum(per_task.values()) / len(per_task)
    return EvalReport(per_task, average, model_id, timestamp or utc_timestamp(), dict(details or {}))


# -- suites -----------------------------------------------------------------


@dataclass(frozen=True)
class Suite:
    tasks: tuple[TaskSpec, ...]
    critical_capabilities: tuple[str, ...] = ()
    judge: Mapping | None = None

    @classmethod
    def load(cls, path: str | Path) -> "Suite":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
            tasks = tuple(
                TaskSpec(t["id"], TaskKind(t["kind"]), (path.parent / t["items_path"]).resolve())
                for t in obj["tasks"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: bad suite file: {exc}") from exc
        ids = [t.id for t in tasks]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"{path}: duplicate task ids")
        critical = tuple(obj.get("critical_capabilities", ()))
        unknown = set(critical) - set(ids)
        if unknown:
            raise SchemaError(f"{path}: unknown critical capabilities {sorted(unknown)}")
        return cls(tasks, critical, obj.get("judge"))


def run_suite(
    suite: Suite,
    answerer: Answerer,
    *,
    model_id: str = "",
    baseline: Answerer | None = None,
    judge: Client | None = None,
    lexicons=None,
    seed: int = 0,
    parallelism: int = 1,
    timestamp: str | None = None,
) -> EvalReport:
    scores, details = {}, {}
    for task in suite.tasks:
        if task.kind in (TaskKind.MCQ, TaskKind.FAITH_MCQ):
            r = run_mcq(task, answerer, parallelism)
            scores[task.id] = r.score
            details[task.id] = {"accuracy": r.score, "unextractable": r.unextractable, "items": r.total}
        elif task.kind is TaskKind.SPAN_QA:
            r = run_span_qa(task, answerer, parallelism)
            scores[task.id] = r.f1
            details[task.id] = {"em": r.em, "f1": r.f1}
        elif task.kind is TaskKind.VERIFIABLE_INSTRUCTION:
            r = run_ifeval(task, answerer, lexicons, parallelism)
            scores[task.id] = r.strict
            details[task.id] = {"strict": r.strict, "loose": r.loose}
        else:
            if baseline is None or judge is None:
                raise ValidationError(f"arena task {task.id!r} needs a baseline and a judge")
            r = run_arena(task, answerer, baseline, judge, seed, parallelism=parallelism)
            scores[task.id] = 100.0 * r.win_rate
            details[task.id] = {"win_rate": r.win_rate, "prompts": len(r.matches)}
    return aggregate(scores, model_id, timestamp, details)


def client_answerer(client: Client, seed: int = 0, max_tokens: int = 512) -> Answerer:
    def answer(prompt: str) -> str:
        req = GenerationRequest.user(prompt, n=1, temperature=0.0, max_tokens=max_tokens,
                                     seed=stable_seed("answer", seed, prompt))
        return client.generate(req)[0]

    return answer


def policy_answerer(policy, seed: int = 0, max_len: int = 24) -> Answerer:
    from forgeline.policy import sample_text

    frozen = policy.copy()
    return lambda prompt: sample_text(frozen, stable_seed("answer", seed, prompt), max_len)


def gold_answerer(suite: Suite) -> Answerer:
    """Answers MCQ and span-QA prompts from their gold labels (a perfect oracle)."""
    table = {}
    for task in suite.tasks:
        for item in task.load():
            if isinstance(item, McqItem):
                table[render_mcq(item)] = LATIN_LABELS[item.gold_index]
            elif isinstance(item, SpanQaItem):
                table[render_span_qa(item)] = item.gold_answers[0]
    return lambda prompt: table.get(prompt, "")
