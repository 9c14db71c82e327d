"""JSONL record types shared by arbitrage, policy training and refinement."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from forgeline.errors import SchemaError, ValidationError


@dataclass(frozen=True)
class SftRecord:
    prompt: str
    completion: str
    reward: float
    source: str

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValidationError("SftRecord reward must be finite")

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "completion": self.completion, "reward": self.reward, "source": self.source}


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    margin: float

    def __post_init__(self):
        if not self.margin > 0:
            raise ValidationError("PreferencePair margin must be > 0")
        if self.chosen == self.rejected:
            raise ValidationError("chosen and rejected must differ")

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "chosen": self.chosen, "rejected": self.rejected, "margin": self.margin}


def dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path: str | Path, rows: Iterable) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row.to_dict() if hasattr(row, "to_dict") else row) + "\n")
    return path


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (line number, object); blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def read_sft(path: str | Path) -> list[SftRecord]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(SftRecord(obj["prompt"], obj["completion"], float(obj.get("reward", 0.0)), obj.get("source", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad SFT record: {exc}") from exc
    return out


def read_prefs(path: str | Path) -> list[PreferencePair]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(PreferencePair(obj["prompt"], obj["chosen"], obj["rejected"], float(obj["margin"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad preference pair: {exc}") from exc
    return out
