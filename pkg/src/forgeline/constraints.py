"""Verifiable instruction constraints for Arabic and general text.

All counting happens on NFC-normalized text. Diacritics are the code points
U+064B..U+0652 (tanwin, fatha, damma, kasra, shadda, sukun) and U+0670
(superscript alef).
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

from forgeline.errors import SchemaError, UnknownLexicon, ValidationError

DIACRITICS = frozenset([chr(c) for c in range(0x064B, 0x0653)] + [chr(0x0670)])
TATWEEL = "\u0640"
COMMAS = (",", "\u060c")
SENTENCE_TERMINATORS = ".!?\u061f\u2026"

# Unicode White_Space property (PropList.txt).
WHITE_SPACE = "".join(
    chr(c)
    for c in [*range(0x09, 0x0E), 0x20, 0x85, 0xA0, 0x1680, *range(0x2000, 0x200B),
              0x2028, 0x2029, 0x202F, 0x205F, 0x3000]
)
_WORD_RE = re.compile(f"[^{re.escape(WHITE_SPACE)}]+")
_SENTENCE_SPLIT_RE = re.compile(f"[{re.escape(SENTENCE_TERMINATORS)}]")
_DIACRITIC_TABLE = {ord(c): None for c in DIACRITICS}


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def count_diacritics(text: str) -> int:
    return sum(1 for ch in nfc(text) if ch in DIACRITICS)


def strip_diacritics(text: str) -> str:
    return nfc(text).translate(_DIACRITIC_TABLE)


def words(text: str) -> list[str]:
    return _WORD_RE.findall(nfc(text))


def count_words(text: str) -> int:
    return len(words(text))


def segment_sentences(text: str) -> list[str]:
    parts = (p.strip(WHITE_SPACE) for p in _SENTENCE_SPLIT_RE.split(nfc(text)))
    return [p for p in parts if p]


@dataclass(frozen=True)
class VerbLexicon:
    id: str
    forms: frozenset[str]

    def __post_init__(self):
        forms = frozenset(strip_diacritics(f).strip() for f in self.forms)
        forms = frozenset(f for f in forms if f)
        if not forms:
            raise ValidationError(f"lexicon {self.id!r} is empty")
        object.__setattr__(self, "forms", forms)

    @classmethod
    def load(cls, path: str | Path, lexicon_id: str | None = None) -> "VerbLexicon":
        """One verb form per line; ``#`` starts a comment."""
        path = Path(path)
        forms = []
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                forms.append(line)
        return cls(lexicon_id or path.stem, frozenset(forms))


# Process-wide registry; check() also accepts an explicit mapping.
LEXICONS: dict[str, VerbLexicon] = {}


def register_lexicon(lexicon: VerbLexicon) -> None:
    LEXICONS[lexicon.id] = lexicon


# -- constraint kinds -------------------------------------------------------


@dataclass(frozen=True)
class MinWords:
    n: int


@dataclass(frozen=True)
class MaxWords:
    n: int


@dataclass(frozen=True)
class NoCommas:
    pass


@dataclass(frozen=True)
class DiacriticCount:
    n: int
    mode: str = "exact"


@dataclass(frozen=True)
class SentenceStartsWithVerb:
    lexicon_id: str


@dataclass(frozen=True)
class EndsWithPhrase:
    phrase: str


@dataclass(frozen=True)
class ForbiddenWords:
    words: tuple[str, ...]


ConstraintSpec = Union[
    MinWords, MaxWords, NoCommas, DiacriticCount, SentenceStartsWithVerb, EndsWithPhrase, ForbiddenWords
]

_KINDS = {
    "min_words": MinWords,
    "max_words": MaxWords,
    "no_commas": NoCommas,
    "diacritic_count": DiacriticCount,
    "sentence_starts_with_verb": SentenceStartsWithVerb,
    "ends_with_phrase": EndsWithPhrase,
    "forbidden_words": ForbiddenWords,
}
_NAMES = {cls: name for name, cls in _KINDS.items()}


def validate_spec(spec: ConstraintSpec) -> ConstraintSpec:
    if isinstance(spec, (MinWords, MaxWords, DiacriticCount)):
        if not isinstance(spec.n, int) or spec.n < 0:
            raise ValidationError(f"{type(spec).__name__}.n must be a non-negative integer")
    if isinstance(spec, DiacriticCount) and spec.mode not in ("exact", "at_least"):
        raise ValidationError(f"unknown diacritic mode {spec.mode!r}")
    if isinstance(spec, ForbiddenWords) and (not spec.words or not all(spec.words)):
        raise ValidationError("ForbiddenWords entries must be non-empty")
    if isinstance(spec, EndsWithPhrase) and not spec.phrase:
        raise ValidationError("EndsWithPhrase needs a phrase")
    return spec


def spec_from_dict(obj: Mapping) -> ConstraintSpec:
    """Parse the JSONL form, e.g. ``{"type": "diacritic_count", "n": 3, "mode": "exact"}``."""
    obj = dict(obj)
    kind = obj.pop("type", None)
    if kind not in _KINDS:
        raise SchemaError(f"unknown constraint type {kind!r}")
    if kind == "forbidden_words":
        obj["words"] = tuple(obj.get("words", ()))
    try:
        spec = _KINDS[kind](**obj)
    except TypeError as exc:
        raise SchemaError(f"bad parameters for {kind}: {exc}") from exc
    return validate_spec(spec)


def spec_to_dict(spec: ConstraintSpec) -> dict:
    out = {"type": _NAMES[type(spec)]}
    for k, v in spec.__dict__.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def describe(spec: ConstraintSpec) -> str:
    """Arabic instruction text for a constraint, used when rendering prompts."""
    match spec:
        case MinWords(n):
            return f"استخدم {n} كلمة على الأقل."
        case MaxWords(n):
            return f"لا تتجاوز {n} كلمة."
        case NoCommas():
            return "لا تستخدم الفواصل."
        case DiacriticCount(n, "exact"):
            return f"أضف {n} من علامات التشكيل إلى الإجابة."
        case DiacriticCount(n, _):
            return f"أضف {n} على الأقل من علامات التشكيل إلى الإجابة."
        case SentenceStartsWithVerb(_):
            return "ابدأ كل جملة بفعل."
        case EndsWithPhrase(phrase):
            return f"اختم إجابتك بعبارة: {phrase}"
        case ForbiddenWords(ws):
            return "لا تستخدم الكلمات: " + " ".join(ws)
    raise ValidationError(f"unsupported constraint {spec!r}")


# -- checking ---------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintResult:
    passed: bool
    measured: int | str
    detail: str = field(default="")


def _lexicon(lexicon_id: str, lexicons: Mapping[str, VerbLexicon] | None) -> VerbLexicon:
    table = LEXICONS if lexicons is None else lexicons
    try:
        return table[lexicon_id]
    except KeyError:
        raise UnknownLexicon(f"lexicon {lexicon_id!r} is not loaded") from None


def _bare(word: str) -> str:
    word = strip_diacritics(word).replace(TATWEEL, "")
    start, end = 0, len(word)
    while start < end and unicodedata.category(word[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(word[end - 1]).startswith("P"):
        end -= 1
    return word[start:end].casefold()


def check(
    spec: ConstraintSpec, text: str, lexicons: Mapping[str, VerbLexicon] | None = None
) -> ConstraintResult:
    match spec:
        case MinWords(n):
            m = count_words(text)
            return ConstraintResult(m >= n, m, f"{m} words, need >= {n}")
        case MaxWords(n):
            m = count_words(text)
            return ConstraintResult(m <= n, m, f"{m} words, need <= {n}")
        case NoCommas():
            m = sum(text.count(c) for c in COMMAS)
            return ConstraintResult(m == 0, m, f"{m} commas")
        case DiacriticCount(n, mode):
            m = count_diacritics(text)
            ok = m == n if mode == "exact" else m >= n
            return ConstraintResult(ok, m, f"{m} diacritics, need {mode} {n}")
        case SentenceStartsWithVerb(lexicon_id):
            lex = _lexicon(lexicon_id, lexicons)
            sentences = segment_sentences(text)
            offenders = []
            for s in sentences:
                first = words(s)[0]
                if strip_diacritics(first) not in lex.forms:
                    offenders.append(first)
            ok = bool(sentences) and not offenders
            return ConstraintResult(
                ok, len(sentences) - len(offenders), "offending starts: " + " ".join(offenders)
            )
        case EndsWithPhrase(phrase):
            tail = nfc(text).strip(WHITE_SPACE)
            ok = tail.endswith(nfc(phrase))
            return ConstraintResult(ok, tail[-len(phrase):] if tail else "", f"expected ending {phrase!r}")
        case ForbiddenWords(banned):
            present = {_bare(w) for w in words(text)}
            hits = [w for w in banned if _bare(w) in present]
            return ConstraintResult(not hits, hits[0] if hits else "", "found: " + " ".join(hits))
    raise ValidationError(f"unsupported constraint {spec!r}")


def check_all(specs, text: str, lexicons: Mapping[str, VerbLexicon] | None = None) -> list[ConstraintResult]:
    return [check(s, text, lexicons) for s in specs]
