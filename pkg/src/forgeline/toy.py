"""The desk-scale toy stack: vocabulary, verb lexicon, seeds and synthetic eval suite.

The toy language is small enough for a bigram policy to learn every
constraint the suite checks (comma-free text, diacritics, verb-initial
sentences, a closing phrase, no Latin or forbidden words).
"""

from __future__ import annotations

import json
from pathlib import Path

from forgeline import constraints as C

VERBS = ("كتب", "ذهب", "قرأ", "جاء", "درس")
DIACRITIZED = ("كَتَبَ", "الدَّرْسَ")
NOUNS = ("الولد", "البنت", "الكتاب", "المدرسة", "البيت")
PARTICLES = ("في", "إلى", "مع")
CLOSING = "شكرا"
FORBIDDEN = "سيء"
LATIN = "ok"
WORDS = VERBS + DIACRITIZED + NOUNS + PARTICLES + (".", "،", CLOSING, FORBIDDEN, LATIN)

LEXICON_ID = "toy_verbs"
LEXICON = C.VerbLexicon(LEXICON_ID, frozenset(VERBS))
C.register_lexicon(LEXICON)

SEEDS = [
    {
        "id": "no-commas",
        "template": "اكتب فقرة عن المدرسة. لا تستخدم الفواصل واستخدم {N} كلمات على الأقل.",
        "constraints": [{"type": "no_commas"}, {"type": "min_words", "n": "{N}"}],
        "ranges": {"N": [5, 8]},
        "language": "ar",
    },
    {
        "id": "diacritics",
        "template": "اكتب جملة عن الكتاب وأضف {N} من علامات التشكيل على الأقل.",
        "constraints": [{"type": "diacritic_count", "n": "{N}", "mode": "at_least"}],
        "ranges": {"N": [1, 3]},
        "language": "ar",
    },
    {
        "id": "verb-start",
        "template": "اكتب جملتين عن البيت وابدأ كل جملة بفعل.",
        "constraints": [{"type": "sentence_starts_with_verb", "lexicon_id": LEXICON_ID}],
        "ranges": {},
        "language": "ar",
    },
    {
        "id": "closing",
        "template": "اكتب رسالة قصيرة واختمها بكلمة شكرا ولا تستخدم كلمة سيء.",
        "constraints": [
            {"type": "ends_with_phrase", "phrase": CLOSING},
            {"type": "forbidden_words", "words": [FORBIDDEN]},
        ],
        "ranges": {},
        "language": "ar",
    },
]

SUITE_TASKS = {
    "toy_no_commas": [{"type": "no_commas"}, {"type": "min_words", "n": 5}],
    "toy_diacritics": [{"type": "diacritic_count", "n": 1, "mode": "at_least"}],
    "toy_verb_start": [{"type": "sentence_starts_with_verb", "lexicon_id": LEXICON_ID}],
    "toy_closing": [{"type": "ends_with_phrase", "phrase": CLOSING}, {"type": "forbidden_words", "words": [FORBIDDEN]}],
    "toy_clean": [{"type": "forbidden_words", "words": [LATIN, FORBIDDEN]}, {"type": "max_words", "n": 30}],
}


def write_seeds(path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for seed in SEEDS:
            fh.write(json.dumps(seed, ensure_ascii=False) + "\n")
    return path


def write_suite(directory: str | Path, items_per_task: int = 24) -> Path:
    """Write a VerifiableInstruction suite (one JSONL per task) plus suite.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tasks = []
    for task_id, specs in SUITE_TASKS.items():
        items_path = directory / f"{task_id}.jsonl"
        with open(items_path, "w", encoding="utf-8") as fh:
            for i in range(items_per_task):
                item = {
                    "id": f"{task_id}-{i:03d}",
                    "prompt": f"مهمة {i}: " + " ".join(C.describe(C.spec_from_dict(s)) for s in specs),
                    "constraints": specs,
                }
                fh.write(json.dumps(item, ensure_ascii=False) + "\n")
        tasks.append({"id": task_id, "kind": "VerifiableInstruction", "items_path": items_path.name})
    suite = directory / "suite.json"
    suite.write_text(
        json.dumps({"tasks": tasks, "critical_capabilities": list(SUITE_TASKS)}, ensure_ascii=False, indent=2),
        encoding="utf-8",
    )
    return suite
