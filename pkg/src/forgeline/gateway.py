"""Clients for generator, reward and judge endpoints.

Live endpoints speak the chat-completion JSON protocol::

    POST {base_url}/chat/completions
    {"model", "messages": [{"role", "content"}], "n", "temperature", "max_tokens", "seed"}
    -> {"choices": [{"message": {"content"}, "finish_reason"}]}

``mock://`` endpoints (or ``FORGELINE_MOCK=1``) use :class:`MockClient`, a pure
function of its seed and inputs, so every stage runs offline.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Mapping, Sequence
from urllib.parse import parse_qsl, urlsplit

import httpx

from forgeline import constraints as C
from forgeline.errors import (
    MalformedResponse,
    NonFiniteScore,
    Transport,
    UnparseableVerdict,
    ValidationError,
)

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_id: str = "mock"
    auth_token_env: str = ""
    timeout_ms: int = 30_000
    max_retries: int = 3
    parallelism: int = 4

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")
        if self.timeout_ms < 1:
            raise ValidationError("timeout_ms must be >= 1")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "EndpointConfig":
        known = {k: obj[k] for k in cls.__dataclass_fields__ if k in obj}
        if "base_url" not in known:
            raise ValidationError("endpoint config needs base_url")
        return cls(**known)

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith("mock:")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        if self.role != "system" and not self.content:
            raise ValidationError(f"{self.role} message content must be non-empty")


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[ChatMessage, ...]
    n: int = 1
    temperature: float = 1.0
    max_tokens: int = 256
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be >= 1")
        if not self.messages or self.messages[-1].role != "user":
            raise ValidationError("last message must have role 'user'")

    @classmethod
    def user(cls, prompt: str, **kw) -> "GenerationRequest":
        return cls((ChatMessage("user", prompt),), **kw)

    def payload(self, model: str) -> dict:
        body = {
            "model": model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "n": self.n,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        return body


@dataclass(frozen=True)
class Completion:
    text: str
    truncated: bool = False


@dataclass(frozen=True)
class JudgeVerdict:
    kind: str  # "pass"/"fail" for quality, "A"/"B"/"tie" for pairwise
    rationale: str = ""

    @property
    def passed(self) -> bool:
        return self.kind == "pass"


# -- response grammar -------------------------------------------------------


def _first_token(text: str) -> str:
    toks = text.strip().split(maxsplit=1)
    return toks[0].strip(".:,;!*\"'()[]") if toks else ""


def parse_quality_verdict(text: str) -> JudgeVerdict:
    tok = _first_token(text).upper()
    if tok in ("PASS", "FAIL"):
        return JudgeVerdict(tok.lower(), text.strip())
    raise UnparseableVerdict(f"expected PASS or FAIL, got {text[:40]!r}")


def parse_pair_verdict(text: str) -> JudgeVerdict:
    tok = _first_token(text).upper()
    if tok in ("A", "B"):
        return JudgeVerdict(tok, text.strip())
    if tok == "TIE":
        return JudgeVerdict("tie", text.strip())
    raise UnparseableVerdict(f"expected A, B or TIE, got {text[:40]!r}")


_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def parse_reward(text: str) -> float:
    m = _NUMBER_RE.search(text)
    if not m:
        raise MalformedResponse(f"no score in reward response {text[:40]!r}")
    value = float(m.group())
    if not math.isfinite(value):
        raise NonFiniteScore(f"reward {value!r} is not finite")
    return value


def parse_choices(body) -> list[Completion]:
    try:
        choices = body["choices"]
        out = [
            Completion(c["message"]["content"], c.get("finish_reason") == "length")
            for c in choices
        ]
    except (KeyError, TypeError) as exc:
        raise MalformedResponse(f"unexpected response shape: {exc}") from exc
    if not all(isinstance(c.text, str) for c in out):
        raise MalformedResponse("choice content is not a string")
    return out


@functools.lru_cache(maxsize=1)
def default_templates() -> dict[str, str]:
    text = resources.files("forgeline").joinpath("data/templates.json").read_text(encoding="utf-8")
    return json.loads(text)


# -- clients ----------------------------------------------------------------


class Client:
    """Shared plumbing: bounded concurrency and ordered fan-out."""

    def __init__(self, cfg: EndpointConfig, templates: Mapping[str, str] | None = None):
        self.cfg = cfg
        self.templates = {**default_templates(), **(templates or {})}
        self._slots = threading.BoundedSemaphore(cfg.parallelism)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0

    def _enter(self):
        self._slots.acquire()
        with self._lock:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)

    def _exit(self):
        with self._lock:
            self.in_flight -= 1
        self._slots.release()

    def _bounded(self, fn, *args):
        self._enter()
        try:
            return fn(*args)
        finally:
            self._exit()

    def map(self, fn: Callable, items: Iterable) -> list:
        """Apply fn concurrently (at most ``parallelism`` at once); results keep input order."""
        items = list(items)
        if self.cfg.parallelism == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.cfg.parallelism) as pool:
            return list(pool.map(fn, items))

    # public operations
    def generate(self, req: GenerationRequest) -> list[str]:
        return [c.text for c in self.generate_detailed(req)]

    def generate_detailed(self, req: GenerationRequest) -> list[Completion]:
        out = self._bounded(self._generate, req)
        if len(out) != req.n:
            raise MalformedResponse(f"expected {req.n} completions, got {len(out)}")
        return out

    def score_reward(self, prompt: str, completion: str, constraints: Sequence = ()) -> float:
        if not prompt or not completion:
            raise ValidationError("reward scoring needs non-empty prompt and completion")
        value = self._bounded(self._score, prompt, completion, tuple(constraints))
        if not math.isfinite(value):
            raise NonFiniteScore(f"reward {value!r} is not finite")
        return float(value)

    def judge_quality(self, prompt: str, completion: str, rubric: str | None = None) -> JudgeVerdict:
        return parse_quality_verdict(self._bounded(self._judge_quality, prompt, completion, rubric))

    def judge_pair(self, prompt: str, a: str, b: str, rubric: str | None = None) -> JudgeVerdict:
        if not a or not b:
            raise ValidationError("pairwise judging needs two non-empty completions")
        return parse_pair_verdict(self._bounded(self._judge_pair, prompt, a, b, rubric))

    def _generate(self, req):
        raise NotImplementedError

    def _score(self, prompt, completion, constraints):
        raise NotImplementedError

    def _judge_quality(self, prompt, completion, rubric):
        raise NotImplementedError

    def _judge_pair(self, prompt, a, b, rubric):
        raise NotImplementedError


class HttpClient(Client):
    def __init__(
        self,
        cfg: EndpointConfig,
        templates: Mapping[str, str] | None = None,
        transport: httpx.BaseTransport | None = None,
        retry_seed: int = 0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(cfg, templates)
        headers = {"Content-Type": "application/json"}
        if cfg.auth_token_env:
            token = os.environ.get(cfg.auth_token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            timeout=cfg.timeout_ms / 1000,
            headers=headers,
            transport=transport,
        )
        self._rng = random.Random(retry_seed)
        self._rng_lock = threading.Lock()
        self._sleep = sleep

    def _post(self, body: dict) -> dict:
        attempt = 0
        while True:
            try:
                resp = self._http.post("/chat/completions", json=body)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(
                        f"status {resp.status_code}", request=resp.request, response=resp
                    )
                resp.raise_for_status()
            except httpx.HTTPStatusError as exc:
                retryable = exc.response.status_code == 429 or exc.response.status_code >= 500
                if not retryable or attempt >= self.cfg.max_retries:
                    raise Transport(f"{self.cfg.base_url}: {exc}") from exc
            except httpx.TransportError as exc:
                if attempt >= self.cfg.max_retries:
                    raise Transport(f"{self.cfg.base_url}: {exc}") from exc
            else:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise MalformedResponse(f"response is not JSON: {exc}") from exc
            with self._rng_lock:
                jitter = self._rng.uniform(0, 0.5)
            delay = min(30.0, 0.5 * 2**attempt) * (1 + jitter)
            log.warning("retrying %s in %.2fs (attempt %d)", self.cfg.base_url, delay, attempt + 1)
            self._sleep(delay)
            attempt += 1

    def _chat(self, messages: list[ChatMessage], **kw) -> str:
        req = GenerationRequest(tuple(messages), **kw)
        return parse_choices(self._post(req.payload(self.cfg.model_id)))[0].text

    def _generate(self, req):
        return parse_choices(self._post(req.payload(self.cfg.model_id)))

    def _score(self, prompt, completion, constraints):
        text = self._chat(
            [
                ChatMessage("system", self.templates["reward_system"]),
                ChatMessage("user", self.templates["reward_user"].format(prompt=prompt, completion=completion)),
            ],
            temperature=0.0,
            max_tokens=16,
        )
        return parse_reward(text)

    def _judge_quality(self, prompt, completion, rubric):
        user = self.templates["quality_user"].format(
            prompt=prompt, completion=completion, rubric=rubric or self.templates["quality_rubric"]
        )
        return self._chat([ChatMessage("system", self.templates["quality_system"]), ChatMessage("user", user)],
                          temperature=0.0, max_tokens=64)

    def _judge_pair(self, prompt, a, b, rubric):
        user = self.templates["pair_user"].format(
            prompt=prompt, a=a, b=b, rubric=rubric or self.templates["pair_rubric"]
        )
        return self._chat([ChatMessage("system", self.templates["pair_system"]), ChatMessage("user", user)],
                          temperature=0.0, max_tokens=64)

    def close(self):
        self._http.close()


def stable_seed(*parts) -> int:
    """64-bit seed derived from arbitrary JSON-able parts (stable across processes)."""
    blob = json.dumps(parts, ensure_ascii=False, sort_keys=True, default=str).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


_LATIN_RE = re.compile(r"[A-Za-z]")


def mock_reward(completion: str, constraints: Sequence = (), lexicons=None) -> float:
    """Rule-based reward in [0, 1].

    With constraints: ``0.5 * fraction satisfied + 0.5 * min(1, chars / 200)``.
    Without constraints: ``min(1, chars / 200)``.
    """
    length_term = min(1.0, len(completion) / 200)
    if not constraints:
        return length_term
    satisfied = sum(C.check(c, completion, lexicons).passed for c in constraints)
    return 0.5 * satisfied / len(constraints) + 0.5 * length_term


class MockClient(Client):
    """Deterministic offline endpoint.

    Rules come from keyword arguments or the ``mock://`` URL query, e.g.
    ``mock://judge?quality=no_latin&pair=prefer_longer`` or
    ``mock://reward?reward=contains:T``.

    quality rules: ``always_pass``, ``always_fail``, ``no_latin``, ``fail_if_contains:<w>``
    pair rules: ``prefer_longer``, ``always_tie``, ``prefer_first``, ``prefer_contains:<w>``
    reward rules: ``constraints`` (see :func:`mock_reward`), ``contains:<token>``
    """

    def __init__(
        self,
        cfg: EndpointConfig | None = None,
        *,
        seed: int = 0,
        sampler: Callable[[str, int], str] | None = None,
        word_pool: Sequence[str] | None = None,
        quality: str | Callable[[str, str], bool] | None = None,
        pair: str | None = None,
        reward: str | Callable[[str, str, Sequence], float] | None = None,
        raw_responses: Mapping[str, str] | None = None,
    ):
        cfg = cfg or EndpointConfig("mock://default")
        super().__init__(cfg)
        query = dict(parse_qsl(urlsplit(cfg.base_url).query))
        self.seed = int(query.get("seed", seed))
        self.sampler = sampler
        if word_pool is None:
            from forgeline import toy

            word_pool = toy.WORDS
        self.word_pool = tuple(word_pool)
        self.quality = quality or query.get("quality", "no_latin")
        self.pair = pair or query.get("pair", "prefer_longer")
        self.reward = reward or query.get("reward", "constraints")
        # test hook: force raw judge text (e.g. to exercise unparseable verdicts)
        self.raw_responses = dict(raw_responses or {})

    def _sample_text(self, rng: random.Random, max_tokens: int) -> str:
        length = rng.randint(3, min(24, max(3, max_tokens)))
        return " ".join(rng.choice(self.word_pool) for _ in range(length))

    def _generate(self, req):
        prompt = req.messages[-1].content
        base = stable_seed("gen", self.seed, req.seed, [(m.role, m.content) for m in req.messages])
        out = []
        for i in range(req.n):
            s = stable_seed(base, i)
            if self.sampler is not None:
                text = self.sampler(prompt, s)
            else:
                text = self._sample_text(random.Random(s), req.max_tokens)
            out.append(Completion(text or "…", False))
        return out

    def _score(self, prompt, completion, constraints):
        rule = self.reward
        if callable(rule):
            return rule(prompt, completion, constraints)
        if rule == "constraints":
            return mock_reward(completion, constraints)
        if rule.startswith("contains:"):
            token = rule.split(":", 1)[1]
            return 1.0 if token in completion.split() else 0.0
        raise ValidationError(f"unknown mock reward rule {rule!r}")

    def _judge_quality(self, prompt, completion, rubric):
        if "quality" in self.raw_responses:
            return self.raw_responses["quality"]
        rule = self.quality
        if callable(rule):
            ok = rule(prompt, completion)
        elif rule == "always_pass":
            ok = True
        elif rule == "always_fail":
            ok = False
        elif rule == "no_latin":
            ok = not _LATIN_RE.search(completion)
        elif rule.startswith("fail_if_contains:"):
            ok = rule.split(":", 1)[1] not in completion.split()
        else:
            raise ValidationError(f"unknown mock quality rule {rule!r}")
        return "PASS" if ok else "FAIL"

    def _judge_pair(self, prompt, a, b, rubric):
        if "pair" in self.raw_responses:
            return self.raw_responses["pair"]
        rule = self.pair
        if a == b or rule == "always_tie":
            return "TIE"
        if rule == "prefer_longer":
            return "A" if len(a) > len(b) else "B" if len(b) > len(a) else "TIE"
        if rule == "prefer_first":
            return "A"
        if rule.startswith("prefer_contains:"):
            w = rule.split(":", 1)[1]
            ca, cb = a.split().count(w), b.split().count(w)
            return "A" if ca > cb else "B" if cb > ca else "TIE"
        raise ValidationError(f"unknown mock pair rule {rule!r}")


def mock_forced() -> bool:
    return os.environ.get("FORGELINE_MOCK") == "1"


def connect(cfg: EndpointConfig, **kw) -> Client:
    """Client for an endpoint; mock when the URL is ``mock://`` or FORGELINE_MOCK=1."""
    if cfg.is_mock or mock_forced():
        return MockClient(cfg, **kw)
    return HttpClient(cfg, **kw)


@functools.lru_cache(maxsize=64)
def _cached(cfg: EndpointConfig) -> Client:
    return connect(cfg)


def generate(cfg: EndpointConfig, req: GenerationRequest) -> list[str]:
    return _cached(cfg).generate(req)


def score_reward(cfg: EndpointConfig, prompt: str, completion: str, constraints: Sequence = ()) -> float:
    return _cached(cfg).score_reward(prompt, completion, constraints)


def judge_quality(cfg: EndpointConfig, prompt: str, completion: str, rubric: str | None = None) -> JudgeVerdict:
    return _cached(cfg).judge_quality(prompt, completion, rubric)


def judge_pair(cfg: EndpointConfig, prompt: str, a: str, b: str, rubric: str | None = None) -> JudgeVerdict:
    return _cached(cfg).judge_pair(prompt, a, b, rubric)
