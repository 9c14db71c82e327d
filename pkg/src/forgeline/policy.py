"""Tabular bigram softmax policy with SFT and DPO training.

``logits[a, b]`` scores token ``b`` following token ``a``; every sequence is
implicitly preceded by ``bos``. The policy ignores the prompt, which keeps
sequence log-probabilities, sampling and gradients exact.

All gradients reduce to weighted bigram transition counts: for a sequence
with transition counts ``C``, ``d log pi / d logits = C - rowsum(C) * softmax``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from forgeline import kernels
from forgeline import tensorstore as ts
from forgeline.errors import EmptyDataset, UnknownToken, ValidationError
from forgeline.records import PreferencePair, SftRecord

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    bos: int = 0
    eos: int = 1
    unk: int | None = 2

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ValidationError("vocab needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValidationError("vocab tokens must be unique")
        if self.bos == self.eos:
            raise ValidationError("bos and eos must differ")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "Vocab":
        return cls((BOS, EOS, UNK) + tuple(w for w in words if w not in (BOS, EOS, UNK)))

    @classmethod
    def toy(cls) -> "Vocab":
        from forgeline import toy

        return cls.from_words(toy.WORDS)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.tokens, ensure_ascii=False).encode()).hexdigest()

    def encode(self, text: str) -> list[int]:
        """Whitespace tokens to ids, OOV to ``unk``, terminated by ``eos``."""
        ids = []
        for tok in text.split():
            i = self._index.get(tok, self.unk)
            if i is None:
                raise UnknownToken(f"token {tok!r} not in vocab")
            ids.append(i)
        return ids + [self.eos]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (self.eos, self.bos))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class TabularPolicy:
    logits: np.ndarray
    vocab: Vocab

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        v = len(self.vocab)
        if self.logits.shape != (v, v):
            raise ValidationError(f"logits shape {self.logits.shape} does not match vocab size {v}")
        if not np.all(np.isfinite(self.logits)):
            raise ValidationError("policy logits must be finite")

    @classmethod
    def uniform(cls, vocab: Vocab) -> "TabularPolicy":
        return cls(np.zeros((len(vocab), len(vocab))), vocab)

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.logits.copy(), self.vocab)

    def log_probs(self) -> np.ndarray:
        return _log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    learning_rate: float = 0.1
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError("beta must be > 0")
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")


# -- batching ---------------------------------------------------------------


def _pack(seqs: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = [len(s) for s in seqs]
    if any(n < 1 for n in lengths):
        raise ValidationError("sequences must have length >= 1")
    flat = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=sum(lengths))
    if flat.size and (flat.min() < 0 or flat.max() >= vocab_size):
        raise UnknownToken("token id outside vocab")
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return flat, offsets


def _seq_logprobs(logp: np.ndarray, flat: np.ndarray, offsets: np.ndarray, bos: int) -> np.ndarray:
    prev = np.empty_like(flat)
    prev[1:] = flat[:-1]
    prev[offsets[:-1]] = bos
    steps = logp[prev, flat]
    return np.add.reduceat(steps, offsets[:-1]) if flat.size else np.zeros(len(offsets) - 1)


def _grad_from_weights(probs, flat, offsets, weights, bos):
    """sum_s w_s * d logpi(seq_s) / d logits."""
    wc = kernels.transition_counts(flat, offsets, weights, bos, probs.shape[0])
    return wc - wc.sum(axis=1, keepdims=True) * probs


def sequence_logprob(policy: TabularPolicy, token_ids: Sequence[int]) -> float:
    if len(token_ids) < 1:
        raise ValidationError("sequence must have length >= 1")
    flat, offsets = _pack([token_ids], len(policy.vocab))
    return float(_seq_logprobs(policy.log_probs(), flat, offsets, policy.vocab.bos)[0])


# -- SFT --------------------------------------------------------------------


def sft_loss_and_grad(policy: TabularPolicy, seqs: Sequence[Sequence[int]]) -> tuple[float, np.ndarray]:
    """Mean sequence negative log-likelihood and its gradient w.r.t. logits."""
    if not seqs:
        raise EmptyDataset("no SFT sequences")
    flat, offsets = _pack(seqs, len(policy.vocab))
    logp = policy.log_probs()
    lps = _seq_logprobs(logp, flat, offsets, policy.vocab.bos)
    weights = np.full(len(seqs), -1.0 / len(seqs))
    grad = _grad_from_weights(np.exp(logp), flat, offsets, weights, policy.vocab.bos)
    return float(-lps.mean()), grad


def encode_records(vocab: Vocab, records: Sequence[SftRecord]) -> list[list[int]]:
    return [vocab.encode(r.completion) for r in records]


def sft_epoch(policy: TabularPolicy, records: Sequence[SftRecord] | Sequence[Sequence[int]], lr: float) -> float:
    """One full-batch gradient step; returns the pre-step loss."""
    if not records:
        raise EmptyDataset("no SFT records")
    seqs = encode_records(policy.vocab, records) if isinstance(records[0], SftRecord) else records
    loss, grad = sft_loss_and_grad(policy, seqs)
    policy.logits -= lr * grad
    return loss


# -- DPO --------------------------------------------------------------------


@dataclass(frozen=True)
class PairIds:
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "chosen", tuple(self.chosen))
        object.__setattr__(self, "rejected", tuple(self.rejected))
        if self.chosen == self.rejected:
            raise ValidationError("chosen and rejected token sequences must differ")


def encode_pairs(vocab: Vocab, pairs: Sequence[PreferencePair]) -> list[PairIds]:
    out = []
    for p in pairs:
        c, r = vocab.encode(p.chosen), vocab.encode(p.rejected)
        if c != r:  # distinct texts can collapse to the same ids through OOV mapping
            out.append(PairIds(c, r))
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def dpo_loss_and_grad(
    policy: TabularPolicy, ref: TabularPolicy, pairs: Sequence[PairIds], beta: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean DPO loss, its gradient w.r.t. policy logits, and per-pair margins z."""
    if not pairs:
        raise EmptyDataset("no preference pairs")
    v, bos = len(policy.vocab), policy.vocab.bos
    seqs = [p.chosen for p in pairs] + [p.rejected for p in pairs]
    flat, offsets = _pack(seqs, v)
    logp = policy.log_probs()
    lp = _seq_logprobs(logp, flat, offsets, bos)
    lr_ = _seq_logprobs(ref.log_probs(), flat, offsets, bos)
    k = len(pairs)
    z = beta * ((lp[:k] - lr_[:k]) - (lp[k:] - lr_[k:]))
    loss = _softplus(-z)
    coef = -_sigmoid(-z) * beta / k  # dL/d lp_chosen; rejected gets the opposite sign
    weights = np.concatenate([coef, -coef])
    grad = _grad_from_weights(np.exp(logp), flat, offsets, weights, bos)
    return float(loss.mean()), grad, z


def dpo_loss(policy: TabularPolicy, ref: TabularPolicy, pair: PairIds, beta: float) -> float:
    if not beta > 0:
        raise ValidationError("beta must be > 0")
    return dpo_loss_and_grad(policy, ref, [pair], beta)[0]


def dpo_epoch(policy: TabularPolicy, ref: TabularPolicy, pairs: Sequence[PairIds], cfg: DpoConfig) -> float:
    """One full-batch step on the mean DPO loss; returns the pre-step loss."""
    if not pairs:
        raise EmptyDataset("no preference pairs")
    loss, grad, _ = dpo_loss_and_grad(policy, ref, pairs, cfg.beta)
    if cfg.learning_rate:
        policy.logits -= cfg.learning_rate * grad
    return loss


# -- decoding ---------------------------------------------------------------


def decoding_probs(policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrices used when sampling: bos is never emitted and the
    first step cannot emit eos (completions are non-empty)."""
    p = policy.probs()
    vocab = policy.vocab
    p[:, vocab.bos] = 0.0
    p /= p.sum(axis=1, keepdims=True)
    first = p[vocab.bos].copy()
    first[vocab.eos] = 0.0
    first /= first.sum()
    return first, p


def sample_ids(policy: TabularPolicy, rng: np.random.Generator, max_len: int = 24) -> list[int]:
    first, p = decoding_probs(policy)
    eos = policy.vocab.eos
    ids = [int(rng.choice(len(first), p=first))]
    while len(ids) < max_len:
        nxt = int(rng.choice(p.shape[1], p=p[ids[-1]]))
        if nxt == eos:
            break
        ids.append(nxt)
    return ids


def sample_text(policy: TabularPolicy, seed: int, max_len: int = 24) -> str:
    return policy.vocab.decode(sample_ids(policy, np.random.default_rng(seed), max_len))


def prob_contains(policy: TabularPolicy, token: int, max_len: int = 24) -> float:
    """Exact probability that a decoded completion contains ``token``.

    Forward recursion over (last token, not-yet-seen) states under the
    decoding distribution of :func:`sample_ids`.
    """
    first, p = decoding_probs(policy)
    eos = policy.vocab.eos
    hit = first[token]
    alive = first.copy()
    alive[token] = 0.0
    for _ in range(max_len - 1):
        nxt = alive @ p
        hit += nxt[token]
        nxt[token] = 0.0
        nxt[eos] = 0.0
        alive = nxt
    return float(hit)


# -- snapshots --------------------------------------------------------------


def save_snapshot(policy: TabularPolicy, path: str | Path, stage: str = "") -> Path:
    meta = {
        "vocab_hash": policy.vocab.hash,
        "vocab": json.dumps(list(policy.vocab.tokens), ensure_ascii=False),
        "bos": str(policy.vocab.bos),
        "eos": str(policy.vocab.eos),
        "unk": "" if policy.vocab.unk is None else str(policy.vocab.unk),
        "stage": stage,
    }
    tensor = ts.TensorView.from_array("logits", policy.logits, ts.DType.F32)
    return ts.write_checkpoint(path, [tensor], meta)


def load_snapshot(path: str | Path) -> TabularPolicy:
    manifest = ts.read_manifest(path)
    meta = manifest.metadata
    try:
        unk = meta.get("unk", "")
        vocab = Vocab(
            tuple(json.loads(meta["vocab"])), int(meta["bos"]), int(meta["eos"]), int(unk) if unk else None
        )
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: not a policy snapshot ({exc})") from exc
    if vocab.hash != meta.get("vocab_hash"):
        raise ValidationError(f"{path}: vocab hash mismatch")
    logits = ts.read_tensor(manifest, "logits").to_array()
    return TabularPolicy(logits.astype(np.float64), vocab)


# -- iterative DPO ----------------------------------------------------------


@dataclass
class RoundMetrics:
    round: int
    mean_reward: float
    mean_loss: float | None
    pairs: int
    no_pairs: bool = False

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "mean_reward": self.mean_reward,
            "mean_loss": self.mean_loss,
            "pairs": self.pairs,
            "no_pairs": self.no_pairs,
        }


def policy_client(policy: TabularPolicy, seed: int = 0, max_len: int = 24):
    """A mock generation endpoint that samples from a frozen copy of ``policy``."""
    from forgeline.gateway import EndpointConfig, MockClient

    frozen = policy.copy()
    return MockClient(
        EndpointConfig("mock://policy", parallelism=1),
        seed=seed,
        sampler=lambda prompt, s: sample_text(frozen, s, max_len),
    )


def collect_pairs(policy, prompts, reward, n, seed, min_margin, judges=(), quorum=None, max_len=24):
    """Sample n completions per prompt from the policy, score, and build pairs."""
    from dataclasses import replace

    from forgeline import arbitrage

    gen = policy_client(policy, seed, max_len)
    pairs, first_rewards = [], []
    for p in prompts:
        cs = arbitrage.sample_and_score(p, gen, reward, n=n, seed=seed)
        if judges:
            cs = arbitrage.panel_filter(cs, judges, quorum or len(judges) // 2 + 1)
        else:
            cs = replace(cs, completions=tuple(replace(c, panel_pass=True) for c in cs.completions))
        first_rewards.append(cs.completions[0].reward)
        pair = arbitrage.build_preference_pair(cs, min_margin)
        if pair is not None:
            pairs.append(pair)
    return pairs, float(np.mean(first_rewards)) if first_rewards else 0.0


def iterative_dpo(
    policy: TabularPolicy,
    ref: TabularPolicy,
    prompts: Sequence,
    reward,
    rounds: int,
    cfg: DpoConfig,
    *,
    n: int = 8,
    min_margin: float = 0.05,
    refresh_ref: bool = True,
    judges: Sequence = (),
    quorum: int | None = None,
    max_len: int = 24,
) -> tuple[TabularPolicy, list[RoundMetrics]]:
    """Rounds of: sample from the current policy, score, pair, then DPO.

    ``reward`` is a gateway client used for scoring. The reference policy is
    reset to the current policy at the start of every round unless
    ``refresh_ref`` is False. Rounds that form no pairs are reported and skipped.
    ``policy`` is updated in place and returned.
    """
    if rounds < 1:
        raise ValidationError("rounds must be >= 1")
    metrics = []
    for r in range(rounds):
        if refresh_ref:
            ref = policy.copy()
        round_seed = cfg.seed * 1_000_003 + r
        pairs, mean_reward = collect_pairs(
            policy, prompts, reward, n, round_seed, min_margin, judges, quorum, max_len
        )
        ids = encode_pairs(policy.vocab, pairs)
        if not ids:
            metrics.append(RoundMetrics(r, mean_reward, None, 0, no_pairs=True))
            continue
        losses = [dpo_epoch(policy, ref, ids, cfg) for _ in range(cfg.epochs)]
        metrics.append(RoundMetrics(r, mean_reward, float(np.mean(losses)), len(ids)))
    return policy, metrics
