"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--size N] [--repeat R]

Prints one JSON line per (kernel, backend) with the best wall time in
milliseconds, followed by a speedup summary. Both backends are checked for
identical output before timing.
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from forgeline import _pykernels

try:
    from forgeline import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _cases(size: int, rng: np.random.Generator):
    src = rng.normal(size=size).astype(np.float32)
    wide = rng.normal(scale=100, size=size)
    bits = rng.integers(0, 0x7F80, size=size, dtype=np.uint16)
    lengths = rng.integers(1, 25, size=max(1, size // 12))
    flat = rng.integers(1, 64, size=int(lengths.sum()), dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    weights = rng.normal(size=len(lengths))

    def accumulate(impl):
        acc = np.zeros(size, dtype=np.float64)
        impl.accumulate(acc, src, 0.25)
        return acc

    return {
        "accumulate": accumulate,
        "f64_to_bf16": lambda impl: impl.f64_to_bf16(wide),
        "bf16_to_f32": lambda impl: impl.bf16_to_f32(bits),
        "transition_counts": lambda impl: impl.transition_counts(flat, offsets, weights, 0, 64),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    impls = [_pykernels] + ([_ckernels] if _ckernels is not None else [])
    cases = _cases(args.size, np.random.default_rng(args.seed))
    best: dict[tuple[str, str], float] = {}
    for name, fn in cases.items():
        outputs = [np.asarray(fn(impl)) for impl in impls]
        for out in outputs[1:]:
            if out.tobytes() != outputs[0].tobytes():
                raise SystemExit(f"{name}: backends disagree")
        for impl in impls:
            t = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
            best[name, impl.BACKEND] = t * 1e3
            print(json.dumps({"kernel": name, "backend": impl.BACKEND, "size": args.size, "best_ms": round(t * 1e3, 3)}))
    if _ckernels is None:
        print("compiled extension not built; only the fallback was timed")
        return 0
    for name in cases:
        ratio = best[name, _pykernels.BACKEND] / best[name, _ckernels.BACKEND]
        print(f"{name:18s} speedup x{ratio:.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
