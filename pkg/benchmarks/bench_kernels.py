"""Compare the compiled and pure-Python kernels.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is timed with
``timeit`` on a fixed synthetic workload; the speedup column is pure / compiled.
"""

from __future__ import annotations

import argparse
import random
import string
import timeit

from crmkit import _pykernels

try:
    from crmkit import _kernels
except ImportError:  # extension not built
    _kernels = None


def _texts(n: int, length: int, seed: int = 0) -> list[str]:
    rng = random.Random(seed)
    alphabet = string.ascii_lowercase + "     "
    return ["".join(rng.choices(alphabet, k=length)) for _ in range(n)]


def _workloads(n: int, length: int):
    texts = _texts(n, length)
    pairs = list(zip(texts, reversed(texts)))
    return {
        "fnv1a_codepoints": lambda m: [m.fnv1a_codepoints(t) for t in texts],
        "hashed_trigram_counts": lambda m: [m.hashed_trigram_counts(t, 256) for t in texts],
        "char_ngram_stats": lambda m: [m.char_ngram_stats(a, b, 6) for a, b in pairs],
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--texts", type=int, default=500)
    parser.add_argument("--length", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    if _kernels is None:
        print("compiled extension not available; build with `pip install --no-build-isolation -e .`")
    print(f"{'kernel':<24}{'pure (ms)':>12}{'compiled (ms)':>16}{'speedup':>10}")
    for name, work in _workloads(args.texts, args.length).items():
        pure = min(timeit.repeat(lambda: work(_pykernels), number=1, repeat=args.repeat)) * 1000
        if _kernels is None:
            print(f"{name:<24}{pure:>12.2f}{'-':>16}{'-':>10}")
            continue
        fast = min(timeit.repeat(lambda: work(_kernels), number=1, repeat=args.repeat)) * 1000
        print(f"{name:<24}{pure:>12.2f}{fast:>16.2f}{pure / fast:>9.1f}x")


if __name__ == "__main__":
    main()
