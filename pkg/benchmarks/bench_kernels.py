"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from urgentkit._kernels import _fallback

try:
    from urgentkit._kernels import _ext
except ImportError:
    _ext = None


def cases(rng: np.random.Generator) -> dict:
    data = rng.standard_normal((4000, 80))
    codebook = rng.standard_normal((256, 80))
    x = rng.standard_normal(48000 * 5)
    up, down = 160, 147  # 44.1 kHz -> 48 kHz
    h = np.hanning(64 * up) / up
    n_out = len(x) * up // down
    frames = rng.standard_normal((1000, 4096))
    return {
        "rvq_assign 4000x80 K=256": lambda m: m.rvq_assign(data, codebook),
        "polyphase_resample 5 s 44.1->48k": lambda m: m.polyphase_resample(x, h, up, down, n_out),
        "overlap_add 1000x4096 hop 1024": lambda m: m.overlap_add(frames, 1024, 999 * 1024 + 4096),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ext is None:
        print("compiled kernels not built; only the fallback can be timed")
    print(f"{'kernel':36s} {'numpy (ms)':>11s} {'cython (ms)':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _ext is None:
            print(f"{name:36s} {t_py:11.1f} {'n/a':>12s} {'n/a':>8s}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(_ext), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {t_py:11.1f} {t_cy:12.1f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
