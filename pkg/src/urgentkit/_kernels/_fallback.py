"""Pure numpy implementations of the hot kernels.

Semantics match the compiled module exactly; results agree to rounding.
"""
from __future__ import annotations

import numpy as np

# rows processed per block in rvq_assign, bounds the N x K x D temporary
_BLOCK_ELEMS = 1 << 22


def rvq_assign(data: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codeword per row by squared euclidean distance, lowest index on ties."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    n, dim = data.shape
    k = codebook.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    step = max(1, _BLOCK_ELEMS // max(1, k * dim))
    for start in range(0, n, step):
        block = data[start:start + step]
        # accumulate over dimensions in order so sums match the compiled kernel bit for bit
        d2 = np.zeros((len(block), k))
        for d in range(dim):
            diff = block[:, d, None] - codebook[None, :, d]
            d2 += diff * diff
        # argmin returns the first occurrence, which is the lowest index
        best = np.argmin(d2, axis=1)
        idx[start:start + step] = best
        dist[start:start + step] = d2[np.arange(len(block)), best]
    return idx, dist


def polyphase_resample(x: np.ndarray, h: np.ndarray, up: int, down: int, n_out: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    n_taps = len(h)
    delay = (n_taps - 1) // 2
    per_phase = -(-n_taps // up)
    # pad h so every phase has exactly per_phase taps
    hp = np.zeros(per_phase * up)
    hp[:n_taps] = h
    phases = hp.reshape(per_phase, up).T  # phases[p, k] = h[p + k*up]
    # zero guard on both sides of x so gathers never go out of range
    pad = per_phase + 1
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + per_phase)])
    y = np.empty(n_out)
    ks = np.arange(per_phase)
    chunk = 1 << 14
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(n_out, start + chunk), dtype=np.int64)
        m = n * down + delay
        p = m % up
        base = m // up
        src = base[:, None] - ks[None, :]
        src = np.clip(src, -pad, len(x) + pad + per_phase - 1) + pad
        y[start:start + len(n)] = np.einsum("nk,nk->n", phases[p], xp[src])
    return y


def overlap_add(frames: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    n_frames, size = frames.shape
    out = np.zeros(max(out_len, (n_frames - 1) * hop + size) if n_frames else out_len)
    for t in range(n_frames):
        out[t * hop:t * hop + size] += frames[t]
    return out[:out_len]
