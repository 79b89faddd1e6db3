# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see _fallback.py for the reference semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def rvq_assign(data, codebook):
    cdef const double[:, ::1] x = np.ascontiguousarray(data, dtype=np.float64)
    cdef const double[:, ::1] c = np.ascontiguousarray(codebook, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1], k = c.shape[0]
    idx_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, d, best_j
    cdef double acc, diff, best
    with nogil:
        for i in range(n):
            best = 1e308
            best_j = 0
            for j in range(k):
                acc = 0.0
                for d in range(dim):
                    diff = x[i, d] - c[j, d]
                    acc = acc + diff * diff
                    if acc >= best:
                        break
                if acc < best:
                    best = acc
                    best_j = j
            idx[i] = best_j
            dist[i] = best
    return idx_arr, dist_arr


def polyphase_resample(x_in, h_in, int up, int down, Py_ssize_t n_out):
    cdef const double[::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[::1] h = np.ascontiguousarray(h_in, dtype=np.float64)
    cdef Py_ssize_t n_taps = h.shape[0], n_in = x.shape[0]
    cdef Py_ssize_t delay = (n_taps - 1) // 2
    y_arr = np.zeros(n_out, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef Py_ssize_t n, j, src
    cdef long long m, base
    cdef int p
    cdef double acc
    with nogil:
        for n in range(n_out):
            m = <long long>n * down + delay
            p = m % up
            base = m // up
            acc = 0.0
            j = p
            src = base
            while j < n_taps:
                if 0 <= src < n_in:
                    acc = acc + h[j] * x[src]
                j = j + up
                src = src - 1
            y[n] = acc
    return y_arr


def overlap_add(frames_in, Py_ssize_t hop, Py_ssize_t out_len):
    cdef const double[:, ::1] frames = np.ascontiguousarray(frames_in, dtype=np.float64)
    cdef Py_ssize_t n_frames = frames.shape[0], size = frames.shape[1]
    out_arr = np.zeros(out_len, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t t, i, pos
    with nogil:
        for t in range(n_frames):
            for i in range(size):
                pos = t * hop + i
                if pos >= out_len:
                    break
                out[pos] = out[pos] + frames[t, i]
    return out_arr
