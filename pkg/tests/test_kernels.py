from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urgentkit._kernels import _fallback
from urgentkit.audio_io import resample_filter

ext = pytest.importorskip("urgentkit._kernels._ext", reason="compiled extension not built")


@given(st.integers(1, 300), st.integers(1, 40), st.integers(2, 64), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_rvq_assign_agrees(n, dim, k, seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, dim))
    book = rng.standard_normal((k, dim))
    book[k // 2] = book[0]  # a duplicate forces a tie
    i1, d1 = ext.rvq_assign(data, book)
    i2, d2 = _fallback.rvq_assign(data, book)
    assert np.array_equal(i1, i2)
    assert np.array_equal(d1, d2)


def test_rvq_assign_brute_force():
    rng = np.random.default_rng(1)
    data, book = rng.standard_normal((50, 7)), rng.standard_normal((9, 7))
    d = ((data[:, None, :] - book[None]) ** 2).sum(-1)
    idx, dist = _fallback.rvq_assign(data, book)
    assert np.array_equal(idx, d.argmin(1))
    assert np.allclose(dist, d.min(1), rtol=1e-12)


@pytest.mark.parametrize("up,down", [(1, 3), (3, 1), (147, 160), (160, 147), (2, 3)])
def test_polyphase_agrees(up, down):
    x = np.random.default_rng(up * down).standard_normal(3000)
    h = resample_filter(up, down)
    n_out = int(round(len(x) * up / down))
    y1 = ext.polyphase_resample(x, h, up, down, n_out)
    y2 = _fallback.polyphase_resample(x, h, up, down, n_out)
    assert np.allclose(y1, y2, rtol=0, atol=1e-12)


def test_polyphase_vs_direct_definition():
    up, down = 3, 2
    x = np.random.default_rng(2).standard_normal(200)
    h = resample_filter(up, down)
    n_out = 300
    stuffed = np.zeros(len(x) * up)
    stuffed[::up] = x
    full = np.convolve(stuffed, h)
    delay = (len(h) - 1) // 2
    want = full[delay:delay + n_out * down:down][:n_out]
    got = _fallback.polyphase_resample(x, h, up, down, n_out)
    assert np.allclose(got, want, atol=1e-12)


@given(st.integers(1, 30), st.integers(1, 64), st.integers(1, 64), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_overlap_add_agrees(n_frames, size, hop, seed):
    frames = np.random.default_rng(seed).standard_normal((n_frames, size))
    out_len = (n_frames - 1) * hop + size
    y1 = ext.overlap_add(frames, hop, out_len)
    y2 = _fallback.overlap_add(frames, hop, out_len)
    assert np.allclose(y1, y2, atol=1e-12)
    ref = np.zeros(out_len)
    for t in range(n_frames):
        ref[t * hop:t * hop + size] += frames[t]
    assert np.allclose(y2, ref, atol=1e-12)


def test_readonly_inputs_accepted():
    x = np.arange(10.0)
    x.setflags(write=False)
    h = resample_filter(1, 2)
    ext.polyphase_resample(x, h, 1, 2, 5)
    ext.rvq_assign(x.reshape(5, 2), x.reshape(5, 2))
