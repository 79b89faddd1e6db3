from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urgentkit.audio_io import Waveform
from urgentkit.codec import (MAGIC, CodecFrameConfig, ConditioningBundle, CopyPredictor,
                             OraclePredictor, RvqCodebooks, TokenGrid, UniformPredictor,
                             assemble_conditioning, corpus_features, decode, dequantize, encode,
                             greedy_decode, mel_features, mlm_loss, one_hot, quantize_frames,
                             random_projection, sample_mask, token_stage, train_rvq)
from urgentkit.errors import (EmptyMask, FrameAlignmentFailure, HashMismatch, InsufficientData,
                              MalformedContainer)
from urgentkit.metrics import multiscale_mel_distance

from corpus import speechlike

RATE = 16000
FC = CodecFrameConfig(RATE, 1024, 256, 32)


@pytest.fixture(scope="module")
def trained():
    waves = [speechlike(2.0, RATE, s) for s in range(6)]
    return train_rvq(corpus_features(waves, FC), 4, 32, seed=1, frame_config=FC)


def _cond(n_frames, dim=4):
    z = np.zeros((n_frames, dim))
    return ConditioningBundle(z, z, z, np.eye(3 * dim), np.zeros((n_frames, 3 * dim)))


def test_exact_cover():
    rng = np.random.default_rng(0)
    pts = np.vstack([np.zeros(5), rng.standard_normal((7, 5))])  # the origin is always a codeword
    data = np.repeat(pts, 3, axis=0)
    cb = train_rvq(data, 1, 8, seed=2)
    got = cb.codewords[0].astype(np.float64)
    want = pts.astype(np.float32).astype(np.float64)
    assert np.array_equal(got[np.lexsort(got.T)], want[np.lexsort(want.T)])
    _, norms = quantize_frames(data.astype(np.float32), cb)
    assert np.max(norms[-1]) == 0.0


def test_compositional_second_level_helps():
    rng = np.random.default_rng(1)
    a = np.vstack([np.zeros(6), 5 * rng.standard_normal((7, 6))])
    b = np.vstack([np.zeros(6), 0.5 * rng.standard_normal((7, 6))])
    data = np.array([a[i] + b[j] for i in range(8) for j in range(8) for _ in range(2)])
    cb = train_rvq(data, 2, 8, seed=3)
    _, norms = quantize_frames(data, cb)
    assert norms[2].mean() < norms[1].mean()


def test_training_deterministic_and_distinct(trained):
    waves = [speechlike(2.0, RATE, s) for s in range(6)]
    again = train_rvq(corpus_features(waves, FC), 4, 32, seed=1, frame_config=FC)
    assert again.content_hash == trained.content_hash
    for q in range(trained.levels):
        cw = trained.codewords[q].astype(np.float64)
        d = np.linalg.norm(cw[:, None] - cw[None], axis=-1) + np.eye(len(cw))
        assert d.min() > 0


def test_insufficient_data():
    with pytest.raises(InsufficientData):
        train_rvq(np.zeros((3, 4)), 1, 8)


def test_container_roundtrip_and_corruption(tmp_path, trained):
    p = tmp_path / "cb.rvq"
    trained.save(p)
    blob = p.read_bytes()
    assert blob[:4] == MAGIC
    back = RvqCodebooks.load(p)
    assert np.array_equal(back.codewords, trained.codewords)
    assert back.frame_config.band_top == FC.band_top and back.content_hash == trained.content_hash
    bad = bytearray(blob)
    bad[60] ^= 0xFF
    with pytest.raises(HashMismatch):
        RvqCodebooks.from_bytes(bytes(bad))
    with pytest.raises(MalformedContainer):
        RvqCodebooks.from_bytes(b"XXXX" + blob[4:])


def test_encode_exact_match():
    cw = np.zeros((2, 4, 3), dtype=np.float32)
    cw[0, 1:] = [[1, 0, 0], [0, 2, 0], [0, 0, 3]]
    cw[1, 1:] = [[0.1, 0, 0], [0, 0.1, 0], [0, 0, 0.1]]
    cb = RvqCodebooks(cw, CodecFrameConfig(RATE, 1024, 256, 3))
    idx, norms = quantize_frames(np.array([[0, 2, 0], [0, 0, 3.1]]), cb)
    assert idx[:, 0].tolist() == [2, 0]
    assert idx[:, 1].tolist() == [3, 3]
    assert norms[-1, 1] == pytest.approx(0.0, abs=1e-6)


def test_tie_breaks_to_lowest_index():
    cw = np.zeros((1, 3, 1), dtype=np.float32)
    cw[0, :, 0] = [0.0, 2.0, -2.0]
    cb = RvqCodebooks(cw, CodecFrameConfig(RATE, 1024, 256, 1))
    idx, _ = quantize_frames(np.array([[1.0], [-1.0]]), cb)
    assert idx[0].tolist() == [0, 0]


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.001, 2.0))
@settings(max_examples=25, deadline=None)
def test_prefix_property(seed, scale):
    frames = scale * np.random.default_rng(seed).standard_normal((50, 32)) * 3 + 2
    cb = train_rvq(np.abs(frames), 3, 8, seed=seed % 97)
    _, norms = quantize_frames(frames, cb)
    assert np.all(np.diff(norms, axis=0) <= 0)


def test_prefix_property_on_audio(trained):
    w = speechlike(3.0, RATE, 50)
    _, norms = quantize_frames(mel_features(w, FC), trained)
    assert np.all(np.diff(norms, axis=0) <= 0)


def test_encode_deterministic(trained):
    w = speechlike(1.0, RATE, 51)
    assert np.array_equal(encode(w, trained).indices, encode(w, trained).indices)


def test_silence_roundtrip(trained):
    w = Waveform(np.zeros(RATE), RATE)
    rt = decode(encode(w, trained), trained, len(w))
    assert len(rt) == len(w)
    assert np.sum(rt.samples ** 2) <= 1e-6
    assert multiscale_mel_distance(w, rt) <= 1e-3


def test_zero_grid_deterministic(trained):
    g = TokenGrid(np.zeros((4, 20), dtype=np.int64), np.zeros((4, 20), bool), FC.frame_rate, 5000, RATE)
    assert np.array_equal(decode(g, trained).samples, decode(g, trained).samples)


def test_fidelity_improves_with_levels(trained):
    w = speechlike(2.0, RATE, 52)
    dists = []
    for q in (1, 4):
        sub = trained.prefix(q)
        dists.append(multiscale_mel_distance(w, decode(encode(w, sub), sub, len(w))))
    assert dists[1] < dists[0]


def test_sine_fidelity_large_codebook():
    t = np.arange(RATE) / RATE
    sines = [Waveform(0.3 * np.sin(2 * np.pi * f * t), RATE) for f in (300, 440, 700, 1200, 2500)]
    feats = corpus_features(sines, FC)
    big = train_rvq(feats, 4, 16, seed=0, frame_config=FC)
    w = sines[1]
    d_big = multiscale_mel_distance(w, decode(encode(w, big), big, len(w)))
    d_one = multiscale_mel_distance(w, decode(encode(w, big.prefix(1)), big.prefix(1), len(w)))
    assert d_big <= d_one


def test_reencode_fixed_point_on_stationary_frames():
    t = np.arange(RATE) / RATE
    tones = [Waveform(0.3 * np.sin(2 * np.pi * f * t), RATE) for f in (250, 500, 1000, 2000, 3000, 4500, 6000)]
    tones.append(Waveform(np.zeros(RATE), RATE))
    cb = train_rvq(corpus_features(tones, FC), 1, 8, seed=0, frame_config=FC)
    w = Waveform(np.concatenate([tones[i].samples[:8000] for i in (2, 0, 5, 7, 3, 6, 1, 4)]), RATE)
    g = encode(w, cb).indices[0]
    g2 = encode(decode(encode(w, cb), cb, len(w)), cb).indices[0]
    # frames whose analysis span (+/- fft_size / hop frames) lies inside one segment
    span = FC.fft_size // FC.hop
    stable = np.array([len(set(g[max(0, i - span):i + span + 1])) == 1 for i in range(len(g))])
    assert stable.mean() > 0.5
    assert np.array_equal(g[stable], g2[stable])


def test_sample_mask():
    assert sample_mask(100, 3, 1.0, 0).all()
    m = sample_mask(100, 3, 0.5, 7)
    assert m.sum(axis=1).tolist() == [50, 50, 50]
    assert np.array_equal(m, sample_mask(100, 3, 0.5, 7))
    assert sample_mask(7, 2, 0.3, 1).sum(axis=1).tolist() == [3, 3]
    with pytest.raises(ValueError):
        sample_mask(10, 1, 0.0)


def test_conditioning_assembly(trained):
    x, s1 = speechlike(1.0, RATE, 60), speechlike(1.0, RATE, 61)
    n_frames = len(mel_features(x, FC))
    cond = assemble_conditioning(x, s1, trained)
    assert cond.frames == n_frames
    zero = assemble_conditioning(x, s1, trained, projection=np.zeros((3 * FC.n_mels, 5)))
    assert zero.conditioning.shape == (n_frames, 5) and not zero.conditioning.any()
    # identity projection on one stream: select the s1 block
    sel = np.zeros((3 * FC.n_mels, FC.n_mels))
    sel[FC.n_mels:2 * FC.n_mels] = np.eye(FC.n_mels)
    c = assemble_conditioning(x, s1, trained, projection=sel)
    assert np.array_equal(c.conditioning, mel_features(s1, FC))
    with pytest.raises(FrameAlignmentFailure):
        assemble_conditioning(x, s1, trained, extractor=lambda w: (np.zeros((10, 3)), FC.frame_rate))


def test_random_projection_orthonormal():
    p = random_projection(12, 5, seed=3)
    assert np.allclose(p.T @ p, np.eye(5), atol=1e-12)
    assert np.array_equal(p, random_projection(12, 5, seed=3))


@pytest.mark.parametrize("k", [4, 256, 1024])
def test_mlm_uniform_is_log_k(k):
    rng = np.random.default_rng(k)
    targets = rng.integers(0, k, (3, 17))
    mask = rng.random((3, 17)) < 0.4
    mask[0, 0] = True
    probs = UniformPredictor(k).predict(_cond(17), TokenGrid(targets, mask, 1.0))
    assert mlm_loss(probs, targets, mask) == pytest.approx(np.log(k), abs=1e-6)


def test_mlm_oracle_and_hand_example():
    targets = np.array([[0, 2, 1]])
    mask = np.array([[True, True, True]])
    assert mlm_loss(one_hot(targets, 3), targets, mask) <= 1e-9
    probs = np.array([[[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.25, 0.5, 0.25]]])
    want = -(np.log(0.7) + np.log(0.6) + np.log(0.5)) / 3
    assert mlm_loss(probs, targets, mask) == pytest.approx(want, abs=1e-9)
    partial = np.array([[True, False, True]])
    assert mlm_loss(probs, targets, partial) == pytest.approx(-(np.log(0.7) + np.log(0.5)) / 2, abs=1e-9)
    with pytest.raises(EmptyMask):
        mlm_loss(probs, targets, np.zeros((1, 3), bool))


def test_greedy_decode_contract():
    rng = np.random.default_rng(4)
    truth = rng.integers(0, 16, (3, 20))
    start = TokenGrid(np.zeros_like(truth), np.zeros_like(truth, bool), 1.0)
    assert greedy_decode(UniformPredictor(16), _cond(20), start) is start
    masked = TokenGrid(rng.integers(0, 16, (3, 20)), rng.random((3, 20)) < 0.5, 1.0)
    out = greedy_decode(OraclePredictor(truth, 16), _cond(20), masked)
    assert np.array_equal(out.indices[masked.mask], truth[masked.mask])
    assert np.array_equal(out.indices[~masked.mask], masked.indices[~masked.mask])
    full = masked.with_mask(np.ones((3, 20), bool))
    assert np.array_equal(greedy_decode(OraclePredictor(truth, 16), _cond(20), full).indices, truth)
    # uniform rows tie everywhere: lowest index wins
    assert not greedy_decode(UniformPredictor(16), _cond(20), full).indices.any()


def test_predictor_rows_sum_to_one(trained):
    x, s1 = speechlike(0.5, RATE, 70), speechlike(0.5, RATE, 71)
    cond = assemble_conditioning(x, s1, trained)
    grid = TokenGrid(np.zeros((4, cond.frames), np.int64), np.ones((4, cond.frames), bool), FC.frame_rate)
    truth = np.zeros((4, cond.frames), np.int64)
    for pred in (UniformPredictor(32), OraclePredictor(truth, 32), CopyPredictor(trained)):
        p = pred.predict(cond, grid)
        assert np.all(p >= 0) and np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_copy_predictor_reproduces_encode(trained):
    x, s1 = speechlike(1.0, RATE, 72), speechlike(1.0, RATE, 73)
    cond = assemble_conditioning(x, s1, trained)
    grid = TokenGrid(np.zeros((4, cond.frames), np.int64), np.ones((4, cond.frames), bool), FC.frame_rate)
    out = greedy_decode(CopyPredictor(trained), cond, grid)
    assert np.array_equal(out.indices, encode(s1, trained).indices)


def test_token_stage_is_codec_roundtrip(trained):
    x, s1 = speechlike(1.0, RATE, 74), speechlike(1.0, RATE, 75)
    stage = token_stage(trained)
    out = stage(x, s1)
    assert len(out) == len(x) and out.sample_rate == RATE
    want = decode(encode(s1, trained), trained, len(s1))
    assert np.array_equal(out.samples, want.samples)
    assert np.array_equal(stage(x, s1).samples, out.samples)


def test_dequantize_sums_codewords(trained):
    idx = np.array([[1, 2], [3, 0], [0, 0], [5, 6]])
    want = sum(trained.codewords[q].astype(np.float64)[idx[q]] for q in range(4))
    assert np.allclose(dequantize(idx, trained), want)
