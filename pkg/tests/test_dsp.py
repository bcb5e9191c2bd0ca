import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from autotune import dsp
from autotune.audio_io import AudioBuffer
from autotune.dsp import (
    ACCOMP_CQT,
    VOCAL_CQT,
    AlignmentError,
    CacheFormatError,
    CqtParams,
    FeatureMatrix,
    compress_db,
    cqt,
    cqt_magnitude,
    hann_window,
    load_features,
    pitch_shift,
    resample,
    save_features,
    stack_features,
    unstack_features,
)
from oracles import peak_hz, sine

SR = 44100


def buf(x, sr=SR):
    return AudioBuffer(x, sr)


# ---------------------------------------------------------------- window

def test_hann_closed_form():
    assert np.allclose(hann_window(4), [0.0, 0.5, 1.0, 0.5], atol=1e-15)


@given(st.integers(2, 5000))
def test_hann_sum_and_symmetry(n):
    w = hann_window(n)
    assert w.size == n
    assert abs(w.sum() - n / 2) <= 1e-9 * n
    k = np.arange(1, n)
    assert np.allclose(w[k], w[n - k], atol=1e-12)


def test_hann_too_short():
    with pytest.raises(ValueError):
        hann_window(1)


# ---------------------------------------------------------------- resample

def test_resample_identity():
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 1000)
    assert np.array_equal(resample(buf(x), SR).samples, x)


def test_resample_length_and_rate():
    out = resample(buf(np.zeros(SR)), 22050)
    assert len(out) == 22050 and out.sample_rate == 22050


def test_resample_downsample_keeps_tone():
    out = resample(buf(sine(440.0, 1.0)), 22050)
    assert abs(peak_hz(out.samples, 22050) - 440.0) < 1.0


def test_resample_upsample_keeps_tone():
    out = resample(buf(sine(1000.0, 0.5, 22050), 22050), SR)
    assert len(out) == SR // 2
    assert abs(peak_hz(out.samples, SR) - 1000.0) < 1.0


def test_resample_removes_content_above_new_nyquist():
    x = sine(15000.0, 0.5)
    out = resample(buf(x), 22050)
    interior = out.samples[1000:-1000]
    assert np.sqrt(np.mean(interior ** 2)) < 0.01 * np.sqrt(np.mean(x ** 2))


@pytest.mark.parametrize("rate", [0, -8000, 2.5])
def test_resample_invalid_rate(rate):
    with pytest.raises(ValueError):
        resample(buf(np.zeros(10)), rate)


@given(st.integers(0, 3000), st.sampled_from([8000, 16000, 22050, 48000, 96000]))
def test_resample_length_contract(n, rate):
    out = resample(buf(np.zeros(n)), rate)
    assert len(out) == round(n * rate / SR)


# ---------------------------------------------------------------- pitch shift

def test_pitch_shift_zero_is_near_identity():
    x = sine(440.0, 1.0) + 0.3 * sine(660.0, 1.0)
    y = pitch_shift(buf(x), 0.0).samples
    assert y.size == x.size
    corr = np.dot(x, y) / np.sqrt(np.dot(x, x) * np.dot(y, y))
    assert corr > 0.99


@pytest.mark.parametrize("cents", [100.0, -100.0])
def test_pitch_shift_semitone(cents):
    out = pitch_shift(buf(sine(440.0, 1.0)), cents).samples
    expected = 440.0 * 2.0 ** (cents / 1200.0)
    assert abs(peak_hz(out, SR) / expected - 1.0) < 0.005


@pytest.mark.parametrize("f", [100.0, 237.0, 523.0, 1000.0])
@pytest.mark.parametrize("cents", [-100.0, -50.0, 50.0, 100.0])
def test_pitch_shift_frequency_law(f, cents):
    out = pitch_shift(buf(sine(f, 0.75)), cents).samples
    ratio = peak_hz(out[4096:-4096], SR) / f
    assert abs(ratio / 2.0 ** (cents / 1200.0) - 1.0) < 0.005


@pytest.mark.parametrize("cents", [500.0, -500.0, 400.0])
def test_pitch_shift_large_in_range(cents):
    out = pitch_shift(buf(sine(300.0, 0.5)), cents).samples
    assert abs(peak_hz(out[4096:-4096], SR) / (300.0 * 2 ** (cents / 1200)) - 1.0) < 0.005


@pytest.mark.parametrize("cents", [500.01, -600.0])
def test_pitch_shift_out_of_range(cents):
    with pytest.raises(ValueError):
        pitch_shift(buf(np.zeros(100)), cents)


@given(st.integers(0, 6000), st.floats(-500, 500))
def test_property_pitch_shift_preserves_length(n, cents):
    x = np.random.default_rng(n).uniform(-0.5, 0.5, n)
    assert len(pitch_shift(buf(x), cents)) == n


# ---------------------------------------------------------------- CQT

def direct_bin(x, m, f, params):
    """Single CQT coefficient by the definition, looping over samples."""
    q = 1.0 / (2.0 ** (1.0 / params.bins_per_octave) - 1.0)
    n_k = min(math.ceil(q * params.sample_rate / f), 8 * params.hop)
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n_k) / n_k))
    centre = m * params.hop
    acc = 0j
    for j in range(n_k):
        idx = centre - n_k // 2 + j
        if 0 <= idx < x.size:
            acc += x[idx] * w[j] * np.exp(-2j * np.pi * f * (j - n_k // 2) / params.sample_rate)
    return abs(acc) / w.sum()


def test_default_params():
    assert VOCAL_CQT.n_bins + ACCOMP_CQT.n_bins == 536
    assert abs(VOCAL_CQT.frequencies[-1] - 75.0 * 2 ** (275 / 48)) < 1e-9
    assert 3900 < VOCAL_CQT.frequencies[-1] < 4100
    assert VOCAL_CQT.frequencies[0] == 75.0


def test_bin_centres():
    assert abs(VOCAL_CQT.frequencies[120] - 424.26) < 0.01


def test_top_bin_above_nyquist_rejected():
    with pytest.raises(ValueError):
        cqt(buf(np.zeros(2048), 7000), CqtParams(75.0, 48, 276, sample_rate=7000))


def test_frame_count():
    assert cqt(buf(np.zeros(SR)), VOCAL_CQT).n_frames == 44
    assert dsp.n_frames_for(1024) == 1 and dsp.n_frames_for(1025) == 2


def test_silence_is_floor():
    fm = cqt(buf(np.zeros(SR)), VOCAL_CQT)
    assert fm.values.shape == (44, 276)
    assert np.all(fm.values == 0.0)


@pytest.mark.parametrize("k", [0, 48, 120, 240])
def test_argmax_at_bin_centre(k):
    f = VOCAL_CQT.frequencies[k]
    fm = cqt(buf(sine(f, 1.0)), VOCAL_CQT)
    interior = fm.values[8:-8]
    assert np.all(np.argmax(interior, axis=1) == k)


@pytest.mark.parametrize("m,k", [(10, 0), (10, 47), (3, 130), (20, 275)])
def test_magnitude_matches_definition(m, k):
    x = np.random.default_rng(k).uniform(-0.5, 0.5, SR // 2)
    mags = cqt_magnitude(buf(x), VOCAL_CQT)
    ref = direct_bin(x, m, VOCAL_CQT.frequencies[k], VOCAL_CQT)
    assert abs(mags[m, k] - ref) <= 1e-10 * max(ref, 1e-12) + 1e-14


def test_shift_covariance():
    k0 = 100
    x = sine(VOCAL_CQT.frequencies[k0], 1.0)
    for semis in (1, 2, -2):
        y = pitch_shift(buf(x), 100.0 * semis)
        arg = np.argmax(cqt(y, VOCAL_CQT).values[8:-8], axis=1)
        assert np.all(np.abs(arg - (k0 + 4 * semis)) <= 1)


def test_compress_db_mapping():
    mags = np.array([[1.0, 0.1, 1e-4, 1e-5, 0.0]])
    v = compress_db(mags, 1.0)
    assert np.allclose(v, [[1.0, 0.75, 0.0, 0.0, 0.0]])
    assert np.all(compress_db(mags, 0.0) == 0.0)


def test_cqt_values_bounded():
    x = np.random.default_rng(1).uniform(-1, 1, SR // 4)
    v = cqt(buf(x), VOCAL_CQT).values
    assert np.all(np.isfinite(v)) and v.min() >= 0.0 and v.max() == 1.0


def test_cqt_rate_mismatch():
    with pytest.raises(ValueError):
        cqt(buf(np.zeros(1000), 22050), VOCAL_CQT)


# ---------------------------------------------------------------- stacking and cache

def test_stack_order_and_width():
    voc = FeatureMatrix(np.ones((5, 276)))
    acc = FeatureMatrix(np.zeros((5, 260)))
    st_ = stack_features(voc, acc)
    assert st_.n_bins == 536
    assert np.all(st_.values[:, :260] == 0.0) and np.all(st_.values[:, 260:] == 1.0)


def test_stack_zero_blocks():
    z = stack_features(FeatureMatrix(np.zeros((3, 276))), FeatureMatrix(np.zeros((3, 260))))
    assert np.all(z.values == 0.0)


def test_stack_misaligned():
    with pytest.raises(AlignmentError):
        stack_features(FeatureMatrix(np.zeros((3, 276))), FeatureMatrix(np.zeros((4, 260))))


@given(st.integers(0, 20), st.integers(1, 30), st.integers(1, 30))
def test_property_unstack_inverts_stack(n, a, v):
    rng = np.random.default_rng(n * 1000 + a * 31 + v)
    voc = FeatureMatrix(rng.random((n, v)))
    acc = FeatureMatrix(rng.random((n, a)))
    v2, a2 = unstack_features(stack_features(voc, acc), a)
    assert np.array_equal(v2.values, voc.values) and np.array_equal(a2.values, acc.values)


def test_cache_round_trip(tmp_path):
    vals = np.random.default_rng(0).random((17, 536)).astype(np.float32)
    p = tmp_path / "f.autf"
    save_features(FeatureMatrix(vals, 1024, 44100), p)
    data = p.read_bytes()
    assert data[:4] == b"AUTF"
    assert len(data) == 4 + 2 + 16 + 4 * vals.size
    fm = load_features(p)
    assert (fm.hop, fm.sample_rate, fm.n_frames, fm.n_bins) == (1024, 44100, 17, 536)
    assert np.array_equal(fm.values.astype(np.float32), vals)


def test_cache_errors(tmp_path):
    p = tmp_path / "f.autf"
    save_features(FeatureMatrix(np.zeros((4, 3))), p)
    good = p.read_bytes()
    p.write_bytes(good[:-4])
    with pytest.raises(CacheFormatError):
        load_features(p)
    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(CacheFormatError):
        load_features(p)
    p.write_bytes(good[:10])
    with pytest.raises(CacheFormatError):
        load_features(p)
