"""Reference computations that share no code with the package under test."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def peak_hz(x: np.ndarray, sample_rate: int, pad: int = 8) -> float:
    """Dominant frequency: Hann window, zero-padded FFT, parabolic fit on log magnitude."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    spec = np.abs(np.fft.rfft(x * np.hanning(n), n * pad))
    k = int(np.argmax(spec[1:-1])) + 1
    a, b, c = np.log(spec[k - 1:k + 2])
    delta = 0.5 * (a - c) / (a - 2.0 * b + c)
    return (k + delta) * sample_rate / (n * pad)


def cents(f: float, ref: float) -> float:
    return 1200.0 * math.log2(f / ref)


def equal_tempered_hz(p: float) -> float:
    return 440.0 * 2.0 ** ((p - 69.0) / 12.0)


def sine(freq: float, seconds: float, sample_rate: int = 44100, amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return amp * np.sin(2.0 * np.pi * freq * t)


def bank_cents_exact(n: int = 16) -> list[Fraction]:
    return [Fraction(-100) + Fraction(200 * k, n - 1) for k in range(n)]


def zero_model_mse(n: int = 16) -> float:
    """Mean squared label of a uniformly drawn bank value, in exact arithmetic."""
    vals = bank_cents_exact(n)
    return float(sum((v / 100) ** 2 for v in vals) / n)


def sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def gru_step_scalar(x, h, p) -> list[float]:
    """Scalar-by-scalar transcription of one GRU step."""
    n_h = len(h)
    n_x = len(x)

    def affine(W, U, b, hv):
        return [sum(W[i][j] * x[j] for j in range(n_x)) + sum(U[i][j] * hv[j] for j in range(n_h)) + b[i]
                for i in range(n_h)]

    z = [sigmoid(v) for v in affine(p["W_z"], p["U_z"], p["b_z"], h)]
    r = [sigmoid(v) for v in affine(p["W_r"], p["U_r"], p["b_r"], h)]
    rh = [r[i] * h[i] for i in range(n_h)]
    cand = [math.tanh(v) for v in affine(p["W_h"], p["U_h"], p["b_h"], rh)]
    return [(1.0 - z[i]) * h[i] + z[i] * cand[i] for i in range(n_h)]


def stitch_owner_by_enumeration(n_frames: int, seq_len: int, stride: int) -> list[int]:
    """Window index for each frame by scanning windows in order."""
    if n_frames <= seq_len or n_frames < stride:
        return [0] * n_frames
    starts = [0]
    while starts[-1] + seq_len < n_frames:
        starts.append(starts[-1] + stride)
    owner = []
    for t in range(n_frames):
        chosen = None
        for w, s in enumerate(starts):
            end = s + seq_len
            if end - stride <= t < end:
                chosen = w
                break
        if chosen is None:
            # before the first window's tail, or past the last window's tail
            chosen = 0 if t < seq_len - stride else len(starts) - 1
        owner.append(chosen)
    return owner
