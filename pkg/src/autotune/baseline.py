"""Classical comparator: autocorrelation pitch tracking and snap-to-note."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioBuffer
from .dsp import HOP, n_frames_for

F0_MIN = 75.0
F0_MAX = 1000.0
ANALYSIS_LEN = 1024
RMS_THRESHOLD_DB = -40.0
CLARITY_THRESHOLD = 0.5
# first peak reaching this fraction of the best one wins; avoids octave-down picks
PEAK_FRACTION = 0.9

CHROMATIC = tuple(range(12))


@dataclass
class F0Track:
    f0: np.ndarray
    voiced: np.ndarray
    hop: int = HOP

    def __len__(self) -> int:
        return self.f0.shape[0]


@dataclass
class CorrectionTrack:
    """Per-frame correction in cents plus a voicing flag."""

    cents: np.ndarray
    voiced: np.ndarray
    hop: int = HOP

    def __post_init__(self):
        self.cents = np.asarray(self.cents, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.cents.shape != self.voiced.shape:
            raise ValueError("cents and voiced flags must have equal length")

    def __len__(self) -> int:
        return self.cents.shape[0]


def midi_to_hz(p) -> float | np.ndarray:
    """Equal-tempered frequency ``440 * 2**((p - 69) / 12)``."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 127):
        raise ValueError(f"MIDI pitch must lie in [0, 127], got {p}")
    hz = 440.0 * 2.0 ** ((arr - 69.0) / 12.0)
    return float(hz) if hz.ndim == 0 else hz


def _nccf(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation of the first ANALYSIS_LEN samples against lagged copies.

    ``frames`` has shape ``(F, ANALYSIS_LEN + max_lag + 1)``; the result has
    shape ``(F, max_lag + 1)``.
    """
    n = ANALYSIS_LEN
    size = 1 << int(np.ceil(np.log2(frames.shape[1] + n)))
    head = frames[:, :n]
    spec = np.fft.rfft(frames, size, axis=1) * np.conj(np.fft.rfft(head, size, axis=1))
    num = np.fft.irfft(spec, size, axis=1)[:, : max_lag + 1]
    sq = np.cumsum(np.pad(frames * frames, ((0, 0), (1, 0))), axis=1)
    lag_energy = sq[:, n:n + max_lag + 1] - sq[:, : max_lag + 1]
    denom = np.sqrt(np.maximum(lag_energy * lag_energy[:, :1], 0.0))
    out = np.zeros_like(num)
    ok = denom > 1e-12
    out[ok] = num[ok] / denom[ok]
    return out


def track_f0(vocals: AudioBuffer, hop: int = HOP) -> F0Track:
    """Frame-wise f0 by normalized autocorrelation.

    Frames are centred on ``m * hop`` to line up with the CQT frames. A frame
    is voiced when its RMS exceeds -40 dBFS and the chosen autocorrelation
    peak exceeds 0.5.
    """
    sr = vocals.sample_rate
    x = vocals.samples
    n_frames = n_frames_for(x.size, hop)
    f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    if n_frames == 0:
        return F0Track(f0, voiced, hop)

    min_lag = max(2, int(np.floor(sr / F0_MAX)) - 1)
    max_lag = int(np.ceil(sr / F0_MIN)) + 1
    span = ANALYSIS_LEN + max_lag + 1
    half = ANALYSIS_LEN // 2
    padded = np.zeros((n_frames - 1) * hop + span)
    body = x[: max(0, padded.size - half)]
    padded[half:half + body.size] = body
    frames = np.lib.stride_tricks.sliding_window_view(padded, span)[::hop][:n_frames]

    rms = np.sqrt(np.mean(frames[:, :ANALYSIS_LEN] ** 2, axis=1))
    loud = rms > 10.0 ** (RMS_THRESHOLD_DB / 20.0)
    idx = np.flatnonzero(loud)
    if idx.size == 0:
        return F0Track(f0, voiced, hop)
    r = _nccf(np.ascontiguousarray(frames[idx]), max_lag)

    for row, m in zip(r, idx):
        seg = row[min_lag - 1:max_lag + 1]
        interior = seg[1:-1]
        peaks = np.flatnonzero((interior > seg[:-2]) & (interior >= seg[2:])) + 1
        if peaks.size == 0:
            continue
        best = seg[peaks].max()
        if best <= 0:
            continue
        k = peaks[np.argmax(seg[peaks] >= PEAK_FRACTION * best)]
        a, b, c = seg[k - 1], seg[k], seg[k + 1]
        denom = a - 2.0 * b + c
        delta = 0.5 * (a - c) / denom if denom != 0 else 0.0
        lag = (min_lag - 1 + k) + delta
        freq = sr / lag
        if b > CLARITY_THRESHOLD and F0_MIN <= freq <= F0_MAX:
            f0[m] = freq
            voiced[m] = True
    return F0Track(f0, voiced, hop)


def _allowed_pitches(scale) -> np.ndarray:
    classes = {int(c) % 12 for c in scale}
    if not classes:
        raise ValueError("scale must contain at least one pitch class")
    return np.array([p for p in range(128) if p % 12 in classes], dtype=np.float64)


def snap_correction(track: F0Track, scale=CHROMATIC) -> CorrectionTrack:
    """Cents needed to move each voiced frame onto the nearest scale note.

    A frame exactly halfway between two notes is moved down.
    """
    pitches = _allowed_pitches(scale)
    cents = np.zeros(len(track))
    v = track.voiced & (track.f0 > 0)
    if np.any(v):
        # distance in cents from each frame to each candidate note
        dist = 1200.0 * np.log2(track.f0[v, None] / midi_to_hz(pitches)[None, :])
        absd = np.abs(dist)
        nearest = absd.min(axis=1, keepdims=True)
        tie = absd <= nearest + 1e-9
        # among tied candidates the lowest note (largest positive distance) wins
        choice = np.argmax(np.where(tie, dist, -np.inf), axis=1)
        target = midi_to_hz(pitches[choice])
        cents[v] = 1200.0 * np.log2(target / track.f0[v])
    return CorrectionTrack(cents, v.copy(), track.hop)
