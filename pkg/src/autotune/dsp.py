"""Signal-processing kernels: window, resampler, pitch shifter and CQT."""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer

CANONICAL_RATE = 44100
HOP = 1024
DB_FLOOR = 80.0

PV_FRAME = 2048
PV_HOP = 512

# windowed-sinc interpolation
SINC_ZERO_CROSSINGS = 32
KAISER_BETA = 8.6
SINC_TABLE_PHASES = 4096
_RESAMPLE_CHUNK = 1 << 14

CACHE_MAGIC = b"AUTF"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHIIII")


class AlignmentError(ValueError):
    """Inputs that should share a time axis do not."""


class CacheFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CqtParams:
    fmin: float
    bins_per_octave: int
    n_bins: int
    hop: int = HOP
    sample_rate: int = CANONICAL_RATE

    @property
    def frequencies(self) -> np.ndarray:
        return self.fmin * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def validate(self) -> None:
        if self.fmin <= 0 or self.bins_per_octave <= 0 or self.n_bins <= 0 or self.hop <= 0:
            raise ValueError(f"invalid CQT parameters: {self}")
        if self.frequencies[-1] >= self.sample_rate / 2:
            raise ValueError(
                f"top CQT bin {self.frequencies[-1]:.1f} Hz is not below Nyquist "
                f"({self.sample_rate / 2:.1f} Hz)"
            )


VOCAL_CQT = CqtParams(fmin=75.0, bins_per_octave=48, n_bins=276)
ACCOMP_CQT = CqtParams(fmin=55.0, bins_per_octave=48, n_bins=260)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    hop: int = HOP
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be 2-D (frames x bins)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window ``0.5 * (1 - cos(2 pi k / n))``."""
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


@functools.lru_cache(maxsize=64)
def _sinc_table(cutoff: float, half: int) -> np.ndarray:
    """Kernel taps for every fractional offset ``q / SINC_TABLE_PHASES``, shape ``(P + 1, 2 half)``."""
    frac = np.arange(SINC_TABLE_PHASES + 1) / SINC_TABLE_PHASES
    taps = np.arange(-half + 1, half + 1)
    d = frac[:, None] - taps[None, :]
    u = np.clip(d / half, -1.0, 1.0)
    w = np.i0(KAISER_BETA * np.sqrt(1.0 - u * u)) / np.i0(KAISER_BETA)
    return cutoff * np.sinc(cutoff * d) * w


def _sinc_interpolate(x: np.ndarray, ratio: float, out_len: int) -> np.ndarray:
    """Evaluate ``x`` at positions ``j / ratio`` with a Kaiser-windowed sinc.

    ``ratio`` is output rate over input rate; the cutoff drops below the input
    Nyquist when downsampling so that the result stays band-limited. Kernels
    are tabulated over fractional offsets and linearly interpolated.
    """
    cutoff = min(1.0, ratio)
    half = int(math.ceil(SINC_ZERO_CROSSINGS / cutoff))
    table = _sinc_table(cutoff, half)
    padded = np.concatenate([np.zeros(half), x, np.zeros(half + 2)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * half)
    out = np.zeros(out_len)
    for start in range(0, out_len, _RESAMPLE_CHUNK):
        pos = np.arange(start, min(out_len, start + _RESAMPLE_CHUNK)) / ratio
        base = np.floor(pos).astype(np.int64)
        ok = base < x.size + half
        phase = (pos - base) * SINC_TABLE_PHASES
        q = phase.astype(np.int64)
        t = (phase - q)[:, None]
        kernel = table[q] * (1.0 - t) + table[q + 1] * t
        # window base+1 spans input samples base-half+1 .. base+half
        rows = windows[np.minimum(base + 1, windows.shape[0] - 1)]
        out[start:start + pos.size] = np.where(ok, np.einsum("ij,ij->i", rows, kernel), 0.0)
    return out


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling to ``target_rate``."""
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise ValueError(f"target rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == audio.sample_rate:
        return AudioBuffer(audio.samples.copy(), target_rate)
    ratio = target_rate / audio.sample_rate
    out_len = int(round(len(audio) * ratio))
    return AudioBuffer(_sinc_interpolate(audio.samples, ratio, out_len), target_rate)


def _stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    win = hann_window(n_fft)
    padded = np.pad(x, (n_fft // 2, n_fft // 2))
    n_frames = 1 + max(0, (padded.size - n_fft)) // hop
    if padded.size < n_fft:
        padded = np.pad(padded, (0, n_fft - padded.size))
        n_frames = 1
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * win, axis=1).T


def _istft(spec: np.ndarray, hop: int, length: int) -> np.ndarray:
    n_fft = 2 * (spec.shape[0] - 1)
    win = hann_window(n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    total = n_fft + hop * (frames.shape[0] - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i, frame in enumerate(frames):
        out[i * hop:i * hop + n_fft] += frame
        norm[i * hop:i * hop + n_fft] += win * win
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out = out[n_fft // 2:]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


def time_stretch(x: np.ndarray, rate: float, n_fft: int = PV_FRAME, hop: int = PV_HOP) -> np.ndarray:
    """Phase-vocoder time stretch; ``rate > 1`` speeds up.

    Output length is ``round(len(x) / rate)``.
    """
    spec = _stft(x, n_fft, hop)
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    spec = np.concatenate([spec, np.zeros((n_bins, 2), dtype=spec.dtype)], axis=1)
    advance = 2.0 * np.pi * hop * np.arange(n_bins) / n_fft
    mags = np.abs(spec)
    angles = np.angle(spec)

    out = np.empty((n_bins, steps.size), dtype=complex)
    phase = angles[:, 0].copy()
    for i, step in enumerate(steps):
        k = int(step)
        alpha = step - k
        mag = (1.0 - alpha) * mags[:, k] + alpha * mags[:, k + 1]
        out[:, i] = mag * np.exp(1j * phase)
        dphi = angles[:, k + 1] - angles[:, k] - advance
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        phase += advance + dphi
    return _istft(out, hop, int(round(x.size / rate)))


def pitch_shift(audio: AudioBuffer, cents: float) -> AudioBuffer:
    """Shift pitch by ``cents`` while keeping the duration.

    The signal is time-stretched by ``r = 2**(cents/1200)`` and then resampled
    by ``1/r``; the result is trimmed or zero-padded to the input length.
    """
    if abs(cents) > 500:
        raise ValueError(f"pitch shift of {cents} cents is outside [-500, 500]")
    n = len(audio)
    if n == 0:
        return AudioBuffer(np.zeros(0), audio.sample_rate)
    ratio = 2.0 ** (cents / 1200.0)
    stretched = time_stretch(audio.samples, 1.0 / ratio)
    shifted = _sinc_interpolate(stretched, 1.0 / ratio, n)
    return AudioBuffer(shifted, audio.sample_rate)


def n_frames_for(n_samples: int, hop: int = HOP) -> int:
    return -(-n_samples // hop)


@functools.lru_cache(maxsize=8)
def _kernel_groups(params: CqtParams):
    """Split bins into groups that share a frame length (one per octave).

    Each group carries a ``(frame_len, 2 * n)`` real kernel: cosine columns
    followed by sine columns.
    """
    groups = []
    freqs = params.frequencies
    cap = 8 * params.hop
    lengths = np.minimum(np.ceil(params.q * params.sample_rate / freqs), cap).astype(int)
    octave = np.arange(params.n_bins) // params.bins_per_octave
    for o in np.unique(octave):
        sel = np.flatnonzero(octave == o)
        frame_len = int(lengths[sel].max())
        frame_len += frame_len & 1
        cos_k = np.zeros((frame_len, sel.size))
        sin_k = np.zeros((frame_len, sel.size))
        for j, b in enumerate(sel):
            n_k = int(lengths[b])
            w = hann_window(n_k) if n_k >= 2 else np.ones(1)
            w = w / w.sum()
            start = frame_len // 2 - n_k // 2
            t = (np.arange(start, start + n_k) - frame_len // 2) / params.sample_rate
            cos_k[start:start + n_k, j] = w * np.cos(2.0 * np.pi * freqs[b] * t)
            sin_k[start:start + n_k, j] = w * np.sin(2.0 * np.pi * freqs[b] * t)
        groups.append((sel, frame_len, np.concatenate([cos_k, sin_k], axis=1)))
    return groups


def cqt_magnitude(audio: AudioBuffer, params: CqtParams) -> np.ndarray:
    """Raw constant-Q magnitudes, shape ``(ceil(len / hop), n_bins)``.

    Frame ``m`` is centred on sample ``m * hop``. Each bin is the modulus of
    the inner product with a Hann-windowed complex exponential whose length
    is ``min(ceil(Q sr / f_k), 8 hop)``.
    """
    params.validate()
    if audio.sample_rate != params.sample_rate:
        raise ValueError(
            f"audio rate {audio.sample_rate} does not match CQT rate {params.sample_rate}"
        )
    x = audio.samples
    n_frames = n_frames_for(x.size, params.hop)
    mags = np.zeros((n_frames, params.n_bins))
    if n_frames == 0:
        return mags
    for sel, frame_len, kernel in _kernel_groups(params):
        half = frame_len // 2
        need = (n_frames - 1) * params.hop + frame_len
        padded = np.zeros(need)
        body = x[: max(0, need - half)]
        padded[half:half + body.size] = body
        frames = np.lib.stride_tricks.sliding_window_view(padded, frame_len)[:: params.hop][:n_frames]
        for s in range(0, n_frames, 256):
            proj = np.ascontiguousarray(frames[s:s + 256]) @ kernel
            mags[s:s + 256, sel] = np.hypot(proj[:, : sel.size], proj[:, sel.size:])
    return mags


def compress_db(mags: np.ndarray, max_ref: float) -> np.ndarray:
    """Map magnitudes to [0, 1] on a dB scale with an 80 dB floor below ``max_ref``."""
    out = np.zeros_like(mags, dtype=np.float64)
    if max_ref <= 0:
        return out
    pos = mags > 0
    out[pos] = 1.0 + 20.0 * np.log10(mags[pos] / max_ref) / DB_FLOOR
    return np.clip(out, 0.0, 1.0)


def cqt(audio: AudioBuffer, params: CqtParams, max_ref: float | None = None) -> FeatureMatrix:
    """Log-compressed CQT; ``max_ref`` defaults to this signal's own peak magnitude."""
    mags = cqt_magnitude(audio, params)
    if max_ref is None:
        max_ref = float(mags.max()) if mags.size else 0.0
    return FeatureMatrix(compress_db(mags, max_ref), params.hop, params.sample_rate)


def stack_features(vocal: FeatureMatrix, accomp: FeatureMatrix) -> FeatureMatrix:
    """Concatenate per frame: accompaniment block first, then vocals."""
    if vocal.n_frames != accomp.n_frames:
        raise AlignmentError(
            f"vocal has {vocal.n_frames} frames but accompaniment has {accomp.n_frames}"
        )
    return FeatureMatrix(np.concatenate([accomp.values, vocal.values], axis=1), vocal.hop, vocal.sample_rate)


def unstack_features(stacked: FeatureMatrix, accomp_bins: int) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Inverse of :func:`stack_features`; returns ``(vocal, accomp)``."""
    v = stacked.values
    return (
        FeatureMatrix(v[:, accomp_bins:], stacked.hop, stacked.sample_rate),
        FeatureMatrix(v[:, :accomp_bins], stacked.hop, stacked.sample_rate),
    )


def save_features(fm: FeatureMatrix, path) -> None:
    header = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, fm.n_frames, fm.n_bins, fm.hop, fm.sample_rate)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, version, n_frames, n_bins, hop, rate = _CACHE_HEADER.unpack_from(data, 0)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: not a version-{CACHE_VERSION} feature cache")
    expected = _CACHE_HEADER.size + 4 * n_frames * n_bins
    if len(data) != expected:
        raise CacheFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_CACHE_HEADER.size).reshape(n_frames, n_bins)
    return FeatureMatrix(values.astype(np.float64), hop, rate)
