"""Inference with last-``stride``-frames stitching, and the audio renderer."""
from __future__ import annotations

import csv
import logging

import numpy as np

from . import dsp
from .audio_io import AudioBuffer
from .baseline import CorrectionTrack
from .dataset import NoteSegment
from .dsp import FeatureMatrix
from .nn import GruModel, forward_sequence

log = logging.getLogger(__name__)

STRIDE = 20
CROSSFADE_SEC = 0.010
# audio context on each side of a segment handed to the pitch shifter
RENDER_MARGIN = 2 * dsp.PV_FRAME

__all__ = [
    "CorrectionTrack",
    "window_starts",
    "stitch_owner",
    "stitch_predictions",
    "predict_corrections",
    "smooth_per_note",
    "render_corrected",
    "write_corrections_csv",
    "read_corrections_csv",
]


def window_starts(n_frames: int, seq_len: int, stride: int = STRIDE) -> list[int]:
    """Starts ``0, stride, 2 stride, ...`` until every frame is owned by some window.

    Windows may run past the end of the song; they are truncated there.
    """
    if n_frames <= seq_len or n_frames < stride:
        return [0]
    starts = [0]
    while starts[-1] + seq_len < n_frames:
        starts.append(starts[-1] + stride)
    return starts


def stitch_owner(n_frames: int, seq_len: int, stride: int = STRIDE) -> np.ndarray:
    """Index of the window each frame takes its prediction from.

    A frame belongs to the earliest window in which it is among the last
    ``stride`` frames; frames before the first window's tail use window 0.
    """
    starts = window_starts(n_frames, seq_len, stride)
    if len(starts) == 1:
        return np.zeros(n_frames, dtype=np.int64)
    t = np.arange(n_frames)
    owner = (t - (seq_len - stride)) // stride
    return np.clip(owner, 0, len(starts) - 1)


def stitch_predictions(model: GruModel, features: np.ndarray, seq_len: int, stride: int = STRIDE) -> np.ndarray:
    """Normalized per-frame predictions for a whole song, shape ``(T,)``."""
    features = np.asarray(features)
    n = features.shape[0]
    if n == 0:
        return np.zeros(0)
    starts = window_starts(n, seq_len, stride)
    length = min(seq_len, n)
    # the GRU is causal, so zero-padding past the song end leaves earlier frames untouched
    padded = np.zeros((starts[-1] + length, features.shape[1]), dtype=features.dtype)
    padded[:n] = features
    windows = np.stack([padded[s:s + length] for s in starts])
    pred = forward_sequence(model, windows)[0]
    owner = stitch_owner(n, seq_len, stride)
    t = np.arange(n)
    return pred[owner, t - np.asarray(starts)[owner]]


def predict_corrections(
    model: GruModel,
    features: FeatureMatrix,
    seq_len: int,
    stride: int = STRIDE,
    segments: list[NoteSegment] | None = None,
    single_precision: bool = False,
) -> CorrectionTrack:
    """Frame-wise corrections in cents.

    Voicing comes from ``segments`` when given (frames outside every
    segment get 0 cents); otherwise every frame counts as voiced. Values are
    not clamped.
    """
    if features.n_bins != model.config.input_dim:
        raise ValueError(f"features have {features.n_bins} bins, model expects {model.config.input_dim}")
    m = model.astype(np.float32) if single_precision else model
    vals = features.values.astype(np.float32 if single_precision else np.float64)
    cents = 100.0 * stitch_predictions(m, vals, seq_len, stride).astype(np.float64)
    voiced = np.ones(features.n_frames, dtype=bool)
    if segments is not None:
        voiced[:] = False
        for seg in segments:
            voiced[seg.start_frame:seg.end_frame] = True
        cents[~voiced] = 0.0
    out_of_range = np.abs(cents[voiced]) > 100.0
    if out_of_range.any():
        log.warning("%d voiced frames predict corrections beyond +-100 cents", int(out_of_range.sum()))
    return CorrectionTrack(cents, voiced, features.hop)


def smooth_per_note(track: CorrectionTrack, segments: list[NoteSegment]) -> CorrectionTrack:
    """Replace each note's corrections by their median; zero outside notes."""
    cents = np.zeros(len(track))
    voiced = np.zeros(len(track), dtype=bool)
    for seg in segments:
        if seg.end_frame > len(track):
            raise ValueError(f"segment {seg} runs past the {len(track)}-frame track")
        cents[seg.start_frame:seg.end_frame] = np.median(track.cents[seg.start_frame:seg.end_frame])
        voiced[seg.start_frame:seg.end_frame] = True
    return CorrectionTrack(cents, voiced, track.hop)


def constant_runs(track: CorrectionTrack) -> list[NoteSegment]:
    """Maximal runs of voiced frames sharing one correction value."""
    runs = []
    start = None
    for t in range(len(track) + 1):
        boundary = (
            t == len(track)
            or not track.voiced[t]
            or (start is not None and track.cents[t] != track.cents[start])
        )
        if start is not None and boundary:
            runs.append(NoteSegment(start, t))
            start = None
        if t < len(track) and track.voiced[t] and start is None:
            start = t
    return runs


def _ramp_membership(n: int, a: int, b: int, fade: int) -> np.ndarray:
    """1 on [a, b), with linear ramps of length ``fade`` centred on each edge."""
    t = np.arange(n) + 0.5
    half = fade / 2.0
    rise = np.clip((t - (a - half)) / fade, 0.0, 1.0) if fade else (t >= a).astype(float)
    fall = np.clip(((b + half) - t) / fade, 0.0, 1.0) if fade else (t < b).astype(float)
    return np.minimum(rise, fall)


def render_corrected(vocals: AudioBuffer, track: CorrectionTrack, segments: list[NoteSegment]) -> AudioBuffer:
    """Pitch-shift each segment's audio by its correction.

    A segment uses the median correction of its frames, which is its exact
    value after :func:`smooth_per_note`. Adjacent pieces meet with 10 ms
    equal-power crossfades and the output keeps the input length.
    """
    x = vocals.samples
    n = x.size
    hop = track.hop
    fade = int(round(CROSSFADE_SEC * vocals.sample_rate))
    out = np.zeros(n)
    weight_left = np.ones(n)
    for seg in segments:
        a = min(n, seg.start_frame * hop)
        b = min(n, seg.end_frame * hop)
        if b <= a:
            continue
        cents = float(np.median(track.cents[seg.start_frame:seg.end_frame]))
        lo = max(0, a - fade - RENDER_MARGIN)
        hi = min(n, b + fade + RENDER_MARGIN)
        chunk = x[lo:hi]
        shifted = chunk if cents == 0.0 else dsp.pitch_shift(AudioBuffer(chunk, vocals.sample_rate), cents).samples
        member = _ramp_membership(n, a, b, fade)[lo:hi]
        member = np.minimum(member, weight_left[lo:hi])
        weight_left[lo:hi] -= member
        out[lo:hi] += np.sqrt(member) * shifted
    out += np.sqrt(np.clip(weight_left, 0.0, 1.0)) * x
    return AudioBuffer(out, vocals.sample_rate)


def write_corrections_csv(track: CorrectionTrack, path, sample_rate: int = dsp.CANONICAL_RATE) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "time_sec", "cents", "voiced"])
        for i, (c, v) in enumerate(zip(track.cents, track.voiced)):
            w.writerow([i, f"{i * track.hop / sample_rate:.6f}", repr(float(c)), int(bool(v))])


def read_corrections_csv(path, hop: int = dsp.HOP) -> CorrectionTrack:
    cents, voiced = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                if int(row["frame_index"]) != len(cents):
                    raise ValueError("frame indices must be consecutive from 0")
                cents.append(float(row["cents"]))
                voiced.append(bool(int(row["voiced"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return CorrectionTrack(np.array(cents), np.array(voiced, dtype=bool), hop)
