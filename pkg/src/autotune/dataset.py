"""Corpus construction: stems, annotations, de-tune bank, note segments and batches."""
from __future__ import annotations

import bisect
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .audio_io import AudioBuffer
from .baseline import F0Track, track_f0
from .dsp import ACCOMP_CQT, CANONICAL_RATE, VOCAL_CQT, AlignmentError, CqtParams, FeatureMatrix
from .seeding import SPLIT, rng_for

log = logging.getLogger(__name__)

N_SHIFTS = 16
MAX_DETUNE_CENTS = 100.0
MAX_K_BINS = 16
BATCH_SIZE = 32

# note segmenter thresholds
SPLIT_CENTS = 50.0
LOOKAHEAD = 3
MIN_SEGMENT_FRAMES = 5

# label = LABEL_SIGN[convention] * cents / 100
LABEL_SIGN = {"correction": -1.0, "detune": 1.0}


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationRegion:
    song_id: str
    start_sec: float
    end_sec: float


@dataclass(frozen=True)
class NoteSegment:
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if not 0 <= self.start_frame < self.end_frame:
            raise ValueError(f"invalid segment [{self.start_frame}, {self.end_frame})")

    def __len__(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class ShiftBank:
    cents: tuple

    def __post_init__(self):
        if len(self.cents) < 2 or len(set(self.cents)) != len(self.cents):
            raise ValueError("a shift bank holds at least two distinct values")

    def __len__(self) -> int:
        return len(self.cents)

    def labels(self, convention: str = "correction") -> np.ndarray:
        return LABEL_SIGN[convention] * np.asarray(self.cents) / MAX_DETUNE_CENTS


def shift_bank(n: int = N_SHIFTS) -> ShiftBank:
    """``n`` de-tune amounts from -100 to +100 cents, evenly spaced in cents (16 by default)."""
    if n < 2:
        raise ValueError("a shift bank needs at least two values")
    step = 2.0 * MAX_DETUNE_CENTS / (n - 1)
    return ShiftBank(tuple(-MAX_DETUNE_CENTS + k * step for k in range(n)))


def load_annotations(path) -> list[AnnotationRegion]:
    """Parse a ``song_id,start_sec,end_sec`` CSV into sorted, validated regions."""
    by_song: dict[str, list[tuple[int, AnnotationRegion]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != ["song_id", "start_sec", "end_sec"]:
            raise AnnotationError(f"{path}: expected header song_id,start_sec,end_sec")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise AnnotationError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                start, end = float(row[1]), float(row[2])
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from None
            song = row[0].strip()
            if not song or start < 0 or end <= start or not np.isfinite([start, end]).all():
                raise AnnotationError(f"{path}:{lineno}: invalid region {row}")
            by_song.setdefault(song, []).append((lineno, AnnotationRegion(song, start, end)))

    regions = []
    for song in sorted(by_song):
        rows = sorted(by_song[song], key=lambda r: r[1].start_sec)
        for (_, prev), (lineno, cur) in zip(rows, rows[1:]):
            if cur.start_sec < prev.end_sec:
                raise AnnotationError(f"{path}:{lineno}: region overlaps another for {song}")
        regions.extend(r for _, r in rows)
    return regions


def mix_stems(bass: AudioBuffer, drums: AudioBuffer, other: AudioBuffer) -> AudioBuffer:
    """Sum the three non-vocal stems, scaling down only if the sum clips."""
    rates = {bass.sample_rate, drums.sample_rate, other.sample_rate}
    lengths = {len(bass), len(drums), len(other)}
    if len(rates) != 1 or len(lengths) != 1:
        raise AlignmentError(f"stems disagree: rates {sorted(rates)}, lengths {sorted(lengths)}")
    mix = bass.samples + drums.samples + other.samples
    peak = np.max(np.abs(mix)) if mix.size else 0.0
    if peak > 1.0:
        mix = mix / peak
    return AudioBuffer(mix, bass.sample_rate)


def render_detune_bank(vocals: AudioBuffer, bank: ShiftBank) -> list[AudioBuffer]:
    return [dsp.pitch_shift(vocals, c) for c in bank.cents]


def _cents_between(a: float, b: float) -> float:
    return 1200.0 * np.log2(a / b)


def segment_notes(f0: F0Track) -> list[NoteSegment]:
    """Split voiced runs into notes.

    A segment opens at every voicing onset and wherever the median f0 of the
    next three voiced frames strays more than 50 cents from the running
    median of the current segment. Segments shorter than five frames are
    folded into an adjacent segment, or dropped when isolated.
    """
    freq, voiced = f0.f0, f0.voiced
    n = len(f0)
    raw: list[list[int]] = []
    start = None
    members: list[float] = []
    for t in range(n):
        if not voiced[t]:
            if start is not None:
                raw.append([start, t])
                start = None
            continue
        if start is None:
            start, members = t, [freq[t]]
            continue
        ahead = []
        for u in range(t, min(n, t + LOOKAHEAD)):
            if not voiced[u]:
                break
            ahead.append(freq[u])
        m = len(members)
        running = members[m // 2] if m % 2 else 0.5 * (members[m // 2 - 1] + members[m // 2])
        if abs(_cents_between(float(np.median(ahead)), running)) > SPLIT_CENTS:
            raw.append([start, t])
            start, members = t, [freq[t]]
        else:
            bisect.insort(members, freq[t])
    if start is not None:
        raw.append([start, n])

    merged: list[list[int]] = []
    i = 0
    while i < len(raw):
        seg = raw[i]
        if seg[1] - seg[0] >= MIN_SEGMENT_FRAMES:
            merged.append(seg)
        elif merged and merged[-1][1] == seg[0]:
            merged[-1][1] = seg[1]
        elif i + 1 < len(raw) and raw[i + 1][0] == seg[1]:
            raw[i + 1][0] = seg[0]
        i += 1
    return [NoteSegment(a, b) for a, b in merged]


def region_mask(regions: list[AnnotationRegion], n_frames: int, hop: int, sample_rate: int) -> np.ndarray:
    """Frames whose centre time falls inside an annotated region."""
    times = np.arange(n_frames) * hop / sample_rate
    mask = np.zeros(n_frames, dtype=bool)
    for r in regions:
        mask |= (times >= r.start_sec) & (times < r.end_sec)
    return mask


def restrict_segments(segments: list[NoteSegment], keep: np.ndarray) -> list[NoteSegment]:
    """Clip segments to the frames where ``keep`` is true."""
    out = []
    for seg in segments:
        inside = keep[seg.start_frame:seg.end_frame]
        edges = np.diff(np.concatenate([[0], inside.astype(np.int8), [0]]))
        for a, b in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            out.append(NoteSegment(seg.start_frame + int(a), seg.start_frame + int(b)))
    return out


def segments_from_boundaries(boundaries, keep: np.ndarray) -> list[NoteSegment]:
    """Segments between consecutive boundary frames, clipped to ``keep``."""
    n = keep.shape[0]
    cuts = sorted({0, n, *(int(b) for b in boundaries if 0 < int(b) < n)})
    spans = [NoteSegment(a, b) for a, b in zip(cuts, cuts[1:])]
    return restrict_segments(spans, keep)


def load_boundaries(path) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.setdefault(row["song_id"].strip(), []).append(int(row["frame_index"]))
            except (KeyError, TypeError, ValueError):
                raise AnnotationError(f"{path}:{lineno}: expected song_id,frame_index") from None
    return out


def segment_index(segments: list[NoteSegment], n_frames: int) -> np.ndarray:
    """Per-frame index of the owning segment, -1 outside all segments."""
    idx = np.full(n_frames, -1, dtype=np.int64)
    for s, seg in enumerate(segments):
        if seg.end_frame > n_frames:
            raise AlignmentError(f"segment {seg} exceeds {n_frames} frames")
        idx[seg.start_frame:seg.end_frame] = s
    return idx


@dataclass
class TrainingExample:
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    accomp_bins: int

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def _label_table(bank: ShiftBank, convention: str) -> np.ndarray:
    return bank.labels(convention)


def assemble_example(
    bank_cqts: list[FeatureMatrix],
    accomp_cqt: FeatureMatrix,
    vocal_cqt: FeatureMatrix,
    segments: list[NoteSegment],
    assignment,
    bank: ShiftBank,
    convention: str = "correction",
) -> TrainingExample:
    """Build one de-tuned training example.

    Frames of segment ``s`` take their vocal block from
    ``bank_cqts[assignment[s]]`` and the label that undoes that de-tune.
    Frames outside every segment keep the untouched vocal frame, label 0,
    and are masked out of the loss.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (len(segments),):
        raise ValueError(f"{len(segments)} segments but {assignment.size} assignments")
    if len(bank_cqts) != len(bank):
        raise ValueError(f"expected {len(bank)} bank feature matrices, got {len(bank_cqts)}")
    n = accomp_cqt.n_frames
    if vocal_cqt.n_frames != n or any(b.n_frames != n for b in bank_cqts):
        raise AlignmentError("bank, vocal and accompaniment features are not frame-aligned")
    bank_vals = np.stack([b.values for b in bank_cqts])
    seg_idx = segment_index(segments, n)
    return _assemble(bank_vals, accomp_cqt.values, vocal_cqt.values, seg_idx, assignment,
                     _label_table(bank, convention))


def _assemble(bank_vals, accomp, vocal, seg_idx, assignment, label_table) -> TrainingExample:
    inside = seg_idx >= 0
    frame_shift = np.where(inside, assignment[np.maximum(seg_idx, 0)] if assignment.size else 0, 0)
    frames = np.arange(seg_idx.size)
    vocal_out = np.array(vocal, dtype=np.float64)
    if np.any(inside):
        vocal_out[inside] = bank_vals[frame_shift[inside], frames[inside]]
    labels = np.where(inside, label_table[frame_shift], 0.0)
    features = np.concatenate([np.asarray(accomp, dtype=np.float64), vocal_out], axis=1)
    return TrainingExample(features, labels, inside.copy(), accomp.shape[1])


def _shift_rows(block: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros_like(block)
    if k > 0:
        out[..., k:] = block[..., :-k]
    elif k < 0:
        out[..., :k] = block[..., -k:]
    else:
        out[...] = block
    return out


def shift_blocks(features: np.ndarray, accomp_bins: int, k_bins: int) -> np.ndarray:
    """Move both feature blocks ``k_bins`` bins up (positive) or down, zero-filling."""
    return np.concatenate(
        [_shift_rows(features[..., :accomp_bins], k_bins), _shift_rows(features[..., accomp_bins:], k_bins)],
        axis=-1,
    )


def augment_vertical(example: TrainingExample, k_bins: int) -> TrainingExample:
    """Global transposition by shifting each CQT block by ``k_bins`` bins."""
    if abs(k_bins) > MAX_K_BINS:
        raise ValueError(f"vertical shift of {k_bins} bins exceeds +-{MAX_K_BINS}")
    return TrainingExample(
        shift_blocks(example.features, example.accomp_bins, int(k_bins)),
        example.labels.copy(),
        example.mask.copy(),
        example.accomp_bins,
    )


@dataclass
class PreparedSong:
    """Everything needed to draw training examples from one song.

    ``bank`` holds the vocal CQT of every de-tuned rendering, shape
    ``(n_shifts, n_frames, vocal_bins)``.
    """

    song_id: str
    accomp: np.ndarray
    vocal: np.ndarray
    bank: np.ndarray
    segments: list[NoteSegment]
    bank_cents: tuple = field(default_factory=lambda: shift_bank().cents)
    hop: int = dsp.HOP
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        n = self.accomp.shape[0]
        if self.vocal.shape[0] != n or self.bank.shape[1] != n:
            raise AlignmentError(f"{self.song_id}: feature blocks are not frame-aligned")
        if self.bank.shape[0] != len(self.bank_cents):
            raise ValueError(f"{self.song_id}: {self.bank.shape[0]} bank renderings for {len(self.bank_cents)} shifts")
        self.seg_idx = segment_index(self.segments, n)

    @property
    def n_frames(self) -> int:
        return self.accomp.shape[0]

    @property
    def accomp_bins(self) -> int:
        return self.accomp.shape[1]

    def stacked(self) -> FeatureMatrix:
        return FeatureMatrix(np.concatenate([self.accomp, self.vocal], axis=1).astype(np.float64),
                             self.hop, self.sample_rate)

    def example(self, assignment, convention: str = "correction", window: slice = slice(None)) -> TrainingExample:
        label_table = ShiftBank(self.bank_cents).labels(convention)
        seg_idx = self.seg_idx[window]
        return _assemble(self.bank[:, window], self.accomp[window], self.vocal[window], seg_idx,
                         np.asarray(assignment, dtype=np.int64), label_table)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        dsp.save_features(FeatureMatrix(self.accomp, self.hop, self.sample_rate), d / "accomp.autf")
        dsp.save_features(FeatureMatrix(self.vocal, self.hop, self.sample_rate), d / "vocal.autf")
        for k, vals in enumerate(self.bank):
            dsp.save_features(FeatureMatrix(vals, self.hop, self.sample_rate), d / f"bank_{k:02d}.autf")
        with open(d / "segments.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["start_frame", "end_frame"])
            w.writerows([s.start_frame, s.end_frame] for s in self.segments)
        meta = {"song_id": self.song_id, "bank_cents": list(self.bank_cents), "n_frames": self.n_frames}
        (d / "song.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "PreparedSong":
        d = Path(directory)
        meta = json.loads((d / "song.json").read_text())
        accomp = dsp.load_features(d / "accomp.autf")
        vocal = dsp.load_features(d / "vocal.autf")
        bank = np.stack([dsp.load_features(d / f"bank_{k:02d}.autf").values.astype(np.float32)
                         for k in range(len(meta["bank_cents"]))])
        with open(d / "segments.csv", newline="") as fh:
            segments = [NoteSegment(int(r["start_frame"]), int(r["end_frame"])) for r in csv.DictReader(fh)]
        return cls(meta["song_id"], accomp.values.astype(np.float32), vocal.values.astype(np.float32), bank,
                   segments, tuple(meta["bank_cents"]), accomp.hop, accomp.sample_rate)


def vocal_segments(vocals: AudioBuffer, n_frames: int, regions=None, boundaries=None) -> list[NoteSegment]:
    """Note segments for a vocal track, limited to annotated regions when given."""
    keep = np.ones(n_frames, dtype=bool)
    if regions:
        keep = region_mask(regions, n_frames, dsp.HOP, vocals.sample_rate)
    if boundaries is not None:
        return segments_from_boundaries(boundaries, keep)
    f0 = track_f0(vocals)
    return restrict_segments(segment_notes(f0), keep[: len(f0)])


def prepare_song(
    song_id: str,
    vocals: AudioBuffer,
    accomp: AudioBuffer,
    regions: list[AnnotationRegion] | None = None,
    boundaries=None,
    bank: ShiftBank | None = None,
    vocal_params: CqtParams = VOCAL_CQT,
    accomp_params: CqtParams = ACCOMP_CQT,
) -> PreparedSong:
    """Render the de-tune bank and compute every feature block for one song.

    All blocks are compressed against the same reference: the loudest CQT
    magnitude of the original vocal and accompaniment.
    """
    bank = bank or shift_bank()
    if vocals.sample_rate != vocal_params.sample_rate:
        vocals = dsp.resample(vocals, vocal_params.sample_rate)
    if accomp.sample_rate != accomp_params.sample_rate:
        accomp = dsp.resample(accomp, accomp_params.sample_rate)
    if len(vocals) != len(accomp):
        raise AlignmentError(f"{song_id}: vocals have {len(vocals)} samples, accompaniment {len(accomp)}")

    acc_mag = dsp.cqt_magnitude(accomp, accomp_params)
    voc_mag = dsp.cqt_magnitude(vocals, vocal_params)
    max_ref = float(max(acc_mag.max(initial=0.0), voc_mag.max(initial=0.0)))
    bank_vals = np.stack([
        dsp.compress_db(dsp.cqt_magnitude(v, vocal_params), max_ref).astype(np.float32)
        for v in render_detune_bank(vocals, bank)
    ])
    segments = vocal_segments(vocals, acc_mag.shape[0], regions, boundaries)
    log.info("%s: %d frames, %d note segments", song_id, acc_mag.shape[0], len(segments))
    return PreparedSong(
        song_id,
        dsp.compress_db(acc_mag, max_ref).astype(np.float32),
        dsp.compress_db(voc_mag, max_ref).astype(np.float32),
        bank_vals,
        segments,
        bank.cents,
        vocal_params.hop,
        vocal_params.sample_rate,
    )


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def make_batch(
    song: PreparedSong,
    window_start: int,
    seq_len: int,
    rng: np.random.Generator,
    batch_size: int = BATCH_SIZE,
    max_k_bins: int = MAX_K_BINS,
    convention: str = "correction",
) -> Batch:
    """``batch_size`` independently re-shuffled, transposed variants of one window.

    Each item draws its own per-segment bank indices and its own global
    vertical shift. A song shorter than ``seq_len`` yields one truncated
    window.
    """
    if max_k_bins > MAX_K_BINS:
        raise ValueError(f"vertical shift range {max_k_bins} exceeds {MAX_K_BINS}")
    if seq_len > song.n_frames:
        window_start, seq_len = 0, song.n_frames
    if window_start < 0 or window_start + seq_len > song.n_frames:
        raise ValueError(f"window [{window_start}, {window_start + seq_len}) outside {song.n_frames} frames")
    window = slice(window_start, window_start + seq_len)
    label_table = ShiftBank(song.bank_cents).labels(convention)
    seg_idx = song.seg_idx[window]
    bank_w = song.bank[:, window]
    accomp_w = song.accomp[window]
    vocal_w = song.vocal[window]
    n_seg = len(song.segments)

    feats = np.empty((batch_size, seq_len, song.accomp_bins + song.vocal.shape[1]))
    labels = np.empty((batch_size, seq_len))
    mask = np.empty((batch_size, seq_len), dtype=bool)
    for i in range(batch_size):
        assignment = rng.integers(0, len(label_table), size=n_seg)
        k = int(rng.integers(-max_k_bins, max_k_bins + 1))
        ex = _assemble(bank_w, accomp_w, vocal_w, seg_idx, assignment, label_table)
        feats[i] = shift_blocks(ex.features, ex.accomp_bins, k) if k else ex.features
        labels[i] = ex.labels
        mask[i] = ex.mask
    return Batch(feats, labels, mask)


def split_corpus(songs, n_test: int, seed: int, manifest_path=None) -> tuple[list, list]:
    """Deterministic shuffled train/test split, optionally written to a manifest."""
    songs = list(songs)
    if not 0 <= n_test < len(songs):
        raise ValueError(f"n_test={n_test} must be below the number of songs ({len(songs)})")
    order = rng_for(seed, SPLIT).permutation(len(songs))
    test_idx = set(order[:n_test].tolist())
    train = [s for i, s in enumerate(songs) if i not in test_idx]
    test = [s for i, s in enumerate(songs) if i in test_idx]
    if manifest_path is not None:
        path = Path(manifest_path)
        manifest = json.loads(path.read_text()) if path.exists() else {}
        manifest["split"] = {"seed": seed, "train": train, "test": test}
        path.write_text(json.dumps(manifest, indent=2) + "\n")
    return train, test
