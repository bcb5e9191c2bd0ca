"""Synthetic pure-tone "songs" for tests and desk-scale experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioBuffer
from .baseline import midi_to_hz
from .dsp import CANONICAL_RATE

MAJOR = (0, 2, 4, 5, 7, 9, 11)
# no two members a whole tone apart, so a +-100 cent de-tune is never ambiguous
TRIAD = (0, 4, 7)


@dataclass
class SyntheticSong:
    song_id: str
    vocals: AudioBuffer
    accomp: AudioBuffer
    notes: list  # (midi, start_sample, end_sample)


def tone(freq: float, n: int, sr: int = CANONICAL_RATE, amp: float = 0.5, phase: float = 0.0) -> np.ndarray:
    return amp * np.sin(2.0 * np.pi * freq * np.arange(n) / sr + phase)


def _fade(x: np.ndarray, n_fade: int) -> np.ndarray:
    if n_fade and x.size > 2 * n_fade:
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(n_fade) / n_fade))
        x = x.copy()
        x[:n_fade] *= ramp
        x[-n_fade:] *= ramp[::-1]
    return x


def drone(root_midi: int, n: int, sr: int = CANONICAL_RATE, amp: float = 0.3) -> np.ndarray:
    """Root, fifth and octave with a few decaying harmonics each."""
    out = np.zeros(n)
    for interval, weight in ((0, 1.0), (7, 0.6), (12, 0.5)):
        f = midi_to_hz(root_midi + interval)
        for h in range(1, 5):
            if f * h < sr / 2:
                out += weight / h * tone(f * h, n, sr, 1.0)
    return amp * out / np.max(np.abs(out))


def melody_song(song_id: str, notes, root_midi: int, sr: int = CANONICAL_RATE,
                gap_sec: float = 0.06, fade_sec: float = 0.01, amp: float = 0.5) -> SyntheticSong:
    """Pure-tone melody over a drone; ``notes`` is a list of ``(midi, seconds)``.

    Notes are separated by ``gap_sec`` of silence so that they segment cleanly.
    """
    gap = int(round(gap_sec * sr))
    n_fade = int(round(fade_sec * sr))
    pieces = [np.zeros(gap)]
    spans = []
    pos = gap
    for midi, dur in notes:
        n = int(round(dur * sr))
        pieces.append(_fade(tone(midi_to_hz(midi), n, sr, amp), n_fade))
        spans.append((midi, pos, pos + n))
        pos += n
        pieces.append(np.zeros(gap))
        pos += gap
    vocals = np.concatenate(pieces)
    return SyntheticSong(song_id, AudioBuffer(vocals, sr), AudioBuffer(drone(root_midi, vocals.size, sr), sr), spans)


def random_melody_song(song_id: str, rng: np.random.Generator, duration_sec: float = 10.0,
                       root_midi: int | None = None, note_range=(0.3, 0.8), degrees=MAJOR,
                       gap_sec: float = 0.06, sr: int = CANONICAL_RATE) -> SyntheticSong:
    """Random melody on ``degrees`` (semitones above the root) spanning two octaves above ``root_midi + 12``."""
    if root_midi is None:
        root_midi = int(rng.integers(40, 48))
    notes = []
    total = 0.0
    while total < duration_sec:
        degree = degrees[int(rng.integers(len(degrees)))] + 12 * int(rng.integers(0, 2))
        dur = float(rng.uniform(*note_range))
        notes.append((root_midi + 12 + degree, dur))
        total += dur + gap_sec
    return melody_song(song_id, notes, root_midi, sr, gap_sec=gap_sec)
