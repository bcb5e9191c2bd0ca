import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

from autotune.dataset import NoteSegment, PreparedSong, shift_bank  # noqa: E402
from autotune.synth import melody_song  # noqa: E402


@pytest.fixture(scope="session")
def tiny_song() -> PreparedSong:
    """Random features standing in for a prepared song: 60 frames, three notes."""
    rng = np.random.default_rng(0)
    n, acc, voc = 60, 260, 276
    return PreparedSong(
        "tiny",
        rng.random((n, acc)).astype(np.float32),
        rng.random((n, voc)).astype(np.float32),
        rng.random((16, n, voc)).astype(np.float32),
        [NoteSegment(5, 20), NoteSegment(20, 35), NoteSegment(40, 55)],
        shift_bank().cents,
    )


@pytest.fixture(scope="session")
def melody():
    """Four-note pure-tone melody over a drone, 0.25 s rests between notes."""
    return melody_song("melody", [(60, 0.6), (64, 0.5), (67, 0.7), (72, 0.5)], 48, gap_sec=0.25)
