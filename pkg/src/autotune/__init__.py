"""Learned, continuous pitch correction for karaoke vocals.

A stacked GRU reads the constant-Q spectra of a vocal track and its
time-aligned accompaniment and predicts, frame by frame, how many cents the
voice must be shifted to sit in tune with the backing.
"""

__version__ = "0.1.0"
