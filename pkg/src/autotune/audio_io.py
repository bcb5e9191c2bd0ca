"""Minimal RIFF/WAVE reader and writer.

Reads PCM16, PCM24 and IEEE float32 files with one or two channels and
always writes float32 mono.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class AudioError(Exception):
    """Base class for audio file problems."""


class WavFormatError(AudioError):
    """Unsupported codec, bit depth, channel layout or sample range."""


class CorruptWavError(AudioError):
    """Truncated or structurally broken file."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _chunks(data: bytes):
    pos = 12
    while pos < len(data):
        if pos + 8 > len(data):
            raise CorruptWavError("truncated chunk header")
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if body + size > len(data):
            raise CorruptWavError(f"chunk {cid!r} claims {size} bytes, only {len(data) - body} left")
        yield cid, data[body:body + size]
        pos = body + size + (size & 1)


def read_wav(path) -> AudioBuffer:
    """Read a WAV file into a mono float buffer.

    Stereo is downmixed by averaging the channels and integer PCM is scaled
    by ``1 / 2**(bits - 1)``. Float files whose samples leave [-1, 1] are
    rejected rather than clipped.
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CorruptWavError("file shorter than a RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")

    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise CorruptWavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise CorruptWavError("extensible fmt chunk too short")
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None:
        raise CorruptWavError("missing fmt chunk")
    if payload is None:
        raise CorruptWavError("missing data chunk")

    codec, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise WavFormatError(f"{channels} channels not supported")
    if (codec, bits) == (WAVE_FORMAT_PCM, 16):
        raw = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64)
        samples = raw / 32768.0
    elif (codec, bits) == (WAVE_FORMAT_PCM, 24):
        n = len(payload) // 3
        b = np.frombuffer(payload[: n * 3], dtype=np.uint8).reshape(n, 3).astype(np.int32)
        raw = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        raw = np.where(raw >= 1 << 23, raw - (1 << 24), raw)
        samples = raw.astype(np.float64) / float(1 << 23)
    elif (codec, bits) == (WAVE_FORMAT_IEEE_FLOAT, 32):
        samples = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"unsupported codec {codec:#06x} at {bits} bits")

    if samples.shape[0] % channels:
        raise CorruptWavError("data chunk ends mid-frame")
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise WavFormatError("non-finite samples")
    if samples.size and np.max(np.abs(samples)) > 1.0:
        raise WavFormatError("samples outside [-1, 1]")
    return AudioBuffer(samples, rate)


def write_wav(buffer: AudioBuffer, path) -> None:
    """Write ``buffer`` as a float32 mono WAV file."""
    pcm = np.ascontiguousarray(buffer.samples, dtype="<f4").tobytes()
    rate = buffer.sample_rate
    fmt = struct.pack("<HHIIHHH", WAVE_FORMAT_IEEE_FLOAT, 1, rate, rate * 4, 4, 32, 0)
    fact = struct.pack("<I", len(buffer))
    body = (
        b"WAVE"
        + b"fmt " + struct.pack("<I", len(fmt)) + fmt
        + b"fact" + struct.pack("<I", len(fact)) + fact
        + b"data" + struct.pack("<I", len(pcm)) + pcm
    )
    if len(pcm) & 1:
        body += b"\x00"
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)
