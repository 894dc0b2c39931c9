"""Frozen speech features: SPQF feature files and a seeded synthetic encoder.

The synthetic encoder stands in for a self-supervised speech model.  Each
token is mapped through a frozen random embedding table, held for
``frames_per_token`` frames, mixed by a frozen random matrix and perturbed by
Gaussian noise.  Nothing in here is ever trained.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError

SPQF_MAGIC = b"SPQF"
SPQF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    valid_len: int | None = None
    sample_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise FormatError(f"frames must be T x d, got shape {self.frames.shape}")
        if self.valid_len is None:
            self.valid_len = self.frames.shape[0]
        if not 1 <= self.valid_len <= self.frames.shape[0]:
            raise FormatError(f"valid_len {self.valid_len} outside [1, {self.frames.shape[0]}]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SynthEncoderSpec:
    seed: int = 1234
    vocab_size: int = 64
    d_enc: int = 64
    frames_per_token: int = 4
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.frames_per_token < 1:
            raise ConfigError("frames_per_token must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class FrozenEncoderWeights:
    token_table: np.ndarray = field(repr=False)
    mixing: np.ndarray = field(repr=False)


@lru_cache(maxsize=8)
def frozen_weights(spec: SynthEncoderSpec) -> FrozenEncoderWeights:
    rng = np.random.default_rng([spec.seed, 0])
    std = 1.0 / np.sqrt(spec.d_enc)
    table = rng.normal(0.0, std, size=(spec.vocab_size, spec.d_enc))
    mixing = rng.normal(0.0, std, size=(spec.d_enc, spec.d_enc))
    table.setflags(write=False)
    mixing.setflags(write=False)
    return FrozenEncoderWeights(table, mixing)


def clean_frames(tokens: Sequence[int], spec: SynthEncoderSpec) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= spec.vocab_size):
        raise IndexError(f"token id outside [0, {spec.vocab_size})")
    w = frozen_weights(spec)
    return np.repeat(w.token_table[ids], spec.frames_per_token, axis=0) @ w.mixing


def synth_encode(tokens: Sequence[int], spec: SynthEncoderSpec, sample_id: str = "") -> FeatureSequence:
    """Deterministic frozen features for a token sequence (float32, T = len * frames_per_token)."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise FormatError("cannot encode an empty token sequence")
    frames = clean_frames(ids, spec)
    if spec.noise_sigma > 0:
        content_key = zlib.crc32(ids.astype("<i8").tobytes())
        rng = np.random.default_rng([spec.seed, 1, content_key])
        frames = frames + rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    return FeatureSequence(frames.astype(np.float32), sample_id=sample_id)


def nearest_token_decode(fs: FeatureSequence, spec: SynthEncoderSpec) -> list[int]:
    """Brute-force decoder: average each frame block and pick the closest clean token frame."""
    w = frozen_weights(spec)
    ref = w.token_table @ w.mixing
    n = fs.valid_len // spec.frames_per_token
    blocks = fs.frames[: n * spec.frames_per_token].astype(np.float64)
    means = blocks.reshape(n, spec.frames_per_token, -1).mean(axis=1)
    d2 = ((means[:, None, :] - ref[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1).tolist()


def cap_length(fs: FeatureSequence, max_frames: int) -> FeatureSequence:
    """Truncate to at most ``max_frames`` frames."""
    if max_frames < 1:
        raise ConfigError("max_frames must be >= 1")
    if fs.num_frames <= max_frames:
        return fs
    return FeatureSequence(fs.frames[:max_frames], min(fs.valid_len, max_frames), fs.sample_id)


def save_features(path: str | Path, fs: FeatureSequence) -> None:
    frames = np.ascontiguousarray(fs.frames[: fs.valid_len], dtype="<f4")
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SPQF_MAGIC, SPQF_VERSION, t, d))
        fh.write(frames.tobytes())


def load_features(path: str | Path, d_enc: int | None = None, max_frames: int | None = None) -> FeatureSequence:
    """Read an SPQF file; ``d_enc``/``max_frames`` enforce the run configuration."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, t, d = _HEADER.unpack_from(raw)
    if magic != SPQF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SPQF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if t < 1 or d < 1:
        raise FormatError(f"{path}: empty feature matrix ({t} x {d})")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * t * d:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * t * d}")
    if d_enc is not None and d != d_enc:
        raise ConfigError(f"{path}: feature width {d} != configured d_enc {d_enc}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)
    fs = FeatureSequence(frames, sample_id=path.stem)
    return cap_length(fs, max_frames) if max_frames is not None else fs


def pad_features(seqs: Sequence[FeatureSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack into (B, T_max, d) plus a (B, T_max) validity mask."""
    t_max = max(fs.num_frames for fs in seqs)
    d = seqs[0].dim
    out = np.zeros((len(seqs), t_max, d), dtype=seqs[0].frames.dtype)
    valid = np.zeros((len(seqs), t_max), dtype=bool)
    for i, fs in enumerate(seqs):
        if fs.dim != d:
            raise ConfigError("feature widths differ within a batch")
        out[i, : fs.num_frames] = fs.frames
        valid[i, : fs.valid_len] = True
    return out, valid
