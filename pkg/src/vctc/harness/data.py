"""Synthetic monotonic-alignment sequence task and its on-disk container.

Each sample is a token sequence rendered into a frame matrix: every token
gets a fixed random embedding, is stretched over a random number of frames,
and each frame is perturbed with isotropic Gaussian noise.  Optional silence
segments (a zero embedding, same noise) can be inserted between tokens and
at the edges.  A silence separator is always forced between equal adjacent
tokens — without one their frame runs would fuse into a single
indistinguishable run and the target would not be recoverable from the
frames by any model.  Token embeddings depend only on ``(embedding_seed,
vocab_size, d_in)`` so that several splits — or a harder split with more
noise — share the same underlying symbol geometry.

File container: little-endian binary, layout documented on
:func:`save_dataset`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from ..ctc import Vocab
from ..numerics import Rng


class ConfigError(ValueError):
    """A task or training configuration that cannot be satisfied."""


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int
    d_in: int
    min_duration: int = 2
    max_duration: int = 4
    min_target_len: int = 2
    max_target_len: int = 5
    noise_std: float = 0.2
    silence_min: int = 0
    silence_max: int = 1
    max_frames: int | None = None
    seed: int = 0
    embedding_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_in < 1:
            raise ConfigError("vocab_size and d_in must be positive")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ConfigError("need 1 <= min_duration <= max_duration")
        if not 1 <= self.min_target_len <= self.max_target_len:
            raise ConfigError("need 1 <= min_target_len <= max_target_len")
        if not 0 <= self.silence_min <= self.silence_max:
            raise ConfigError("need 0 <= silence_min <= silence_max")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.max_frames is not None:
            # worst case: all tokens equal, so every gap needs a separator frame
            tightest = self.max_target_len * self.min_duration + (self.max_target_len - 1)
            if tightest > self.max_frames:
                raise ConfigError(
                    f"infeasible task: {self.max_target_len} tokens at >= {self.min_duration} "
                    f"frames each (plus repeat separators) cannot fit in {self.max_frames} frames"
                )

    def vocab(self) -> Vocab:
        return Vocab.default(self.vocab_size)

    def token_embeddings(self) -> np.ndarray:
        """(vocab_size, d_in) unit-norm rows, a function of the embedding seed only."""
        rng = Rng(self.embedding_seed).derive("embeddings", self.vocab_size, self.d_in)
        emb = rng.standard_normal((self.vocab_size, self.d_in))
        return emb / np.linalg.norm(emb, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    vocab: Vocab
    d_in: int
    items: list[tuple[np.ndarray, list[int]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def transcripts(self) -> list[list[str]]:
        return [self.vocab.to_symbols(y) for _, y in self.items]


def _render_sample(spec: SyntheticTaskSpec, emb: np.ndarray, rng: Rng) -> tuple[np.ndarray, list[int]]:
    n_tokens = int(rng.integers(spec.min_target_len, spec.max_target_len + 1))
    tokens = [int(t) for t in rng.integers(0, spec.vocab_size, size=n_tokens)]
    durations = rng.integers(spec.min_duration, spec.max_duration + 1, size=n_tokens)
    silences = rng.integers(spec.silence_min, spec.silence_max + 1, size=n_tokens + 1)
    segments: list[np.ndarray] = []
    for i, tok in enumerate(tokens):
        gap = int(silences[i])
        if i > 0 and tok == tokens[i - 1]:
            gap = max(gap, 1)  # equal neighbors must stay distinguishable
        if gap > 0:
            segments.append(np.zeros((gap, spec.d_in)))
        segments.append(np.tile(emb[tok], (int(durations[i]), 1)))
    if silences[-1] > 0:
        segments.append(np.zeros((int(silences[-1]), spec.d_in)))
    clean = np.concatenate(segments, axis=0)
    noisy = clean + spec.noise_std * rng.standard_normal(clean.shape)
    return noisy, tokens


def generate_dataset(spec: SyntheticTaskSpec, n: int) -> Dataset:
    """Render ``n`` samples; deterministic under ``spec.seed``.

    Every target is feasible by construction: each token occupies at least
    ``min_duration >= 1`` frames, so repeated tokens always leave room for
    the separating blank.  When ``max_frames`` is set, oversized draws are
    re-rendered (:class:`SyntheticTaskSpec` validation guarantees a fit
    exists).
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    emb = spec.token_embeddings()
    rng = Rng(spec.seed).derive("samples")
    items: list[tuple[np.ndarray, list[int]]] = []
    for _ in range(n):
        X, y = _render_sample(spec, emb, rng)
        while spec.max_frames is not None and X.shape[0] > spec.max_frames:
            X, y = _render_sample(spec, emb, rng)
        items.append((X, y))
    return Dataset(vocab=spec.vocab(), d_in=spec.d_in, items=items)


_DATA_MAGIC = b"VCTCDATA"
_DATA_VERSION = 1


def save_dataset(path, dataset: Dataset, meta: dict | None = None) -> None:
    """Write the binary container.

    Layout (little-endian): 8-byte magic ``VCTCDATA``; uint32 version;
    uint64 header length + UTF-8 JSON header (vocabulary, d_in, caller
    metadata); uint64 record count; then per record uint32 frame count T,
    uint32 target length U, T * d_in float64 frames in C order, U uint32
    token ids.
    """
    header = {
        "vocab": list(dataset.vocab.symbols),
        "d_in": dataset.d_in,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<I", _DATA_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<Q", len(dataset.items)))
        for X, y in dataset.items:
            X = np.asarray(X, dtype=np.float64)
            if X.ndim != 2 or X.shape[1] != dataset.d_in:
                raise ValueError(f"record frame matrix has shape {X.shape}, expected (T, {dataset.d_in})")
            fh.write(struct.pack("<II", X.shape[0], len(y)))
            fh.write(X.astype("<f8", copy=False).tobytes(order="C"))
            fh.write(np.asarray(y, dtype="<u4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated dataset file")
    return data


def load_dataset(path) -> tuple[Dataset, dict]:
    """Read a container written by :func:`save_dataset`; returns (dataset, meta)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_DATA_MAGIC)) != _DATA_MAGIC:
            raise ValueError("not a dataset file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _DATA_VERSION:
            raise ValueError(f"unsupported dataset format version {version}")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        vocab = Vocab(tuple(header["vocab"]))
        d_in = int(header["d_in"])
        (n_records,) = struct.unpack("<Q", _read_exact(fh, 8))
        items: list[tuple[np.ndarray, list[int]]] = []
        for _ in range(n_records):
            T, U = struct.unpack("<II", _read_exact(fh, 8))
            X = np.frombuffer(_read_exact(fh, T * d_in * 8), dtype="<f8").astype(np.float64).reshape(T, d_in)
            y = [int(t) for t in np.frombuffer(_read_exact(fh, U * 4), dtype="<u4")]
            items.append((X, y))
    return Dataset(vocab=vocab, d_in=d_in, items=items), header.get("meta", {})
