"""Shared value types and portable serialization.

All types here are immutable after construction (arrays are marked
read-only), so instances can be shared freely across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal, Sequence

import numpy as np

EMB1_MAGIC = b"EMB1"

#: Hard cap on token-sequence / embedding length shared by every component.
MAX_TOKENS = 32

LossKind = Literal["pixel_sse", "latent_sse"]
LOSS_KINDS = ("pixel_sse", "latent_sse")


class EmbeddingFormatError(ValueError):
    """An EMB1 file is malformed: bad magic or truncated payload."""


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    out = np.array(values, dtype=dtype, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Prompt:
    """A piece of text plus its token ids under the owning tokenizer."""

    text: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(i) for i in self.token_ids))
        if len(self.token_ids) > MAX_TOKENS:
            raise ValueError(
                f"prompt has {len(self.token_ids)} tokens, limit is {MAX_TOKENS}"
            )
        if any(i < 0 for i in self.token_ids):
            raise ValueError("token ids must be nonnegative")

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class LatentTextEmbedding:
    """Post-encoder contextual text embedding, an L x d matrix.

    This is the continuous object the refinement stage optimizes.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True, order="C")
        if vals.ndim != 2:
            raise ValueError(f"embedding must be 2-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("embedding contains non-finite entries")
        if vals.shape[0] > MAX_TOKENS:
            raise ValueError(
                f"sequence length {vals.shape[0]} exceeds limit {MAX_TOKENS}"
            )
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def seq_len(self) -> int:
        return int(self.values.shape[0])

    @property
    def embed_dim(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class ImageTensor:
    """An RGB image as a 3 x H x W float array with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        pix = np.array(self.pixels, dtype=np.float64, copy=True, order="C")
        if pix.ndim != 3 or pix.shape[0] != 3:
            raise ValueError(f"image must have shape (3, H, W), got {pix.shape}")
        if not np.all(np.isfinite(pix)):
            raise ValueError("image contains non-finite values")
        if pix.min() < 0.0 or pix.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        pix.flags.writeable = False
        object.__setattr__(self, "pixels", pix)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class LatentImage:
    """Latent-space image representation, shape (c, h, w)."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True, order="C")
        if vals.ndim != 3:
            raise ValueError(f"latent must be 3-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("latent contains non-finite values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class NoiseSpec:
    """Seed plus shape; expanding the same spec twice gives identical noise."""

    seed: int
    shape: tuple[int, ...]

    def __post_init__(self):
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        object.__setattr__(self, "seed", seed)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))


@dataclass(frozen=True)
class InversionConfig:
    """Knobs for one inversion run.

    Defaults follow the reference recipe: 1000 refinement epochs, 5
    denoising steps, 16-token initial prompts, beam width 4.
    """

    max_epoch: int = 1000
    learning_rate: float = 0.05
    denoise_steps: int = 5
    init_prompt_len: int = 16
    noise_seed: int = 0
    loss_kind: str = "pixel_sse"
    beam_width: int = 4
    correction_steps: int = 4

    def __post_init__(self):
        if self.max_epoch < 0:
            raise ValueError("max_epoch must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.denoise_steps < 1:
            raise ValueError("denoise_steps must be >= 1")
        if self.init_prompt_len < 1:
            raise ValueError("init_prompt_len must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.correction_steps < 0:
            raise ValueError("correction_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "InversionConfig":
        return cls(**data)


@dataclass(frozen=True)
class InversionResult:
    """Everything one inversion run produced."""

    prompt: Prompt
    embedding: LatentTextEmbedding
    loss_trace: tuple[float, ...]
    wall_time_s: float
    config: InversionConfig
    metrics: dict | None = None

    def __post_init__(self):
        trace = tuple(float(x) for x in self.loss_trace)
        object.__setattr__(self, "loss_trace", trace)
        if len(trace) != self.config.max_epoch + 1:
            raise ValueError(
                f"loss trace has {len(trace)} entries, expected "
                f"max_epoch + 1 = {self.config.max_epoch + 1}"
            )


# ---------------------------------------------------------------------------
# EMB1 binary format
#
# Layout: magic "EMB1", little-endian u32 seq_len, u32 embed_dim, then
# seq_len * embed_dim little-endian float32 values in row-major order.
# The fixed 32-bit payload makes fixture files portable across languages.
# ---------------------------------------------------------------------------


def write_embedding(embedding: LatentTextEmbedding, path: str | Path) -> None:
    """Write an embedding to ``path`` in the EMB1 layout."""
    vals = embedding.values
    if not np.all(np.isfinite(vals)):
        raise ValueError("refusing to serialize non-finite embedding")
    payload = np.ascontiguousarray(vals, dtype="<f4").tobytes()
    header = EMB1_MAGIC + struct.pack("<II", vals.shape[0], vals.shape[1])
    Path(path).write_bytes(header + payload)


def read_embedding(path: str | Path) -> LatentTextEmbedding:
    """Read an EMB1 file back into a :class:`LatentTextEmbedding`."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != EMB1_MAGIC:
        raise EmbeddingFormatError(f"{path}: not an EMB1 file")
    seq_len, embed_dim = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * seq_len * embed_dim
    if len(raw) != expected:
        raise EmbeddingFormatError(
            f"{path}: expected {expected} bytes for {seq_len}x{embed_dim}, "
            f"got {len(raw)}"
        )
    vals = np.frombuffer(raw, dtype="<f4", offset=12).reshape(seq_len, embed_dim)
    return LatentTextEmbedding(vals.astype(np.float64))


# ---------------------------------------------------------------------------
# Results JSONL
# ---------------------------------------------------------------------------


def result_to_dict(result: InversionResult) -> dict:
    return {
        "prompt": {"text": result.prompt.text, "token_ids": list(result.prompt.token_ids)},
        "loss_trace": list(result.loss_trace),
        "wall_time_s": result.wall_time_s,
        "config": result.config.to_dict(),
        "metrics": result.metrics,
    }


def append_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
