"""Embedding refinement and the discrete hard-prompt baseline.

The continuous path runs plain gradient descent on the post-encoder
embedding. The discrete baseline keeps one free vector per token position
in the pre-encoder space, snapping each to its nearest vocabulary embedding
before every loss evaluation (delayed projection); it exists as the point of
comparison for fluency and efficiency.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import DiffusionBackend
from .captioner import CaptionProvider
from .core import (
    ImageTensor,
    InversionConfig,
    InversionResult,
    LatentTextEmbedding,
    NoiseSpec,
    Prompt,
)
from . import e2t as _e2t


class OptimizationError(RuntimeError):
    """Refinement hit a non-finite loss or gradient."""


class PipelineStageError(RuntimeError):
    """A pipeline component failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class OptTrace:
    """Loss and gradient-norm history of one refinement run."""

    losses: list[float]
    epochs: int
    grad_norms: list[float]

    def __post_init__(self):
        if not self.losses:
            raise ValueError("trace must contain at least the initial loss")


class ScanCounter:
    """Counts nearest-neighbor scans over a vocabulary table."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


#: Global tally of vocabulary-table scans, used to show that the continuous
#: path never touches the vocabulary during its update loop.
GLOBAL_SCANS = ScanCounter()


class VocabEmbeddingTable:
    """Pre-encoder token embedding table with scan instrumentation."""

    def __init__(self, matrix: np.ndarray):
        mat = np.array(matrix, dtype=np.float64, copy=True)
        if mat.ndim != 2 or mat.shape[0] == 0:
            raise ValueError("vocabulary table must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(mat)):
            raise ValueError("vocabulary table contains non-finite rows")
        mat.flags.writeable = False
        self.matrix = mat
        self.scans = ScanCounter()

    @property
    def vocab_size(self) -> int:
        return int(self.matrix.shape[0])


def project_to_vocab(vector: np.ndarray, table: VocabEmbeddingTable) -> int:
    """Nearest table row by squared Euclidean distance; ties pick the lowest id."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (table.matrix.shape[1],):
        raise ValueError(
            f"query dim {vector.shape} does not match table dim {table.matrix.shape[1]}"
        )
    table.scans.count += 1
    GLOBAL_SCANS.count += 1
    dists = ((table.matrix - vector) ** 2).sum(axis=1)
    return int(np.argmin(dists))


def refine_embedding(
    backend: DiffusionBackend,
    c0: LatentTextEmbedding,
    noise: NoiseSpec,
    target: ImageTensor,
    cfg: InversionConfig,
    trace_path: str | Path | None = None,
) -> tuple[LatentTextEmbedding, OptTrace]:
    """Run ``cfg.max_epoch`` plain gradient-descent steps on the embedding.

    The noise is fixed for the whole run and the backend parameters are
    never touched. Returns the final embedding together with the full loss
    trace (initial loss included, so ``max_epoch + 1`` entries).
    """
    current = c0.values.copy()
    losses = [backend.reconstruction_loss(c0, noise, target, cfg.loss_kind)]
    if not np.isfinite(losses[0]):
        raise OptimizationError("non-finite loss at epoch 0")
    grad_norms: list[float] = []
    trace_file = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        for epoch in range(cfg.max_epoch):
            emb = LatentTextEmbedding(current)
            grad = backend.loss_gradient(emb, noise, target, cfg.loss_kind)
            if not np.all(np.isfinite(grad)):
                raise OptimizationError(f"non-finite gradient at epoch {epoch}")
            current = current - cfg.learning_rate * grad
            loss = backend.reconstruction_loss(
                LatentTextEmbedding(current), noise, target, cfg.loss_kind
            )
            if not np.isfinite(loss):
                raise OptimizationError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            grad_norms.append(float(np.linalg.norm(grad)))
            if trace_file:
                record = {"epoch": epoch, "loss": loss, "grad_norm": grad_norms[-1]}
                trace_file.write(json.dumps(record) + "\n")
    finally:
        if trace_file:
            trace_file.close()
    return LatentTextEmbedding(current), OptTrace(losses, cfg.max_epoch, grad_norms)


def random_embedding_like(
    references: Sequence[LatentTextEmbedding], seed: int
) -> LatentTextEmbedding:
    """Standard-normal embedding scaled to the references' empirical std.

    Used by the initialization ablation so random starts are magnitude
    comparable with encoded captions.
    """
    if not references:
        raise ValueError("need at least one reference embedding")
    stacked = np.stack([r.values for r in references])
    scale = float(stacked.std())
    rng = np.random.Generator(np.random.PCG64(seed))
    return LatentTextEmbedding(rng.standard_normal(references[0].values.shape) * scale)


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc


def invert(
    backend: DiffusionBackend,
    captioner: CaptionProvider,
    bundle: _e2t.E2TBundle,
    target: ImageTensor,
    cfg: InversionConfig,
    trace_path: str | Path | None = None,
) -> InversionResult:
    """Full inversion: caption, encode, refine, decode back to text."""
    start = time.perf_counter()
    with _stage("caption"):
        initial_prompt = captioner.caption(target)
    with _stage("encode"):
        c0 = backend.encode_text(initial_prompt)
    noise = NoiseSpec(cfg.noise_seed, backend.latent_shape)
    with _stage("refine"):
        refined, trace = refine_embedding(backend, c0, noise, target, cfg, trace_path)
    with _stage("embedding_to_text"):
        prompt = _e2t.invert_embedding(bundle, refined, cfg.beam_width, cfg.correction_steps)
    return InversionResult(
        prompt=prompt,
        embedding=refined,
        loss_trace=tuple(trace.losses),
        wall_time_s=time.perf_counter() - start,
        config=cfg,
    )


def discrete_invert(
    backend: DiffusionBackend,
    target: ImageTensor,
    cfg: InversionConfig,
    init_prompt: Prompt | None = None,
    table: VocabEmbeddingTable | None = None,
) -> Prompt:
    """Hard-prompt baseline with delayed projection.

    Keeps one free vector per position in the pre-encoder embedding space.
    Each epoch snaps every vector to its nearest vocabulary embedding,
    evaluates the loss gradient at the projected prompt, pulls it back
    through the encoder and updates the free vectors. Returns the final
    projected token sequence, so the output always consists of valid
    vocabulary ids.
    """
    if table is None:
        table = VocabEmbeddingTable(backend.embedding_matrix)
    seq_len = backend.seq_len
    noise = NoiseSpec(cfg.noise_seed, backend.latent_shape)

    if init_prompt is not None:
        ids = list(init_prompt.token_ids)
        ids = (ids + [0] * seq_len)[:seq_len]
        free = backend.embedding_matrix[ids].copy()
    else:
        rng = np.random.Generator(np.random.PCG64(cfg.noise_seed + 0x9E3779B9))
        rows = rng.integers(0, table.vocab_size, size=seq_len)
        free = table.matrix[rows].copy()

    for epoch in range(cfg.max_epoch):
        ids = [project_to_vocab(free[i], table) for i in range(seq_len)]
        projected = backend.tokenizer.prompt_from_ids(ids)
        c_proj = backend.encode_text(projected)
        grad_c = backend.loss_gradient(c_proj, noise, target, cfg.loss_kind)
        if not np.all(np.isfinite(grad_c)):
            raise OptimizationError(f"non-finite gradient at epoch {epoch}")
        free -= cfg.learning_rate * backend.encoder_vjp(grad_c)

    ids = [project_to_vocab(free[i], table) for i in range(seq_len)]
    return backend.tokenizer.prompt_from_ids(ids)
