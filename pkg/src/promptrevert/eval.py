"""Metrics: image similarity, token alignment, prompt perplexity.

Desk-scale analogues of the usual scorers. Image similarity is cosine in a
fixed embedding space (default: the toy backend's image encoder), token
alignment is greedy soft matching over token embeddings, and perplexity
comes from a smoothed bigram model fitted on the synthetic corpus. Each has
a plug-in slot for a heavyweight replacement.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .backend import DiffusionBackend, PAD_ID
from .core import ImageTensor, InversionResult, NoiseSpec, Prompt


@dataclass(frozen=True)
class MetricsReport:
    """One evaluated inversion: image, text and fluency scores."""

    image_cosine: float
    text_precision: float
    text_recall: float
    text_f1: float
    perplexity: float
    perceptual_distance: float | None = None

    def __post_init__(self):
        if not -1.0 <= self.image_cosine <= 1.0 + 1e-12:
            raise ValueError("image cosine must lie in [-1, 1]")
        for name in ("text_precision", "text_recall", "text_f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.text_precision > 0 and self.text_recall > 0:
            harmonic = (
                2 * self.text_precision * self.text_recall
                / (self.text_precision + self.text_recall)
            )
            if abs(self.text_f1 - harmonic) > 1e-9:
                raise ValueError("f1 is not the harmonic mean of precision and recall")

    def to_dict(self) -> dict:
        return {
            "image_cosine": self.image_cosine,
            "perceptual_distance": self.perceptual_distance,
            "text_precision": self.text_precision,
            "text_recall": self.text_recall,
            "text_f1": self.text_f1,
            "perplexity": self.perplexity,
        }


class LanguageModelScorer(Protocol):
    """Next-token distributions over a fixed vocabulary."""

    vocab_size: int

    def next_distribution(self, context_id: int) -> np.ndarray: ...


class UniformScorer:
    """Assigns every token probability 1/V; perplexity is exactly V."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def next_distribution(self, context_id: int) -> np.ndarray:
        return np.full(self.vocab_size, 1.0 / self.vocab_size)


class BigramScorer:
    """Laplace-smoothed bigram model fitted on token id sequences.

    Context id 0 (pad) doubles as the start-of-sequence marker.
    """

    def __init__(self, vocab_size: int, smoothing: float = 1.0):
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.vocab_size = vocab_size
        self.smoothing = smoothing
        self._counts = np.zeros((vocab_size, vocab_size))

    @classmethod
    def fit(
        cls, sequences: Sequence[Sequence[int]], vocab_size: int, smoothing: float = 1.0
    ) -> "BigramScorer":
        scorer = cls(vocab_size, smoothing)
        for seq in sequences:
            prev = PAD_ID
            for token in seq:
                scorer._counts[prev, int(token)] += 1
                prev = int(token)
        return scorer

    def next_distribution(self, context_id: int) -> np.ndarray:
        row = self._counts[int(context_id)] + self.smoothing
        return row / row.sum()


def image_similarity(
    a: ImageTensor,
    b: ImageTensor,
    embedder: Callable[[ImageTensor], np.ndarray],
) -> float:
    """Cosine similarity of the two embedded images; 0 if either has zero norm."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    ea = np.asarray(embedder(a), dtype=np.float64).reshape(-1)
    eb = np.asarray(embedder(b), dtype=np.float64).reshape(-1)
    na = float(ea @ ea)
    nb = float(eb @ eb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((ea @ eb) / np.sqrt(na * nb))


def backend_image_embedder(backend) -> Callable[[ImageTensor], np.ndarray]:
    """Default desk embedder: the backend's image encoder, flattened."""
    return lambda image: backend.encode_image(image).values.reshape(-1)


def _content_ids(prompt: Prompt) -> list[int]:
    return [i for i in prompt.token_ids if i != PAD_ID]


def text_alignment(
    pred: Prompt, ref: Prompt, token_embeddings: np.ndarray
) -> tuple[float, float, float]:
    """Greedy soft token matching in an embedding space.

    Precision is the mean, over predicted tokens, of the best cosine match
    against any reference token; recall is symmetric; f1 is their harmonic
    mean (zero when both vanish).
    """
    pred_ids = _content_ids(pred)
    ref_ids = _content_ids(ref)
    if not pred_ids or not ref_ids:
        raise ValueError("text alignment requires non-empty prompts")
    table = np.asarray(token_embeddings, dtype=np.float64)
    pe = table[pred_ids]
    re = table[ref_ids]
    pe = pe / np.maximum(np.linalg.norm(pe, axis=1, keepdims=True), 1e-12)
    re = re / np.maximum(np.linalg.norm(re, axis=1, keepdims=True), 1e-12)
    sim = pe @ re.T
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def token_f1(pred: Prompt, ref: Prompt) -> tuple[float, float, float]:
    """Exact-match multiset token precision/recall/F1, pads ignored."""
    pred_ids = _content_ids(pred)
    ref_ids = _content_ids(ref)
    if not pred_ids or not ref_ids:
        return 0.0, 0.0, 0.0
    overlap = sum((Counter(pred_ids) & Counter(ref_ids)).values())
    precision = overlap / len(pred_ids)
    recall = overlap / len(ref_ids)
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def perplexity(prompt: Prompt, lm: LanguageModelScorer) -> float:
    """Exponentiated mean negative log-likelihood under the scorer."""
    ids = _content_ids(prompt)
    if not ids:
        raise ValueError("cannot score an empty prompt")
    for token in ids:
        if not 0 <= token < lm.vocab_size:
            raise ValueError(f"token id {token} outside scorer vocabulary")
    nll = 0.0
    prev = PAD_ID
    for token in ids:
        dist = lm.next_distribution(prev)
        nll -= math.log(float(dist[token]))
        prev = token
    return math.exp(nll / len(ids))


def evaluate_run(
    result: InversionResult,
    target: ImageTensor,
    ref: Prompt,
    backend: DiffusionBackend,
    lm: LanguageModelScorer,
    image_embedder: Callable[[ImageTensor], np.ndarray] | None = None,
    token_embeddings: np.ndarray | None = None,
    perceptual: Callable[[ImageTensor, ImageTensor], float] | None = None,
) -> MetricsReport:
    """Regenerate the image from the inverted prompt and score everything.

    The perceptual slot stays empty (reported as absent) unless a scorer is
    plugged in.
    """
    embedder = image_embedder or backend_image_embedder(backend)
    table = token_embeddings if token_embeddings is not None else backend.embedding_matrix

    def run(stage: str, fn):
        try:
            return fn()
        except Exception as exc:
            raise RuntimeError(f"evaluation stage {stage!r} failed: {exc}") from exc

    cfg = result.config
    noise = NoiseSpec(cfg.noise_seed, backend.latent_shape)
    regenerated = run(
        "regenerate",
        lambda: backend.generate(
            backend.encode_text(result.prompt), noise, cfg.denoise_steps
        ),
    )
    cosine = run("image_similarity", lambda: image_similarity(regenerated, target, embedder))
    precision, recall, f1 = run("text_alignment", lambda: text_alignment(result.prompt, ref, table))
    ppl = run("perplexity", lambda: perplexity(result.prompt, lm))
    distance = run("perceptual", lambda: perceptual(regenerated, target)) if perceptual else None
    return MetricsReport(
        image_cosine=cosine,
        text_precision=precision,
        text_recall=recall,
        text_f1=f1,
        perplexity=ppl,
        perceptual_distance=distance,
    )


def summarize(reports: Sequence[MetricsReport]) -> dict:
    """Mean and standard deviation per metric over a batch of reports."""
    if not reports:
        raise ValueError("nothing to summarize")
    summary: dict = {}
    for key in ("image_cosine", "text_precision", "text_recall", "text_f1", "perplexity"):
        values = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        summary[key] = {"mean": float(values.mean()), "std": float(values.std())}
    perceptual = [r.perceptual_distance for r in reports if r.perceptual_distance is not None]
    if perceptual:
        arr = np.array(perceptual)
        summary["perceptual_distance"] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return summary
