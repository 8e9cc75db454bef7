"""Embedding-to-text inversion.

Two small conditional sequence models map a post-encoder text embedding back
to a prompt. The zero-step model decodes an initial hypothesis directly from
the target embedding; the corrector refines a hypothesis while additionally
conditioned on that hypothesis and its re-embedding. Inference runs beam
search over corrected hypotheses and keeps whichever candidate re-embeds
closest to the target.

Both models are tiny one-hidden-layer networks over frozen token features,
trained with Adam on a templated synthetic corpus; that keeps the whole
training loop deterministic and fast enough for the test suite.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import COLORS, OBJECTS, PAD_ID, PLACES, RELATIONS, DiffusionBackend
from .core import LatentTextEmbedding, Prompt

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 32
HIDDEN_UNITS = 128


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe shared by the zero-step and corrector models."""

    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs_zero: int = 60
    epochs_corrector: int = 35
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs_zero < 1 or self.epochs_corrector < 1:
            raise ValueError("batch size and epoch counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs_zero": self.epochs_zero,
            "epochs_corrector": self.epochs_corrector,
            "seed": self.seed,
        }


def conditioning_vector(
    target: LatentTextEmbedding, hypothesis: LatentTextEmbedding | None
) -> np.ndarray:
    """Concatenate pooled target, pooled hypothesis and their difference."""
    u = target.values.mean(axis=0)
    v = hypothesis.values.mean(axis=0) if hypothesis is not None else np.zeros_like(u)
    return np.concatenate([u, v, u - v])


class SequenceModel:
    """Autoregressive next-token model conditioned on an embedding summary.

    Per-step features: the conditioning vector, the frozen embedding of the
    previous token, the frozen embedding of the aligned hypothesis token
    (pad when there is no hypothesis) and a one-hot position code. A single
    tanh hidden layer feeds a softmax over the vocabulary.
    """

    def __init__(
        self,
        token_features: np.ndarray,
        max_len: int = DEFAULT_MAX_LEN,
        hidden: int = HIDDEN_UNITS,
        seed: int = 0,
    ):
        feats = np.array(token_features, dtype=np.float64, copy=True)
        if feats.ndim != 2:
            raise ValueError("token feature table must be 2-D")
        feats.flags.writeable = False
        self.token_features = feats
        self.vocab_size, self.embed_dim = feats.shape
        self.max_len = int(max_len)
        d = self.embed_dim
        self.feature_dim = 3 * d + 2 * d + self.max_len
        rng = np.random.Generator(np.random.PCG64(seed))
        self.w1 = rng.standard_normal((hidden, self.feature_dim)) / math.sqrt(self.feature_dim)
        self.b1 = np.zeros(hidden)
        self.w2 = rng.standard_normal((self.vocab_size, hidden)) / math.sqrt(hidden)
        self.b2 = np.zeros(self.vocab_size)
        self.training_report: dict = {"epoch_losses": [], "warnings": []}

    # -- forward -------------------------------------------------------------

    def _features(self, cond: np.ndarray, prev_ids, hyp_ids, positions) -> np.ndarray:
        n = len(prev_ids)
        pos_onehot = np.zeros((n, self.max_len))
        pos_onehot[np.arange(n), positions] = 1.0
        conds = np.broadcast_to(cond, (n, cond.shape[-1])) if cond.ndim == 1 else cond
        return np.concatenate(
            [conds, self.token_features[prev_ids], self.token_features[hyp_ids], pos_onehot],
            axis=1,
        )

    def _logits(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.tanh(x @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2, h

    @staticmethod
    def _log_softmax(logits: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def step_distribution(
        self, cond: np.ndarray, prev_id: int, hyp_id: int, position: int
    ) -> np.ndarray:
        """Probability of the next token at ``position``; sums to one."""
        x = self._features(cond, [prev_id], [hyp_id], [position])
        logits, _ = self._logits(x)
        return np.exp(self._log_softmax(logits))[0]

    def _step_log_probs(self, cond, prev_ids, hyp_ids, positions) -> np.ndarray:
        logits, _ = self._logits(self._features(cond, prev_ids, hyp_ids, positions))
        return self._log_softmax(logits)

    # -- decoding ------------------------------------------------------------

    def _aligned_hyp(self, hypothesis: Sequence[int] | None, position: int) -> int:
        if hypothesis is None or position >= len(hypothesis):
            return PAD_ID
        return int(hypothesis[position])

    def greedy_decode(
        self, cond: np.ndarray, hypothesis: Sequence[int] | None = None
    ) -> tuple[int, ...]:
        ids: list[int] = []
        prev = PAD_ID
        for pos in range(self.max_len):
            hyp = self._aligned_hyp(hypothesis, pos)
            log_probs = self._step_log_probs(cond, [prev], [hyp], [pos])[0]
            token = int(np.argmax(log_probs))
            if token == PAD_ID:
                break
            ids.append(token)
            prev = token
        return tuple(ids)

    def beam_decode(
        self, cond: np.ndarray, hypothesis: Sequence[int] | None, width: int
    ) -> list[tuple[tuple[int, ...], float]]:
        """Top ``width`` sequences by cumulative log probability."""
        if width < 1:
            raise ValueError("beam width must be >= 1")
        live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
        done: list[tuple[tuple[int, ...], float]] = []
        for pos in range(self.max_len):
            if not live:
                break
            prev_ids = [seq[-1] if seq else PAD_ID for seq, _ in live]
            hyp_ids = [self._aligned_hyp(hypothesis, pos) for _ in live]
            log_probs = self._step_log_probs(cond, prev_ids, hyp_ids, [pos] * len(live))
            expanded: list[tuple[tuple[int, ...], float]] = []
            for (seq, score), row in zip(live, log_probs):
                top = np.argsort(row)[::-1][:width]
                for token in top:
                    expanded.append((seq + (int(token),), score + float(row[token])))
            expanded.sort(key=lambda item: (-item[1], item[0]))
            live = []
            for seq, score in expanded[: width * 2]:
                if seq[-1] == PAD_ID:
                    done.append((seq[:-1], score))
                elif len(live) < width:
                    live.append((seq, score))
        done.extend(live)
        done.sort(key=lambda item: (-item[1], item[0]))
        # Drop duplicate token sequences, keeping the best-scored one.
        seen: set[tuple[int, ...]] = set()
        unique = []
        for seq, score in done:
            if seq not in seen:
                seen.add(seq)
                unique.append((seq, score))
        return unique[:width]

    def sequence_log_likelihood(
        self,
        cond: np.ndarray,
        target_ids: Sequence[int],
        hypothesis: Sequence[int] | None = None,
    ) -> float:
        """Log probability of ``target_ids`` followed by the stop token."""
        targets = [int(t) for t in target_ids] + [PAD_ID]
        prev = PAD_ID
        total = 0.0
        for pos, token in enumerate(targets):
            hyp = self._aligned_hyp(hypothesis, pos)
            log_probs = self._step_log_probs(cond, [prev], [hyp], [pos])[0]
            total += float(log_probs[token])
            prev = token
        return total

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.w1 = np.array(arrays["w1"], dtype=np.float64)
        self.b1 = np.array(arrays["b1"], dtype=np.float64)
        self.w2 = np.array(arrays["w2"], dtype=np.float64)
        self.b2 = np.array(arrays["b2"], dtype=np.float64)


@dataclass
class E2TBundle:
    """Trained zero-step and corrector models plus the re-embedding encoder."""

    zero_step: SequenceModel
    corrector: SequenceModel
    encoder_ref: DiffusionBackend

    def embed_ids(self, token_ids: Sequence[int]) -> LatentTextEmbedding:
        prompt = self.encoder_ref.tokenizer.prompt_from_ids(token_ids)
        return self.encoder_ref.encode_text(prompt)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + eps)


def _build_samples(
    model: SequenceModel,
    items: list[tuple[np.ndarray, Sequence[int], Sequence[int] | None]],
) -> tuple[np.ndarray, np.ndarray]:
    """Flatten (cond, target_ids, hypothesis) items into per-step samples."""
    feats, labels = [], []
    for cond, target_ids, hypothesis in items:
        targets = [int(t) for t in target_ids] + [PAD_ID]
        if len(targets) > model.max_len:
            raise ValueError(f"target of {len(targets) - 1} tokens exceeds max_len {model.max_len}")
        prev = PAD_ID
        prev_ids, hyp_ids, positions = [], [], []
        for pos, token in enumerate(targets):
            prev_ids.append(prev)
            hyp_ids.append(model._aligned_hyp(hypothesis, pos))
            positions.append(pos)
            labels.append(token)
            prev = token
        feats.append(
            model._features(np.tile(cond, (len(positions), 1)), prev_ids, hyp_ids, positions)
        )
    return np.concatenate(feats, axis=0), np.asarray(labels)


def _train_model(
    model: SequenceModel,
    items: list[tuple[np.ndarray, Sequence[int], Sequence[int] | None]],
    epochs: int,
    cfg: TrainConfig,
    shuffle_seed: int,
) -> SequenceModel:
    features, labels = _build_samples(model, items)
    n = features.shape[0]
    params = [model.w1, model.b1, model.w2, model.b2]
    opt = _Adam(params, cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = features[idx], labels[idx]
            h = np.tanh(x @ model.w1.T + model.b1)
            logits = h @ model.w2.T + model.b2
            log_probs = SequenceModel._log_softmax(logits)
            total += -float(log_probs[np.arange(len(y)), y].sum())
            # Backward pass for softmax cross-entropy through the tanh layer.
            probs = np.exp(log_probs)
            probs[np.arange(len(y)), y] -= 1.0
            probs /= len(y)
            grad_w2 = probs.T @ h
            grad_b2 = probs.sum(axis=0)
            dh = (probs @ model.w2) * (1.0 - h * h)
            grad_w1 = dh.T @ x
            grad_b1 = dh.sum(axis=0)
            opt.step(params, [grad_w1, grad_b1, grad_w2, grad_b2])
        epoch_losses.append(total / n)
    model.training_report["epoch_losses"] = epoch_losses
    if len(epoch_losses) > 1 and epoch_losses[-1] >= epoch_losses[0]:
        message = "training loss did not decrease over the run"
        model.training_report["warnings"].append(message)
        logger.warning(message)
    return model


def train_zero_step(
    corpus: list[tuple[Prompt, LatentTextEmbedding]],
    cfg: TrainConfig,
    token_features: np.ndarray,
    max_len: int = DEFAULT_MAX_LEN,
) -> SequenceModel:
    """Fit the direct embedding-to-text model by maximum likelihood."""
    if not corpus:
        raise ValueError("training corpus is empty")
    model = SequenceModel(token_features, max_len=max_len, seed=cfg.seed)
    items = [
        (conditioning_vector(emb, None), prompt.token_ids, None) for prompt, emb in corpus
    ]
    return _train_model(model, items, cfg.epochs_zero, cfg, shuffle_seed=cfg.seed + 17)


def zero_step_generate(model: SequenceModel, c: LatentTextEmbedding) -> tuple[int, ...]:
    """Greedy initial hypothesis for a target embedding."""
    cond = conditioning_vector(c, None)
    if cond.shape[0] != 3 * model.embed_dim:
        raise ValueError(
            f"embedding dim {c.embed_dim} does not match model dim {model.embed_dim}"
        )
    return model.greedy_decode(cond)


def train_corrector(
    corpus: list[tuple[Prompt, LatentTextEmbedding]],
    zero_model: SequenceModel,
    encoder: DiffusionBackend,
    cfg: TrainConfig,
) -> SequenceModel:
    """Fit the refinement model on zero-step hypotheses.

    Each training triple pairs the target embedding with the zero-step
    hypothesis for it and that hypothesis's re-embedding; the model learns
    to emit the true prompt from all three.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    model = SequenceModel(
        zero_model.token_features, max_len=zero_model.max_len, seed=cfg.seed + 1
    )
    items = []
    for prompt, emb in corpus:
        hyp_ids = zero_step_generate(zero_model, emb)
        hyp_emb = encoder.encode_text(encoder.tokenizer.prompt_from_ids(hyp_ids))
        items.append((conditioning_vector(emb, hyp_emb), prompt.token_ids, hyp_ids))
    return _train_model(model, items, cfg.epochs_corrector, cfg, shuffle_seed=cfg.seed + 31)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _distance(bundle: E2TBundle, ids: Sequence[int], c: LatentTextEmbedding) -> float:
    emb = bundle.embed_ids(ids)
    return float(np.linalg.norm(emb.values - c.values))


def invert_embedding_traced(
    bundle: E2TBundle, c: LatentTextEmbedding, beam_width: int, steps: int
) -> tuple[Prompt, list[float]]:
    """Like :func:`invert_embedding` but also returns the best-distance trace.

    The trace records the incumbent best distance after the zero step and
    after each correction step; carrying the incumbent over into every beam
    makes the sequence non-increasing by construction.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    hypothesis = zero_step_generate(bundle.zero_step, c)
    best_ids, best_dist = hypothesis, _distance(bundle, hypothesis, c)
    beam = [hypothesis]
    trace = [best_dist]
    for _ in range(steps):
        pool: dict[tuple[int, ...], float] = {best_ids: best_dist}
        for hyp_ids in beam:
            hyp_emb = bundle.embed_ids(hyp_ids)
            cond = conditioning_vector(c, hyp_emb)
            for cand, _score in bundle.corrector.beam_decode(cond, hyp_ids, beam_width):
                if cand not in pool:
                    pool[cand] = _distance(bundle, cand, c)
        ranked = sorted(pool.items(), key=lambda item: (item[1], item[0]))
        beam = [ids for ids, _ in ranked[:beam_width]]
        if ranked[0][1] < best_dist:
            best_ids, best_dist = ranked[0]
        trace.append(best_dist)
    return bundle.encoder_ref.tokenizer.prompt_from_ids(best_ids), trace


def invert_embedding(
    bundle: E2TBundle, c: LatentTextEmbedding, beam_width: int = 4, steps: int = 4
) -> Prompt:
    """Decode an embedding to text: zero step, then corrected beam search."""
    prompt, _ = invert_embedding_traced(bundle, c, beam_width, steps)
    return prompt


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_TEMPLATE_SLOTS = (COLORS, OBJECTS, RELATIONS, PLACES)


def template_prompt_texts() -> list[str]:
    """Every "a {color} {object} {relation} a {place}" combination."""
    texts = []
    for color in COLORS:
        for obj in OBJECTS:
            for rel in RELATIONS:
                for place in PLACES:
                    texts.append(f"a {color} {obj} {rel} a {place}")
    return texts


def sample_template_prompts(
    tokenizer, n_train: int = 500, n_heldout: int = 50, seed: int = 2024
) -> tuple[list[Prompt], list[Prompt]]:
    """Disjoint train and held-out prompts drawn from the template space."""
    texts = template_prompt_texts()
    if n_train + n_heldout > len(texts):
        raise ValueError("template space too small for the requested split")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(texts))
    train = [tokenizer.prompt(texts[i]) for i in order[:n_train]]
    held = [tokenizer.prompt(texts[i]) for i in order[n_train : n_train + n_heldout]]
    return train, held


def embed_prompts(
    backend: DiffusionBackend, prompts: Sequence[Prompt]
) -> list[tuple[Prompt, LatentTextEmbedding]]:
    return [(p, backend.encode_text(p)) for p in prompts]


def corpus_digest(prompts: Sequence[Prompt]) -> str:
    joined = "\n".join(p.text for p in prompts)
    return hashlib.sha256(joined.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_bundle(
    bundle: E2TBundle,
    out_dir: str | Path,
    train_cfg: TrainConfig,
    corpus_hash: str,
    created_at: str,
) -> None:
    """Write a checkpoint directory: params blob plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {f"zero_{k}": v for k, v in bundle.zero_step.state_arrays().items()}
    arrays.update({f"corr_{k}": v for k, v in bundle.corrector.state_arrays().items()})
    arrays["token_features"] = bundle.zero_step.token_features
    np.savez(out / "params.npz", **arrays)
    manifest = {
        "vocab": list(bundle.encoder_ref.tokenizer.words),
        "dims": {
            "vocab_size": bundle.zero_step.vocab_size,
            "embed_dim": bundle.zero_step.embed_dim,
            "hidden": bundle.zero_step.w1.shape[0],
        },
        "max_len": bundle.zero_step.max_len,
        "training_config": train_cfg.to_dict(),
        "corpus_hash": corpus_hash,
        "created_at": created_at,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_bundle(checkpoint_dir: str | Path, backend: DiffusionBackend) -> E2TBundle:
    """Load a checkpoint and bind it to ``backend`` for re-embedding."""
    cp = Path(checkpoint_dir)
    manifest = json.loads((cp / "manifest.json").read_text())
    if tuple(manifest["vocab"]) != backend.tokenizer.words:
        raise ValueError("checkpoint vocabulary does not match the backend tokenizer")
    with np.load(cp / "params.npz") as blob:
        feats = blob["token_features"]
        zero = SequenceModel(feats, max_len=manifest["max_len"], hidden=manifest["dims"]["hidden"])
        zero.load_state({k: blob[f"zero_{k}"] for k in ("w1", "b1", "w2", "b2")})
        corr = SequenceModel(feats, max_len=manifest["max_len"], hidden=manifest["dims"]["hidden"])
        corr.load_state({k: blob[f"corr_{k}"] for k in ("w1", "b1", "w2", "b2")})
    if zero.embed_dim != backend.embed_dim:
        raise ValueError("checkpoint embedding dim does not match the backend")
    return E2TBundle(zero_step=zero, corrector=corr, encoder_ref=backend)
