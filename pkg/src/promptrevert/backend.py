"""Latent diffusion backend abstraction plus a fully analytic toy backend.

The toy backend is affine end to end: the text encoder is an embedding
lookup followed by prefix-mean mixing, the denoiser is an affine map of the
latent and the mean-pooled text embedding, and the image decoder/encoder is
an affine map with its least-squares pseudoinverse. Every gradient therefore
has a closed form, which lets the test suite check the optimizer against
finite differences without an autodiff framework.

Real-model adapters implement the same :class:`DiffusionBackend` surface
against pretrained weights; how they obtain loss gradients is up to them.
"""

from __future__ import annotations

import hashlib
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    LOSS_KINDS,
    ImageTensor,
    LatentImage,
    LatentTextEmbedding,
    NoiseSpec,
    Prompt,
)

PAD_TOKEN = "<pad>"
PAD_ID = 0

# Word lists for the built-in vocabulary. The first four feed the prompt
# template used by the synthetic corpus and the fixture suite; the extras
# cover the demo phrases used by the prompt-editing applications.
COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "black", "white")
OBJECTS = (
    "cat", "dog", "house", "tree", "car", "boat",
    "bird", "horse", "chair", "table", "flower", "clock",
)
RELATIONS = ("near", "above", "beside", "under", "behind", "inside")
PLACES = ("beach", "forest", "city", "mountain", "river", "garden", "field", "bridge")
EXTRA_WORDS = (
    "a", "and", "with", "on", "in", "of", "the",
    "trees", "egg", "broccoli", "plate", "fence", "woman", "dress", "snow",
)


class VocabularyError(ValueError):
    """A token or token id is not part of the backend vocabulary."""


class ShapeError(ValueError):
    """An input's dimensions do not match what the backend expects."""


def build_default_vocab(size: int) -> tuple[str, ...]:
    """Fixed word-level vocabulary of ``size`` entries, pad token first."""
    base = [PAD_TOKEN, *EXTRA_WORDS, *COLORS, *OBJECTS, *RELATIONS, *PLACES]
    if size < len(base):
        raise ValueError(f"vocab size {size} below minimum {len(base)}")
    filler = [f"tok{i}" for i in range(size - len(base))]
    return tuple(base + filler)


class WordTokenizer:
    """Whitespace word-level tokenizer over a fixed vocabulary.

    Id 0 is the pad token. Normalized text is lowercase and single-space
    separated; ``decode`` drops pad ids so text round-trips cleanly.
    """

    def __init__(self, words: Sequence[str]):
        if not words or words[0] != PAD_TOKEN:
            raise ValueError(f"vocabulary must start with the pad token {PAD_TOKEN!r}")
        self.words = tuple(words)
        self._index = {w: i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    @staticmethod
    def normalize(text: str) -> str:
        return " ".join(text.lower().split())

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in self.normalize(text).split():
            if word not in self._index:
                raise VocabularyError(f"word {word!r} not in vocabulary")
            ids.append(self._index[word])
        return ids

    def decode(self, token_ids: Sequence[int]) -> str:
        words = []
        for i in token_ids:
            i = int(i)
            if not 0 <= i < self.vocab_size:
                raise VocabularyError(f"token id {i} out of range for vocab size {self.vocab_size}")
            if i != PAD_ID:
                words.append(self.words[i])
        return " ".join(words)

    def prompt(self, text: str, length: int | None = None) -> Prompt:
        """Build a prompt, optionally truncated or padded to ``length`` ids."""
        ids = self.encode(text)
        if length is not None:
            ids = ids[:length] + [PAD_ID] * max(0, length - len(ids))
        return Prompt(text=self.decode(ids), token_ids=tuple(ids))

    def prompt_from_ids(self, token_ids: Sequence[int]) -> Prompt:
        return Prompt(text=self.decode(token_ids), token_ids=tuple(int(i) for i in token_ids))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step scaling factors, ordered from the first applied step to the last."""

    alphas: tuple[float, ...]

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas:
            raise ValueError("schedule must have at least one step")
        # Zero is allowed: an all-zero schedule makes denoising the identity,
        # which the test suite relies on as a degenerate case.
        if any(a < 0.0 or a > 1.0 for a in alphas):
            raise ValueError("schedule factors must lie in [0, 1]")
        object.__setattr__(self, "alphas", alphas)

    def __len__(self) -> int:
        return len(self.alphas)


def noise_from_spec(spec: NoiseSpec) -> LatentImage:
    """Deterministic standard-normal noise tensor; same spec, same bits."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    return LatentImage(rng.standard_normal(spec.shape))


class DiffusionBackend(ABC):
    """What the toolkit needs from a text-to-image diffusion model.

    Implementations bundle a tokenizer, text encoder, denoiser, image
    decoder/encoder and noise schedule. Backend parameters are fixed: no
    toolkit operation may mutate them, and ``params_digest`` exists so tests
    can verify that.
    """

    tokenizer: WordTokenizer
    schedule: NoiseSchedule

    @property
    @abstractmethod
    def seq_len(self) -> int: ...

    @property
    @abstractmethod
    def embed_dim(self) -> int: ...

    @property
    @abstractmethod
    def latent_shape(self) -> tuple[int, int, int]: ...

    @property
    @abstractmethod
    def pixel_shape(self) -> tuple[int, int, int]: ...

    @abstractmethod
    def encode_text(self, prompt: Prompt) -> LatentTextEmbedding: ...

    @abstractmethod
    def generate(self, c: LatentTextEmbedding, noise: NoiseSpec, steps: int) -> ImageTensor: ...

    @abstractmethod
    def reconstruction_loss(
        self, c: LatentTextEmbedding, noise: NoiseSpec, target: ImageTensor, kind: str
    ) -> float: ...

    @abstractmethod
    def loss_gradient(
        self, c: LatentTextEmbedding, noise: NoiseSpec, target: ImageTensor, kind: str
    ) -> np.ndarray: ...

    @abstractmethod
    def params_digest(self) -> str: ...

    @property
    def embedding_matrix(self) -> np.ndarray:
        """Pre-encoder token embedding table (V x d), read-only."""
        raise NotImplementedError(f"{type(self).__name__} does not expose an embedding table")

    def encoder_vjp(self, grad_c: np.ndarray) -> np.ndarray:
        """Pull a gradient at the encoder output back to the token-embedding rows."""
        raise NotImplementedError(f"{type(self).__name__} does not expose encoder gradients")


@dataclass(frozen=True)
class ToyBackendSpec:
    """Construction parameters for the analytic toy backend."""

    seed: int = 7
    vocab_size: int = 64
    embed_dim: int = 16
    seq_len: int = 16
    latent_shape: tuple[int, int, int] = (2, 4, 4)
    pixel_shape: tuple[int, int, int] = (3, 8, 8)
    denoise_steps: int = 5
    alpha: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(int(s) for s in self.latent_shape))
        object.__setattr__(self, "pixel_shape", tuple(int(s) for s in self.pixel_shape))
        dims = (self.vocab_size, self.embed_dim, self.seq_len, self.denoise_steps,
                *self.latent_shape, *self.pixel_shape)
        if any(d < 1 for d in dims):
            raise ValueError("all dimensions must be >= 1")
        if len(self.pixel_shape) != 3 or self.pixel_shape[0] != 3:
            raise ValueError("pixel shape must be (3, H, W)")
        if len(self.latent_shape) != 3:
            raise ValueError("latent shape must be (c, h, w)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        # Guard against accidental huge allocations (A is latent_size^2).
        if math.prod(self.latent_shape) > 4096 or math.prod(self.pixel_shape) > 1 << 20:
            raise ValueError("toy backend dimensions overflow the desk-scale budget")
        if self.vocab_size > 1 << 20:
            raise ValueError("vocab size overflows the desk-scale budget")


# Gains chosen so that decoded pixels stay well inside (0, 1) for typical
# latents (clean finite-difference checks) and so that plain gradient descent
# at the default learning rate is stable for both loss kinds.
_CONTROL_GAIN = 0.55
_DRIFT_GAIN = 0.05
_DECODE_GAIN = 0.16


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class ToyBackend(DiffusionBackend):
    """Affine stand-in for a latent diffusion model.

    Components, all derived deterministically from ``spec.seed``:

    * tokenizer: fixed word vocabulary of ``vocab_size`` entries, pad id 0;
    * text encoder: embedding lookup then prefix-mean mixing, so row i of
      the output is the mean of the embedded tokens 0..i;
    * denoiser: eps(z, t, c) = A z + B pool(c) + b_t with A symmetric and
      spectrally bounded so each update step I - alpha_t A is a contraction;
    * decoder: pixels = clamp(W z + 1/2); encoder: its least-squares
      pseudoinverse.
    """

    def __init__(self, spec: ToyBackendSpec):
        self.spec = spec
        self.tokenizer = WordTokenizer(build_default_vocab(spec.vocab_size))
        self.schedule = NoiseSchedule((spec.alpha,) * spec.denoise_steps)

        latent_size = math.prod(spec.latent_shape)
        pixel_size = math.prod(spec.pixel_shape)
        rng = np.random.Generator(np.random.PCG64(spec.seed))

        emb = rng.standard_normal((spec.vocab_size, spec.embed_dim)) / math.sqrt(spec.embed_dim)
        # Symmetric denoiser matrix with eigenvalues in [0.5, 2]: guarantees
        # the spectral norm of I - alpha * A stays below 1 for alpha <= 1.
        basis, _ = np.linalg.qr(rng.standard_normal((latent_size, latent_size)))
        eigs = rng.uniform(0.5, 2.0, latent_size)
        denoise_mat = (basis * eigs) @ basis.T
        control = rng.standard_normal((latent_size, spec.embed_dim)) * _CONTROL_GAIN
        drift = rng.standard_normal((spec.denoise_steps, latent_size)) * _DRIFT_GAIN
        decode = rng.standard_normal((pixel_size, latent_size)) * (
            _DECODE_GAIN / math.sqrt(latent_size)
        )

        self._emb = _frozen(emb)
        self._A = _frozen(denoise_mat)
        self._B = _frozen(control)
        self._b = _frozen(drift)
        self._W = _frozen(decode)
        self._W_pinv = _frozen(np.linalg.pinv(decode))
        self._latent_size = latent_size
        self._pixel_size = pixel_size

    # -- shape surface ------------------------------------------------------

    @property
    def seq_len(self) -> int:
        return self.spec.seq_len

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.spec.latent_shape

    @property
    def pixel_shape(self) -> tuple[int, int, int]:
        return self.spec.pixel_shape

    @property
    def embedding_matrix(self) -> np.ndarray:
        return self._emb

    # -- text encoding ------------------------------------------------------

    def encode_text(self, prompt: Prompt) -> LatentTextEmbedding:
        vocab = self.spec.vocab_size
        ids = list(prompt.token_ids)
        for i in ids:
            if not 0 <= i < vocab:
                raise VocabularyError(f"token id {i} out of range for vocab size {vocab}")
        # Fixed-window encoder: pad short prompts, truncate long ones.
        ids = (ids + [PAD_ID] * self.seq_len)[: self.seq_len]
        rows = self._emb[ids]
        mixed = np.cumsum(rows, axis=0) / np.arange(1, self.seq_len + 1)[:, None]
        return LatentTextEmbedding(mixed)

    def encoder_vjp(self, grad_c: np.ndarray) -> np.ndarray:
        grad_c = np.asarray(grad_c, dtype=np.float64)
        if grad_c.shape != (self.seq_len, self.embed_dim):
            raise ShapeError(f"gradient shape {grad_c.shape} does not match encoder output")
        scaled = grad_c / np.arange(1, self.seq_len + 1)[:, None]
        return np.cumsum(scaled[::-1], axis=0)[::-1]

    # -- generation ---------------------------------------------------------

    def _check_embedding(self, c: LatentTextEmbedding) -> None:
        if (c.seq_len, c.embed_dim) != (self.seq_len, self.embed_dim):
            raise ShapeError(
                f"embedding shape ({c.seq_len}, {c.embed_dim}) does not match "
                f"backend ({self.seq_len}, {self.embed_dim})"
            )

    def _check_noise(self, noise: NoiseSpec) -> None:
        if tuple(noise.shape) != self.latent_shape:
            raise ShapeError(f"noise shape {noise.shape} does not match latent {self.latent_shape}")

    def _final_latent(self, c: LatentTextEmbedding, noise: NoiseSpec) -> np.ndarray:
        z = noise_from_spec(noise).values.reshape(-1).copy()
        drive = self._B @ c.values.mean(axis=0)
        for k, alpha in enumerate(self.schedule.alphas):
            z -= alpha * (self._A @ z + drive + self._b[k])
        return z

    def _decode_flat(self, z: np.ndarray) -> np.ndarray:
        return self._W @ z + 0.5

    def generate(self, c: LatentTextEmbedding, noise: NoiseSpec, steps: int) -> ImageTensor:
        self._check_embedding(c)
        self._check_noise(noise)
        if steps != len(self.schedule):
            raise ShapeError(f"steps {steps} does not match schedule length {len(self.schedule)}")
        pre = self._decode_flat(self._final_latent(c, noise))
        return ImageTensor(np.clip(pre, 0.0, 1.0).reshape(self.pixel_shape))

    def decode_latent(self, z: LatentImage) -> ImageTensor:
        if tuple(z.shape) != self.latent_shape:
            raise ShapeError(f"latent shape {z.shape} does not match {self.latent_shape}")
        pre = self._decode_flat(z.values.reshape(-1))
        return ImageTensor(np.clip(pre, 0.0, 1.0).reshape(self.pixel_shape))

    def encode_image(self, image: ImageTensor) -> LatentImage:
        if tuple(image.shape) != self.pixel_shape:
            raise ShapeError(f"image shape {image.shape} does not match {self.pixel_shape}")
        z = self._W_pinv @ (image.pixels.reshape(-1) - 0.5)
        return LatentImage(z.reshape(self.latent_shape))

    # -- losses and gradients ------------------------------------------------

    def reconstruction_loss(
        self, c: LatentTextEmbedding, noise: NoiseSpec, target: ImageTensor, kind: str
    ) -> float:
        self._check_embedding(c)
        self._check_noise(noise)
        if tuple(target.shape) != self.pixel_shape:
            raise ShapeError(f"target shape {target.shape} does not match {self.pixel_shape}")
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {kind!r}")
        z0 = self._final_latent(c, noise)
        if kind == "pixel_sse":
            image = np.clip(self._decode_flat(z0), 0.0, 1.0)
            diff = image - target.pixels.reshape(-1)
        else:
            diff = z0 - self.encode_image(target).values.reshape(-1)
        return float(diff @ diff)

    def loss_gradient(
        self, c: LatentTextEmbedding, noise: NoiseSpec, target: ImageTensor, kind: str
    ) -> np.ndarray:
        self._check_embedding(c)
        self._check_noise(noise)
        if tuple(target.shape) != self.pixel_shape:
            raise ShapeError(f"target shape {target.shape} does not match {self.pixel_shape}")
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {kind!r}")

        z0 = self._final_latent(c, noise)
        if kind == "pixel_sse":
            pre = self._decode_flat(z0)
            image = np.clip(pre, 0.0, 1.0)
            # Clamp subgradient: identity strictly inside (0, 1), zero at
            # saturation.
            mask = (pre > 0.0) & (pre < 1.0)
            residual = 2.0 * (image - target.pixels.reshape(-1)) * mask
            lam = self._W.T @ residual
        else:
            lam = 2.0 * (z0 - self.encode_image(target).values.reshape(-1))

        # Adjoint walk back through the affine denoising chain. Jacobians do
        # not depend on the latent state, so no forward states are needed.
        grad_pool = np.zeros(self.embed_dim)
        for alpha in reversed(self.schedule.alphas):
            grad_pool -= alpha * (self._B.T @ lam)
            lam = lam - alpha * (self._A.T @ lam)
        # pool(c) is the row mean, so the gradient is the same for every row.
        return np.tile(grad_pool / self.seq_len, (self.seq_len, 1))

    # -- bookkeeping ----------------------------------------------------------

    def params_digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self._emb, self._A, self._B, self._b, self._W, self._W_pinv):
            h.update(arr.tobytes())
        h.update("\x00".join(self.tokenizer.words).encode())
        h.update(np.asarray(self.schedule.alphas).tobytes())
        return h.hexdigest()


def make_toy_backend(spec: ToyBackendSpec | None = None) -> ToyBackend:
    """Build the analytic toy backend from a spec (defaults if omitted)."""
    return ToyBackend(spec or ToyBackendSpec())
