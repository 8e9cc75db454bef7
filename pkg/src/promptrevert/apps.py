"""Downstream uses of interpretable inverted prompts.

Because the pipeline produces readable word sequences, prompts can be fused
across images, edited word by word, and chained through repeated inversion
to mix concepts from several source images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .backend import DiffusionBackend, WordTokenizer
from .captioner import CaptionProvider
from .core import ImageTensor, InversionConfig, NoiseSpec, Prompt
from .e2t import E2TBundle
from .optimizer import invert

FUSE_SEPARATOR = "and"


@dataclass(frozen=True)
class EditSpec:
    """Words to drop and word-for-word substitutions."""

    remove: tuple[str, ...] = ()
    replace: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        remove = tuple(w.lower() for w in self.remove)
        replace = {k.lower(): v.lower() for k, v in self.replace.items()}
        if set(remove) & set(replace):
            raise ValueError("a word cannot be both removed and replaced")
        object.__setattr__(self, "remove", remove)
        object.__setattr__(self, "replace", replace)

    @property
    def is_empty(self) -> bool:
        return not self.remove and not self.replace


def fuse_prompts(
    p1: Prompt, p2: Prompt, max_tokens: int, tokenizer: WordTokenizer
) -> Prompt:
    """Join two prompts with a separator word, truncated to ``max_tokens``."""
    if not p1.text.strip() or not p2.text.strip():
        raise ValueError("cannot fuse an empty prompt")
    fused = f"{p1.text} {FUSE_SEPARATOR} {p2.text}"
    ids = tokenizer.encode(fused)[:max_tokens]
    return tokenizer.prompt_from_ids(ids)


def edit_prompt(p: Prompt, spec: EditSpec, tokenizer: WordTokenizer) -> Prompt:
    """Remove and substitute words, keeping the remaining order intact."""
    if not p.text.strip():
        raise ValueError("cannot edit an empty prompt")
    words = []
    for word in tokenizer.normalize(p.text).split():
        if word in spec.remove:
            continue
        words.append(spec.replace.get(word, word))
    if not words:
        raise ValueError("edit removed every word of the prompt")
    return tokenizer.prompt(" ".join(words))


def evolutionary_generate(
    backend: DiffusionBackend,
    captioner: CaptionProvider,
    bundle: E2TBundle,
    images: Sequence[ImageTensor],
    generations: int,
    cfg: InversionConfig,
) -> list[tuple[Prompt, ImageTensor]]:
    """Iteratively mix concepts from several images.

    Each generation inverts every image in the working pool, fuses the
    resulting prompts pairwise (left fold), renders the fused prompt, and
    swaps the new image in for the oldest pool member. Returns one
    (fused prompt, generated image) pair per generation.
    """
    if len(images) < 2:
        raise ValueError("need at least two images")
    if generations < 1:
        raise ValueError("generations must be >= 1")
    pool = list(images)
    lineage: list[tuple[Prompt, ImageTensor]] = []
    for gen in range(generations):
        try:
            prompts = [invert(backend, captioner, bundle, img, cfg).prompt for img in pool]
            fused = prompts[0]
            for other in prompts[1:]:
                fused = fuse_prompts(fused, other, backend.seq_len, backend.tokenizer)
            noise = NoiseSpec(cfg.noise_seed, backend.latent_shape)
            rendered = backend.generate(
                backend.encode_text(fused), noise, cfg.denoise_steps
            )
        except Exception as exc:
            raise RuntimeError(f"generation {gen} failed: {exc}") from exc
        lineage.append((fused, rendered))
        pool = [rendered] + pool[:-1]
    return lineage
