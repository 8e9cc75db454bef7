"""Deterministic desk-scale fixture suite.

Ten target images generated from known template prompts, each paired with a
slightly corrupted caption (one template slot swapped) standing in for an
imperfect captioning model. Everything derives from fixed seeds, so the
suite is identical on every run and can be materialized to disk for CLI
tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend import (
    COLORS,
    OBJECTS,
    PLACES,
    RELATIONS,
    DiffusionBackend,
    ToyBackendSpec,
    make_toy_backend,
)
from .captioner import FixtureCaptioner
from .core import ImageTensor, InversionConfig, NoiseSpec, Prompt
from .images import image_content_hash, write_ppm

FIXTURE_SEED = 101
FIXTURE_COUNT = 10
FIXTURE_NOISE_BASE = 1000

#: Budget used by the fixture refinement runs.
FIXTURE_CONFIG = InversionConfig(max_epoch=200, learning_rate=0.05, noise_seed=0)

_SLOT_LISTS = {1: COLORS, 2: OBJECTS, 3: RELATIONS, 5: PLACES}


@dataclass(frozen=True)
class Fixture:
    name: str
    ground_truth: Prompt
    caption_text: str
    noise: NoiseSpec
    target: ImageTensor

    def config(self, **overrides) -> InversionConfig:
        base = FIXTURE_CONFIG.to_dict()
        base["noise_seed"] = self.noise.seed
        base.update(overrides)
        return InversionConfig(**base)


def _sample_prompt_text(rng: np.random.Generator) -> str:
    return (
        f"a {rng.choice(COLORS)} {rng.choice(OBJECTS)} "
        f"{rng.choice(RELATIONS)} a {rng.choice(PLACES)}"
    )


def _corrupt_one_slot(text: str, rng: np.random.Generator) -> str:
    words = text.split()
    position = int(rng.choice(list(_SLOT_LISTS)))
    options = [w for w in _SLOT_LISTS[position] if w != words[position]]
    words[position] = str(rng.choice(options))
    return " ".join(words)


def default_backend() -> DiffusionBackend:
    return make_toy_backend(ToyBackendSpec())


def make_fixture_suite(
    backend: DiffusionBackend,
    count: int = FIXTURE_COUNT,
    seed: int = FIXTURE_SEED,
) -> list[Fixture]:
    rng = np.random.Generator(np.random.PCG64(seed))
    fixtures = []
    for i in range(count):
        gt_text = _sample_prompt_text(rng)
        caption = _corrupt_one_slot(gt_text, rng)
        gt = backend.tokenizer.prompt(gt_text)
        noise = NoiseSpec(FIXTURE_NOISE_BASE + i, backend.latent_shape)
        target = backend.generate(
            backend.encode_text(gt), noise, len(backend.schedule)
        )
        fixtures.append(
            Fixture(
                name=f"fixture{i:02d}",
                ground_truth=gt,
                caption_text=caption,
                noise=noise,
                target=target,
            )
        )
    return fixtures


def fixture_captioner(
    backend: DiffusionBackend,
    fixtures: list[Fixture],
    prompt_len: int = 16,
) -> FixtureCaptioner:
    table = {image_content_hash(f.target): f.caption_text for f in fixtures}
    return FixtureCaptioner(table, backend.tokenizer, prompt_len=prompt_len)


def write_fixture_dir(directory: str | Path, fixtures: list[Fixture]) -> Path:
    """Materialize the suite: PPM images, reference prompts, caption table.

    Captions are keyed by the hash of the quantized image, so the table
    matches what a CLI run sees after loading the PPM files back.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    captions = {}
    for fixture in fixtures:
        write_ppm(fixture.target, out / f"{fixture.name}.ppm")
        (out / f"{fixture.name}.txt").write_text(fixture.ground_truth.text + "\n")
        captions[image_content_hash(fixture.target)] = fixture.caption_text
    (out / "captions.json").write_text(json.dumps(captions, indent=2))
    return out
