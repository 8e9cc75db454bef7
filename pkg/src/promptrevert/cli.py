"""Command-line entry point.

Subcommands: invert, train-e2t, eval, edit, fuse, evolve. Configuration
comes from a single YAML or JSON file with {backend, captioner, optimizer,
e2t, eval} sections; individual flags override file values, and the
PROMPTREVERT_CONFIG environment variable supplies the file when --config is
omitted. Exit codes: 0 success, 1 configuration error, 2 partial failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import __version__, apps, e2t, eval as eval_mod, images, optimizer
from .backend import DiffusionBackend, ToyBackendSpec, make_toy_backend
from .captioner import CaptionProvider, FixtureCaptioner, RemoteCaptioner
from .core import (
    InversionConfig,
    InversionResult,
    append_jsonl,
    read_jsonl,
    result_to_dict,
)

IMAGE_SUFFIXES = (".png", ".ppm")
CONFIG_ENV_VAR = "PROMPTREVERT_CONFIG"


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        raise ConfigError(
            f"no config file given; pass --config or set {CONFIG_ENV_VAR}"
        )
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    try:
        if p.suffix == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must be a mapping of sections")
    return data


def _build_backend(section: dict) -> DiffusionBackend:
    kind = section.get("kind", "toy")
    if kind != "toy":
        raise ConfigError(
            f"backend plugin {kind!r} is not available; only 'toy' ships with the toolkit"
        )
    params = {k: v for k, v in section.items() if k != "kind"}
    for key in ("latent_shape", "pixel_shape"):
        if key in params:
            params[key] = tuple(params[key])
    try:
        return make_toy_backend(ToyBackendSpec(**params))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid backend section: {exc}") from exc


def _build_captioner(
    section: dict, backend: DiffusionBackend, prompt_len: int
) -> CaptionProvider:
    kind = section.get("kind", "fixture")
    if kind == "fixture":
        table_path = section.get("table")
        if table_path is None:
            raise ConfigError("fixture captioner needs a 'table' path")
        try:
            table = json.loads(Path(table_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load caption table {table_path}: {exc}") from exc
        return FixtureCaptioner(
            table,
            backend.tokenizer,
            prompt_len=prompt_len,
            fallback=section.get("fallback"),
        )
    if kind == "remote":
        endpoint = section.get("endpoint")
        if not endpoint:
            raise ConfigError("remote captioner needs an 'endpoint' URL")
        return RemoteCaptioner(
            endpoint,
            backend.tokenizer,
            prompt_len=prompt_len,
            timeout=float(section.get("timeout", 10.0)),
            retries=int(section.get("retries", 2)),
        )
    raise ConfigError(f"unknown captioner kind {kind!r}")


def _inversion_config(section: dict, args: argparse.Namespace) -> InversionConfig:
    values = dict(section)
    overrides = {
        "max_epoch": getattr(args, "max_epoch", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "denoise_steps": getattr(args, "denoise_steps", None),
        "loss_kind": getattr(args, "loss_kind", None),
        "noise_seed": getattr(args, "noise_seed", None),
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return InversionConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid optimizer section: {exc}") from exc


def _config_snapshot(config: dict, inversion: InversionConfig) -> dict:
    snapshot = {
        "backend": dict(config.get("backend", {"kind": "toy"})),
        "captioner": dict(config.get("captioner", {})),
        "optimizer": inversion.to_dict(),
        "e2t": {
            "max_len": e2t.DEFAULT_MAX_LEN,
            **dict(config.get("e2t", {})),
        },
        "eval": dict(config.get("eval", {})),
    }
    return snapshot


def _write_manifest(
    out_dir: Path, snapshot: dict, inputs: list[dict], extra: dict
) -> Path:
    body = {
        "tool_version": __version__,
        "numpy_version": np.__version__,
        "config": snapshot,
        "inputs": inputs,
        **extra,
    }
    key_material = json.dumps(
        {"config": snapshot, "inputs": inputs}, sort_keys=True
    ).encode()
    body["run_key"] = hashlib.sha256(key_material).hexdigest()
    body["created_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(body, indent=2))
    return path


def _discover_images(root: str) -> list[Path]:
    path = Path(root)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise ConfigError(f"image path not found: {path}")
    found = sorted(
        p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not found:
        raise ConfigError(f"no PNG or PPM images under {path}")
    return found


# ---------------------------------------------------------------------------
# invert
# ---------------------------------------------------------------------------


def cmd_invert(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args.config)
        backend = _build_backend(config.get("backend", {}))
        inv_cfg = _inversion_config(config.get("optimizer", {}), args)
        captioner = _build_captioner(
            config.get("captioner", {}), backend, inv_cfg.init_prompt_len
        )
        e2t_section = config.get("e2t", {})
        checkpoint = e2t_section.get("checkpoint")
        if not checkpoint or not Path(checkpoint).is_dir():
            raise ConfigError(f"e2t checkpoint directory not found: {checkpoint}")
        bundle = e2t.load_bundle(checkpoint, backend)
        inputs = _discover_images(args.images)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.jsonl"

    done_hashes: set[str] = set()
    if results_path.exists():
        for record in read_jsonl(results_path):
            if record.get("input_hash"):
                done_hashes.add(record["input_hash"])

    def process(path: Path):
        image = images.read_image(path)
        content = images.image_content_hash(image)
        if content in done_hashes:
            return None
        result = optimizer.invert(backend, captioner, bundle, image, inv_cfg)
        return content, result

    failures = 0
    manifest_inputs = []
    workers = max(1, args.workers)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [(path, pool.submit(process, path)) for path in inputs]
        # Single writer: collect in input order and append from this thread.
        for path, future in futures:
            try:
                outcome = future.result()
            except Exception as exc:
                failures += 1
                append_jsonl(results_path, [{"input": path.name, "error": str(exc)}])
                manifest_inputs.append({"path": path.name, "hash": None})
                continue
            if outcome is None:
                continue  # already present from a previous run
            content, result = outcome
            record = {"input": path.name, "input_hash": content}
            record.update(result_to_dict(result))
            append_jsonl(results_path, [record])
            manifest_inputs.append({"path": path.name, "hash": content})

    snapshot = _config_snapshot(config, inv_cfg)
    _write_manifest(
        out_dir,
        snapshot,
        manifest_inputs,
        {
            "backend_digest": backend.params_digest(),
            "results_file": results_path.name,
        },
    )
    if failures:
        print(f"{failures} of {len(inputs)} inputs failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# train-e2t
# ---------------------------------------------------------------------------


def cmd_train_e2t(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args.config)
        backend = _build_backend(config.get("backend", {}))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        print(f"error: corpus file not found: {corpus_path}", file=sys.stderr)
        return 1
    prompts = []
    for lineno, line in enumerate(corpus_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            prompts.append(backend.tokenizer.prompt(line))
        except ValueError as exc:
            print(f"error: corpus line {lineno}: {exc}", file=sys.stderr)
            return 1
    if not prompts:
        print("error: corpus is empty", file=sys.stderr)
        return 1

    section = config.get("e2t", {})
    try:
        train_cfg = e2t.TrainConfig(
            batch_size=int(section.get("batch_size", 32)),
            learning_rate=float(section.get("learning_rate", 1e-3)),
            epochs_zero=int(section.get("epochs_zero", 60)),
            epochs_corrector=int(section.get("epochs_corrector", 35)),
            seed=int(section.get("seed", 0)),
        )
    except ValueError as exc:
        print(f"error: invalid e2t section: {exc}", file=sys.stderr)
        return 1
    max_len = int(section.get("max_len", e2t.DEFAULT_MAX_LEN))

    corpus = e2t.embed_prompts(backend, prompts)
    zero = e2t.train_zero_step(corpus, train_cfg, backend.embedding_matrix, max_len=max_len)
    corrector = e2t.train_corrector(corpus, zero, backend, train_cfg)
    bundle = e2t.E2TBundle(zero, corrector, backend)
    created = datetime.datetime.now(datetime.timezone.utc).isoformat()
    e2t.save_bundle(bundle, args.out, train_cfg, e2t.corpus_digest(prompts), created)
    print(f"checkpoint written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _result_from_record(record: dict) -> InversionResult:
    from .core import LatentTextEmbedding, Prompt

    cfg = InversionConfig.from_dict(record["config"])
    prompt = Prompt(
        text=record["prompt"]["text"],
        token_ids=tuple(record["prompt"]["token_ids"]),
    )
    # The embedding is not persisted in the results file; a placeholder is
    # enough because evaluation only regenerates from the prompt.
    placeholder = LatentTextEmbedding(np.zeros((1, 1)))
    return InversionResult(
        prompt=prompt,
        embedding=placeholder,
        loss_trace=tuple(record["loss_trace"]),
        wall_time_s=record["wall_time_s"],
        config=cfg,
    )


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args.config)
        backend = _build_backend(config.get("backend", {}))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    results_path = Path(args.results)
    fixtures_dir = Path(args.fixtures)
    if not results_path.exists():
        print(f"error: results file not found: {results_path}", file=sys.stderr)
        return 1
    if not fixtures_dir.is_dir():
        print(f"error: fixtures directory not found: {fixtures_dir}", file=sys.stderr)
        return 1

    records = [r for r in read_jsonl(results_path) if "error" not in r]
    pairs = []
    for record in records:
        stem = Path(record["input"]).stem
        image_path = None
        for suffix in IMAGE_SUFFIXES:
            candidate = fixtures_dir / f"{stem}{suffix}"
            if candidate.exists():
                image_path = candidate
                break
        ref_path = fixtures_dir / f"{stem}.txt"
        if image_path is None or not ref_path.exists():
            print(f"error: no fixture for result {stem!r}", file=sys.stderr)
            return 1
        pairs.append((stem, record, image_path, ref_path))

    eval_section = config.get("eval", {})
    corpus_seed = int(eval_section.get("corpus_seed", 2024))
    corpus_size = int(eval_section.get("corpus_size", 500))
    train_prompts, _ = e2t.sample_template_prompts(
        backend.tokenizer, corpus_size, 0, seed=corpus_seed
    )
    lm = eval_mod.BigramScorer.fit(
        [p.token_ids for p in train_prompts], backend.tokenizer.vocab_size
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    reports = []
    for stem, record, image_path, ref_path in pairs:
        target = images.read_image(image_path)
        ref = backend.tokenizer.prompt(ref_path.read_text().strip())
        result = _result_from_record(record)
        report = eval_mod.evaluate_run(result, target, ref, backend, lm)
        reports.append(report)
        append_jsonl(metrics_path, [{"input": stem, **report.to_dict()}])
    summary = eval_mod.summarize(reports)
    summary["count"] = len(reports)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"evaluated {len(reports)} results; summary in {out_dir / 'summary.json'}")
    return 0


# ---------------------------------------------------------------------------
# edit / fuse / evolve
# ---------------------------------------------------------------------------


def _tokenizer_from_args(args: argparse.Namespace):
    if args.config or os.environ.get(CONFIG_ENV_VAR):
        config = _load_config(args.config)
        return _build_backend(config.get("backend", {})).tokenizer
    return make_toy_backend(ToyBackendSpec()).tokenizer


def cmd_edit(args: argparse.Namespace) -> int:
    try:
        tokenizer = _tokenizer_from_args(args)
        remove = tuple(w for w in (args.remove or "").split(",") if w)
        replace = {}
        for pair in (args.replace or "").split(","):
            if not pair:
                continue
            if "=" not in pair:
                raise ConfigError(f"replace entries look like old=new, got {pair!r}")
            old, new = pair.split("=", 1)
            replace[old] = new
        spec = apps.EditSpec(remove=remove, replace=replace)
        prompt = tokenizer.prompt(args.prompt)
        edited = apps.edit_prompt(prompt, spec, tokenizer)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(edited.text)
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    try:
        tokenizer = _tokenizer_from_args(args)
        fused = apps.fuse_prompts(
            tokenizer.prompt(args.prompt_a),
            tokenizer.prompt(args.prompt_b),
            max_tokens=args.max_tokens,
            tokenizer=tokenizer,
        )
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(fused.text)
    return 0


def cmd_evolve(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args.config)
        backend = _build_backend(config.get("backend", {}))
        inv_cfg = _inversion_config(config.get("optimizer", {}), args)
        captioner = _build_captioner(
            config.get("captioner", {}), backend, inv_cfg.init_prompt_len
        )
        checkpoint = config.get("e2t", {}).get("checkpoint")
        if not checkpoint or not Path(checkpoint).is_dir():
            raise ConfigError(f"e2t checkpoint directory not found: {checkpoint}")
        bundle = e2t.load_bundle(checkpoint, backend)
        inputs = _discover_images(args.images)
        if len(inputs) < 2:
            raise ConfigError("evolve needs at least two input images")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    loaded = [images.read_image(p) for p in inputs]
    try:
        lineage = apps.evolutionary_generate(
            backend, captioner, bundle, loaded, args.generations, inv_cfg
        )
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for gen, (prompt, image) in enumerate(lineage):
        name = f"generation{gen:02d}.ppm"
        images.write_ppm(image, out_dir / name)
        records.append(
            {"generation": gen, "prompt": prompt.text, "image": name}
        )
    append_jsonl(out_dir / "lineage.jsonl", records)
    print(f"wrote {len(records)} generations to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptrevert",
        description="Prompt inversion for latent diffusion models",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help=f"config file (fallback: ${CONFIG_ENV_VAR})")

    p = sub.add_parser("invert", help="invert prompts for a batch of images")
    add_config(p)
    p.add_argument("--images", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-epoch", type=int, dest="max_epoch")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--denoise-steps", type=int, dest="denoise_steps")
    p.add_argument("--loss-kind", dest="loss_kind", choices=["pixel_sse", "latent_sse"])
    p.add_argument("--noise-seed", type=int, dest="noise_seed")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("train-e2t", help="train the embedding-to-text models")
    add_config(p)
    p.add_argument("--corpus", required=True, help="text file, one prompt per line")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train_e2t)

    p = sub.add_parser("eval", help="score a results file against fixtures")
    add_config(p)
    p.add_argument("--results", required=True, help="results JSONL from invert")
    p.add_argument("--fixtures", required=True, help="directory with images and .txt refs")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edit", help="remove or replace words in a prompt")
    add_config(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--remove", help="comma-separated words to drop")
    p.add_argument("--replace", help="comma-separated old=new pairs")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("fuse", help="concatenate two prompts")
    add_config(p)
    p.add_argument("--prompt-a", required=True, dest="prompt_a")
    p.add_argument("--prompt-b", required=True, dest="prompt_b")
    p.add_argument("--max-tokens", type=int, default=32, dest="max_tokens")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evolve", help="evolutionary multi-concept generation")
    add_config(p)
    p.add_argument("--images", required=True, help="directory with at least two images")
    p.add_argument("--generations", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evolve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
