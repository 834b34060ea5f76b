"""Command-line entry point: ``partstyle {stylize,finetune,study,metrics}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import fixtures
from .config import RunConfig
from .field import FieldConfig
from .finetune import evaluate_ap, evaluate_ap_per_part, generate_dataset, save_dataset, tune_offsets
from .grounding import OracleGroundingBackend, PromptOffset, ToyGroundingBackend, make_backend
from .mesh import MeshError, identity_style, load_mesh, part_color_style, read_parts
from .metrics import consistency_study, image_metrics, lpips_metric
from .render import load_png, uniform_viewpoints
from .trainer import PromptError, TrainingAborted, parse_prompt, run

logger = logging.getLogger("partstyle")

FIXTURES = {
    "cube": fixtures.unit_cube_mesh,
    "two_spheres": fixtures.two_spheres,
    "body_handle": fixtures.body_handle,
    "lamp": fixtures.lamp,
    "enclosed_core": fixtures.enclosed_core,
}


class CliError(Exception):
    pass


def resolve_mesh(spec: str | None, parts: str | None):
    """``spec`` is an OBJ path or ``fixture:<name>``."""
    if not spec:
        raise CliError("a mesh is required (--mesh or the config's 'mesh')")
    if spec.startswith("fixture:"):
        name = spec.split(":", 1)[1]
        if name not in FIXTURES:
            raise CliError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
        return FIXTURES[name](), f"fixture:{name}"
    path = Path(spec)
    if not path.exists():
        raise CliError(f"mesh file not found: {path}")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return load_mesh(path, parts), digest


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train = cfg.train
    overrides = {
        "iterations": args.iters, "seed": args.seed, "learning_rate": args.lr,
        "grounding": args.backend, "localizer": args.localizer, "embedding": args.embedding,
        "mode": args.mode, "image_size": args.image_size, "grid_size": args.grid_size,
    }
    train = replace(train, **{k: v for k, v in overrides.items() if v is not None})
    if args.num_frequencies is not None or args.hidden_width is not None:
        fc = train.field
        train = replace(train, field=FieldConfig(
            num_frequencies=args.num_frequencies if args.num_frequencies is not None else fc.num_frequencies,
            frequency_scale=fc.frequency_scale,
            hidden_width=args.hidden_width if args.hidden_width is not None else fc.hidden_width,
            depth=fc.depth, seed=fc.seed,
        ))
    return replace(
        cfg, train=train,
        mesh=args.mesh or cfg.mesh, parts=args.parts or cfg.parts,
        prompt=args.prompt or cfg.prompt, out_dir=args.out or cfg.out_dir,
    )


def cmd_stylize(args) -> int:
    cfg = _run_config(args)
    mesh, _ = resolve_mesh(cfg.mesh, cfg.parts)
    if not cfg.prompt:
        raise CliError("a prompt is required (--prompt or the config's 'prompt')")
    prompt = parse_prompt(cfg.prompt, mesh)
    out = Path(cfg.out_dir)
    art = run(cfg.train, mesh, prompt, out_dir=out, resume_from=args.resume)
    cfg.save(out / "run_config.json")
    print(out)
    logger.info("max offset %.4f, field %s", art.metadata["max_offset"], art.metadata["field_hash"][:12])
    return 0


def cmd_study(args) -> int:
    cfg = _run_config(args)
    mesh, _ = resolve_mesh(cfg.mesh, cfg.parts)
    if not cfg.prompt:
        raise CliError("a prompt is required (--prompt or the config's 'prompt')")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    n_runs = len(seeds) if seeds else args.runs
    perceptual = lpips_metric() if args.lpips else None
    report = consistency_study(cfg.train, mesh, cfg.prompt, n_runs, seeds, perceptual)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "study.json").write_text(report.to_json())
    print(report.table())
    if not args.lpips:
        print("perceptual: omitted (no plug-in configured)")
    print(out / "study.json")
    return 0 if len(report.pairs) else 1


def cmd_finetune(args) -> int:
    mesh, mesh_id = resolve_mesh(args.mesh, args.parts)
    sidecar = read_parts(args.parts)[2] if args.parts else {}
    colors = sidecar.get("colors")
    if args.colors:
        colors = json.loads(Path(args.colors).read_text())
    if colors:
        missing = [n for n in mesh.part_names if n not in colors]
        if missing:
            raise CliError(f"no color given for parts {missing}")
        shown = part_color_style(mesh, [colors[n] for n in mesh.part_names])
    else:
        shown = identity_style(mesh)
    synonyms = json.loads(Path(args.synonyms).read_text()) if args.synonyms else None
    views = uniform_viewpoints(args.n_azimuths, [math.radians(e) for e in args.elevations], image_size=args.image_size)
    dataset = generate_dataset(shown, synonyms, views, args.min_side)
    out = Path(args.out)
    save_dataset(dataset, out / "dataset")

    if args.backend == "toy":
        table = json.loads(Path(args.toy_table).read_text()) if args.toy_table else None
        backend = ToyGroundingBackend(grid_size=args.grid_size, color_table=table)
    elif args.backend == "oracle":
        backend = OracleGroundingBackend(mesh, grid_size=args.grid_size, min_side=args.min_side)
    else:
        backend = make_backend(args.backend, mesh)

    before = evaluate_ap(backend, dataset)
    report = {"samples": len(dataset), "ap_before": before, "per_part_before": evaluate_ap_per_part(backend, dataset)}
    print(f"samples: {len(dataset)}")
    print(f"AP before: {before:.4f}")
    if backend.supports_offsets:
        offset = tune_offsets(backend, dataset, args.epochs, args.lr)
        offset.save(out / "offsets.pt", mesh_id=mesh_id, backend_id=args.backend)
        after = evaluate_ap(backend, dataset, offset)
        report.update(ap_after=after, per_part_after=evaluate_ap_per_part(backend, dataset, offset), loss_history=offset.history)
        print(f"AP after: {after:.4f}")
    else:
        # nothing to tune: store a zero offset so downstream tooling finds the file
        PromptOffset.zeros(backend.embed_dim, dataset.phrases).save(out / "offsets.pt", mesh_id=mesh_id, backend_id=args.backend)
        report.update(ap_after=before, per_part_after=report["per_part_before"], tuned=False)
        print(f"AP after: {before:.4f} (no prompt-offset slot, tuning skipped)")
    (out / "ap_report.json").write_text(json.dumps(report, indent=1))
    print(out)
    return 0


def cmd_metrics(args) -> int:
    a, b = load_png(args.image_a), load_png(args.image_b)
    result = image_metrics(a, b, lpips_metric() if args.lpips else None)
    print(json.dumps(result, indent=1))
    return 0


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--mesh", help="OBJ path or fixture:<name>")
    p.add_argument("--parts", help="JSON parts sidecar")
    p.add_argument("--prompt", help='e.g. "red body, blue handle"')
    p.add_argument("--backend", choices=["toy", "oracle", "pretrained"], help="grounding backend")
    p.add_argument("--localizer", choices=["toy", "oracle", "pretrained"], help="backend for content localization")
    p.add_argument("--embedding", choices=["toy", "clip"])
    p.add_argument("--mode", choices=["full", "no-embedding", "no-grounding"])
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--grid-size", type=int)
    p.add_argument("--num-frequencies", type=int)
    p.add_argument("--hidden-width", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partstyle", description="Part-aware text-driven mesh stylization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stylize", help="optimize a style field for a prompt")
    _train_flags(p)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("study", help="multi-seed consistency study")
    _train_flags(p)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seeds", help="comma-separated seeds (overrides --runs)")
    p.add_argument("--lpips", action="store_true", help="add the LPIPS plug-in metric")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("finetune", help="build a box dataset and tune prompt offsets")
    p.add_argument("--mesh", required=True)
    p.add_argument("--parts")
    p.add_argument("--synonyms", help="JSON {part: [phrase, ...]}; defaults to the sidecar's")
    p.add_argument("--colors", help="JSON {part: [r, g, b]} used to paint the renders")
    p.add_argument("--backend", choices=["toy", "oracle", "pretrained"], default="toy")
    p.add_argument("--toy-table", help="JSON {word: [r, g, b]} for the toy backend")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--n-azimuths", type=int, default=8)
    p.add_argument("--elevations", type=float, nargs="+", default=[-30.0, 0.0, 30.0], help="degrees")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--grid-size", type=int, default=32)
    p.add_argument("--min-side", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("metrics", help="compare two rendered images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--lpips", action="store_true")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, MeshError, PromptError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"error: {exc}" + (f" (state dumped to {exc.dump_path})" if exc.dump_path else ""), file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
