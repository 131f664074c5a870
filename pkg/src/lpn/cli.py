"""Command line entry point: ``lpn gen|train|eval|infer|diag``.

Exit codes: 0 ok, 1 usage, 2 validation, 3 numerical failure.
``LPN_ARTIFACT_DIR`` sets the default output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import errors
from .eval import TableArtifact, evaluate_tasks, infer_tasks, latent_traversal, summarize
from .grids import dump_arc_json, dump_solutions, load_arc_json
from .nncore import ARCH_PRESETS, REPORTED_PARAM_COUNTS, ArchConfig
from .persistence import atomic_write_bytes, atomic_write_text, load_checkpoint
from .search import ARC_SEARCH, PATTERN_SEARCH, parse_infer
from .taskgen import FAMILIES, default_family_config, generate_tasks

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lpn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def artifact_dir() -> Path:
    return Path(os.environ.get("LPN_ARTIFACT_DIR", "artifacts"))


def unit_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} outside [0, 1]")
    return v


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"{v} must be >= 1")
    return v


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write_sidecar(out: Path, config: dict):
    """Resolved config next to an artifact whose own schema has no room for it."""
    atomic_write_text(out.with_name(out.stem + ".config.json"), json.dumps(config, indent=2, sort_keys=True))


# --------------------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    over = {
        k: v
        for k, v in {
            "grid_rows": args.grid_rows,
            "grid_cols": args.grid_cols,
            "pattern_rows": args.pattern_rows,
            "pattern_cols": args.pattern_cols,
            "color_density": args.density,
            "pairs_per_task": args.pairs,
            "query_pairs": args.queries,
        }.items()
        if v is not None
    }
    cfg = default_family_config(args.family, **over)
    tasks = generate_tasks(args.family, cfg, args.seed, args.tasks, program_seed=args.program_seed)
    out = Path(args.out) if args.out else artifact_dir() / f"{args.family}-{args.seed}.json"
    atomic_write_text(out, dump_arc_json(tasks))
    _write_sidecar(out, {"command": "gen", "family": args.family, "seed": args.seed,
                         "program_seed": args.program_seed, "tasks": args.tasks, "family_config": cfg.to_dict()})
    print(f"wrote {len(tasks)} {args.family} tasks (seed {args.seed}) to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- train


def resolve_train_config(args):
    from .training import TRAIN_PRESETS, TrainConfig

    if args.preset not in TRAIN_PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    arch = ARCH_PRESETS[args.preset].to_dict()
    train = TRAIN_PRESETS[args.preset].to_dict()
    if args.config:
        layer = json.loads(Path(args.config).read_text())
        arch.update(layer.get("arch", {}))
        for k, v in layer.get("train", {}).items():
            if k == "optim":
                train["optim"].update(v)
            else:
                train[k] = v
    flags = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "pairs": args.pairs,
        "inner_steps": args.inner_steps,
        "inner_step_size": args.inner_step_size,
        "beta": args.beta,
        "micro_batch": args.micro_batch,
        "eval_every": args.eval_every,
        "ckpt_every": args.ckpt_every,
        "log_every": args.log_every,
        "seed": args.seed,
        "dataset": args.dataset,
        "program_seed": args.program_seed,
    }
    train.update({k: v for k, v in flags.items() if v is not None})
    if args.inner_mode is not None:
        train["inner_mode"] = {"stop": "stop_gradient", "meta": "meta_gradient"}.get(args.inner_mode, args.inner_mode)
    if args.lr is not None:
        train["optim"]["lr"] = args.lr
    if args.density is not None:
        train["family_overrides"] = {**train["family_overrides"], "color_density": args.density}
    try:
        return ArchConfig.from_dict(arch), TrainConfig.from_dict(train)
    except TypeError as e:
        raise errors.ValidationError(str(e)) from None


def cmd_train(args) -> int:
    from .training import train

    arch, cfg = resolve_train_config(args)
    resolved = {"arch": arch.to_dict(), "train": cfg.to_dict()}
    _emit(resolved)
    if args.dry_run:
        return EXIT_OK
    out = Path(args.out) if args.out else artifact_dir() / f"train-{cfg.preset}-{cfg.seed}"
    trainer = train(arch, cfg, out, resume=args.resume, progress=True)
    last = trainer.history[-1].to_dict() if trainer.history else {}
    print(json.dumps({"out": str(out), "step": trainer.step, "last": last}))
    return EXIT_OK


# --------------------------------------------------------------------------- eval / infer


def _search_cfg(args):
    base = ARC_SEARCH if args.search == "arc" else PATTERN_SEARCH
    if args.step_size is not None:
        base = replace(base, step_size=args.step_size)
    base = replace(base, seed=args.seed)
    init = {"encoder": "encoder_mean", "prior": "prior", "sample": "encoder_sample"}[args.init]
    return [parse_infer(s, base, init) for s in (args.infer or ["mean"])]


def _load_model(path, expect_preset=None):
    expect = ARCH_PRESETS[expect_preset] if expect_preset else None
    model, _, meta = load_checkpoint(path, expect_arch=expect)
    model.eval()
    return model, meta


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint, args.expect_preset)
    data = Path(args.dataset).read_bytes()
    sol = Path(args.solutions).read_bytes() if args.solutions else None
    tasks = list(load_arc_json(data, sol).values())
    if args.limit:
        tasks = tasks[: args.limit]
    out = Path(args.out) if args.out else artifact_dir() / "eval"
    rows = []
    for cfg in _search_cfg(args):
        results = evaluate_tasks(model, tasks, cfg, args.attempts, seed=args.seed)
        tag = cfg.label.replace(" ", "")
        lines = "".join(json.dumps({**r.to_json(), "inference": cfg.label}) + "\n" for r in results)
        atomic_write_text(out / f"tasks-{tag}.jsonl", lines)
        s = summarize(results)
        rows.append({"inference": cfg.label, **s})
        print(json.dumps({"inference": cfg.label, **s}))
    table = TableArtifact(
        rows,
        {
            "checkpoint": str(args.checkpoint),
            "checkpoint_meta": meta,
            "dataset": str(args.dataset),
            "inference": [c.to_dict() for c in _search_cfg(args)],
            "attempts": args.attempts,
            "seed": args.seed,
        },
    )
    table.write(out / "summary")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = _load_model(args.checkpoint, args.expect_preset)
    tasks = load_arc_json(Path(args.tasks).read_bytes())
    for t in tasks.values():
        if not t.query:
            raise errors.EmptySpecification(f"task {t.task_id!r} has no query inputs")
    cfg = _search_cfg(args)[0]
    order = list(tasks.values())
    preds, _ = infer_tasks(model, order, cfg, args.attempts, seed=args.seed)
    top1 = {t.task_id: p[0] for t, p in zip(order, preds)}
    out = Path(args.out) if args.out else artifact_dir() / "predictions.json"
    atomic_write_text(out, dump_solutions(top1))
    if args.attempts == 2:
        sub = {
            t.task_id: [
                {"attempt_1": p[0][q].to_list(), "attempt_2": p[1][q].to_list()} for q in range(len(t.query))
            ]
            for t, p in zip(order, preds)
        }
        atomic_write_text(out.with_suffix(".attempts.json"), json.dumps(sub, separators=(",", ":")))
    _write_sidecar(out, {"command": "infer", "checkpoint": str(args.checkpoint), "tasks": str(args.tasks),
                         "inference": cfg.to_dict(), "attempts": args.attempts, "seed": args.seed})
    print(f"wrote predictions for {len(order)} tasks to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- diag


def cmd_diag(args) -> int:
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
    else:
        from .model import LPN

        model = LPN(ARCH_PRESETS[args.preset], seed=args.seed)
    if args.which == "paramcount":
        n = model.num_parameters()
        report = {"num_parameters": n, "float32_bytes": 4 * n}
        if not args.checkpoint:
            ref = REPORTED_PARAM_COUNTS[args.preset]
            report.update(preset=args.preset, reported=ref, relative_to_reported=4 * n / ref - 1)
        _emit(report)
        return EXIT_OK
    if args.which == "traversal":
        tr = latent_traversal(model, args.resolution)
        out = Path(args.out) if args.out else artifact_dir() / "traversal"
        atomic_write_bytes(out.with_suffix(".ppm"), tr.to_ppm())
        atomic_write_text(out.with_suffix(".json"), json.dumps(tr.to_json()))
        print(f"wrote {args.resolution}x{args.resolution} traversal to {out}.ppm/.json")
        return EXIT_OK
    # gradcheck
    from .diagnostics import latent_gradcheck, parameter_gradcheck
    from .model import tasks_to_batch

    cfg = model.cfg
    fam = default_family_config(
        "pattern", grid_rows=min(cfg.max_rows, 6), grid_cols=min(cfg.max_cols, 6),
        pattern_rows=min(cfg.max_rows, 2), pattern_cols=min(cfg.max_cols, 2), query_pairs=0, pairs_per_task=2,
    )
    batch = tasks_to_batch(generate_tasks("pattern", fam, args.seed, 2), cfg)
    z = torch.randn(2, cfg.latent_dim, generator=torch.Generator().manual_seed(args.seed))
    reports = {"latent": latent_gradcheck(model, batch, z, seed=args.seed)}
    reports.update(parameter_gradcheck(model, batch, z, seed=args.seed))
    ok = all(r.passed for r in reports.values())
    for name, r in reports.items():
        print(f"{name}: {r.summary()}")
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lpn", description="Latent program network toolkit")
    p.add_argument("--workers", type=positive_int, default=None, help="bound intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="sample a synthetic task family to ARC JSON")
    g.add_argument("family", choices=FAMILIES)
    g.add_argument("--tasks", type=positive_int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--program-seed", type=int, default=0)
    g.add_argument("--density", type=unit_float)
    g.add_argument("--grid-rows", type=positive_int)
    g.add_argument("--grid-cols", type=positive_int)
    g.add_argument("--pattern-rows", type=positive_int)
    g.add_argument("--pattern-cols", type=positive_int)
    g.add_argument("--pairs", type=positive_int)
    g.add_argument("--queries", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a preset, config file and overrides")
    t.add_argument("--preset", default="pattern")
    t.add_argument("--config", help="JSON with optional 'arch' and 'train' objects")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=positive_int)
    t.add_argument("--pairs", type=positive_int)
    t.add_argument("--inner-steps", type=int)
    t.add_argument("--inner-mode", choices=["stop", "meta", "stop_gradient", "meta_gradient"])
    t.add_argument("--inner-step-size", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--micro-batch", type=positive_int)
    t.add_argument("--density", type=unit_float)
    t.add_argument("--dataset", help="ARC-format JSON to train on instead of a synthetic family")
    t.add_argument("--program-seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--log-every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    def search_flags(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--expect-preset", choices=sorted(ARCH_PRESETS))
        q.add_argument("--infer", action="append", help="mean | ga:K | rs:B (repeatable)")
        q.add_argument("--init", choices=["encoder", "prior", "sample"], default="encoder")
        q.add_argument("--search", choices=["pattern", "arc"], default="pattern",
                       help="plain ascent (pattern) or Adam with cosine decay (arc)")
        q.add_argument("--step-size", type=float)
        q.add_argument("--attempts", type=int, choices=[1, 2], default=1)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out")

    e = sub.add_parser("eval", help="score a checkpoint on an ARC-format dataset")
    search_flags(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--solutions")
    e.add_argument("--limit", type=int)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict query outputs for ARC-format tasks")
    search_flags(i)
    i.add_argument("--tasks", required=True)
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("diag", help="gradcheck | traversal | paramcount")
    d.add_argument("which", choices=["gradcheck", "traversal", "paramcount"])
    d.add_argument("--checkpoint")
    d.add_argument("--preset", choices=sorted(ARCH_PRESETS), default="pattern")
    d.add_argument("--resolution", type=positive_int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.workers:
            torch.set_num_threads(args.workers)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except errors.NonFinite as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (errors.LPNError, ValueError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
