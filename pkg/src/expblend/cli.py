"""Command line entry point: ``expblend run | gen-data | split | plot``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .experiment import ConfigError, config_from_dict, load_config, run, summarize_rows, read_csv, validate
from .plot import PlotError, emit_plot
from .stream import Dataset, DatasetFormatError, SyntheticSpec, gen_synthetic, iblurry_split, load_dataset, store_dataset
from .trainer import METHODS

log = logging.getLogger("expblend")


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.baseline:
        cfg.baseline = args.baseline
    if args.seeds:
        cfg.seeds = args.seeds
    validate(cfg)
    run_dir = run(cfg, Path(args.out) if args.out else None, resume=not args.no_resume, workers=args.workers)
    summary = summarize_rows(read_csv(run_dir / "results.csv"))
    print(f"{run_dir}: A_avg {summary['a_avg']['mean']:.4f} +- {summary['a_avg']['stdev']:.4f}, "
          f"A_fin {summary['a_fin']['mean']:.4f} +- {summary['a_fin']['stdev']:.4f}")
    return 0


def _load_spec(path) -> tuple[SyntheticSpec, int, str]:
    """A JSON object of SyntheticSpec fields plus optional ``seed`` and ``split``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    seed = data.pop("seed", 0)
    split = data.pop("split", "train")
    names = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: {unknown[0]}: unknown key")
    try:
        return SyntheticSpec(**data), int(seed), str(split)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _cmd_gen_data(args) -> int:
    spec, seed, split = _load_spec(args.spec)
    d = gen_synthetic(spec, seed, split)
    store_dataset(d, args.out)
    print(f"wrote {len(d)} samples ({spec.num_classes} classes) to {args.out}")
    return 0


def _cmd_split(args) -> int:
    d = load_dataset(args.data)
    stream = iblurry_split(d, args.tasks, args.n, args.m, args.batch_size, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, idx in enumerate(stream.task_indices):
        store_dataset(Dataset(d.images[idx], d.labels[idx], d.num_classes, d.split), out / f"task{t}.sbds")
    (out / "stream.json").write_text(json.dumps(stream.metadata, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(stream)} tasks to {out}")
    return 0


def _cmd_plot(args) -> int:
    path = emit_plot(args.csv, args.out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expblend", description="Online continual learning with experience blending.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every seed of a config and write CSVs, checkpoints and summaries")
    r.add_argument("--config", help="JSON config; omitted keys take their defaults")
    r.add_argument("--baseline", choices=METHODS)
    r.add_argument("--seeds", type=_parse_seeds, help="comma-separated, e.g. 1,2,3")
    r.add_argument("--out", help="output root (default: $EXPBLEND_OUTPUT_ROOT or the config's output_dir)")
    r.add_argument("--workers", type=int, default=1, help="seeds trained in parallel processes")
    r.add_argument("--no-resume", action="store_true", help="rerun seeds that already finished")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("gen-data", help="write a synthetic dataset in SBDS format")
    g.add_argument("--spec", required=True, help="JSON with synthetic dataset fields, seed and split")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("split", help="split an SBDS dataset into i-Blurry tasks")
    s.add_argument("--data", required=True)
    s.add_argument("--tasks", type=int, required=True)
    s.add_argument("--n", type=int, required=True, help="percent of disjoint classes")
    s.add_argument("--m", type=int, required=True, help="blurry level in percent")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=_cmd_split)

    pl = sub.add_parser("plot", help="render accuracy curves from a results CSV to SVG")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, PlotError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
