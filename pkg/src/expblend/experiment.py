"""Seeded experiment runs: config loading, the per-seed pipeline, CSV and summaries."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import evaluation as ev
from .nets import save_checkpoint
from .sbd import save_sbd
from .stream import Dataset, SyntheticSpec, gen_synthetic, iblurry_split, load_dataset
from .trainer import METHODS, TrainConfig, init_state, train_task

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "EXPBLEND_OUTPUT_ROOT"
CSV_HEADER = ["seed", "task", "epoch", "step", "split", "metric", "value"]


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    test_samples_per_class: int = 50
    data_seed: int = 0
    train_path: str | None = None
    test_path: str | None = None


@dataclass
class StreamConfig:
    tasks: int = 5
    n: int = 50
    m: int = 10
    batch_size: int = 128


@dataclass
class NetConfig:
    channels: tuple[int, int] = (8, 16)
    hidden: int = 64
    extractor: str = "identity"
    sa_residual: bool = False


@dataclass
class MemoryConfig:
    replay_capacity: int = 500
    sbd_budget: int | None = None


@dataclass
class EvalConfig:
    validation_batch: int = 128


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    baseline: str = "ours"
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "dataset": DatasetConfig,
    "stream": StreamConfig,
    "train": TrainConfig,
    "net": NetConfig,
    "memory": MemoryConfig,
    "eval": EvalConfig,
}


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)} values")
        return tuple(_coerce(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    return value


def _section(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        sub = f"{path}.{name}"
        if name == "synthetic":
            kwargs[name] = None if value is None else _section(SyntheticSpec, value, sub)
        elif value is None:
            if default is not None and name not in ("sbd_budget",):
                raise ConfigError(f"{sub}: may not be null")
            kwargs[name] = None
        elif default is None:
            kwargs[name] = value
        else:
            kwargs[name] = _coerce(value, default, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key == "seeds":
            if not isinstance(value, list) or not value or not all(isinstance(s, int) and not isinstance(s, bool) for s in value):
                raise ConfigError("seeds: expected a non-empty list of integers")
            kwargs[key] = list(value)
        else:
            kwargs[key] = _coerce(value, getattr(ExperimentConfig(), key), key)
    cfg = ExperimentConfig(**kwargs)
    validate(cfg, base_dir)
    return cfg


def validate(cfg: ExperimentConfig, base_dir: Path | None = None) -> None:
    if cfg.baseline not in METHODS:
        raise ConfigError(f"baseline: expected one of {', '.join(METHODS)}, got {cfg.baseline!r}")
    if not cfg.seeds:
        raise ConfigError("seeds: must not be empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds: duplicate seed")
    st = cfg.stream
    if st.tasks < 1:
        raise ConfigError("stream.tasks: must be >= 1")
    if not 0 <= st.n <= 100:
        raise ConfigError("stream.n: must lie in [0, 100]")
    if not 0 <= st.m <= 100:
        raise ConfigError("stream.m: must lie in [0, 100]")
    if st.batch_size < 1:
        raise ConfigError("stream.batch_size: must be >= 1")
    if cfg.memory.replay_capacity < 1:
        raise ConfigError("memory.replay_capacity: must be >= 1")
    if cfg.memory.sbd_budget is not None and (not isinstance(cfg.memory.sbd_budget, int) or cfg.memory.sbd_budget < 1):
        raise ConfigError("memory.sbd_budget: must be null or a positive integer")
    if cfg.net.extractor not in ("identity", "conv1x1"):
        raise ConfigError("net.extractor: expected 'identity' or 'conv1x1'")
    if cfg.eval.validation_batch < 1:
        raise ConfigError("eval.validation_batch: must be >= 1")
    ds = cfg.dataset
    if ds.train_path is None and ds.synthetic is None:
        raise ConfigError("dataset: give either synthetic or train_path")
    for key in ("train_path", "test_path"):
        p = getattr(ds, key)
        if p is not None:
            full = Path(p) if base_dir is None else base_dir / p
            if not full.exists():
                raise ConfigError(f"dataset.{key}: {p} does not exist")
            setattr(ds, key, str(full))
    if ds.train_path is not None and ds.test_path is None:
        raise ConfigError("dataset.test_path: required with train_path")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    return config_from_dict(data, path.parent)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.train_path is not None:
        return load_dataset(ds.train_path, "train"), load_dataset(ds.test_path, "test")
    train = gen_synthetic(ds.synthetic, ds.data_seed, "train")
    test = gen_synthetic(ds.synthetic, ds.data_seed, "test", ds.test_samples_per_class)
    return train, test


# --------------------------------------------------------------------------
# Per-seed pipeline


def _fmt(value: float | int) -> str:
    return str(value) if isinstance(value, (int, np.integer)) else f"{value:.6f}"


def run_seed(cfg: ExperimentConfig, seed: int, train: Dataset, test: Dataset, out_dir: Path | None = None) -> dict:
    """Train one seed end to end; returns ``{"rows": [...], "summary": {...}}``.

    With ``out_dir`` set, records, checkpoints and memory dumps are written
    there as well.
    """
    stream = iblurry_split(train, cfg.stream.tasks, cfg.stream.n, cfg.stream.m, cfg.stream.batch_size, seed)
    method = cfg.baseline
    state = init_state(
        seed,
        input_shape=train.image_shape,
        channels=cfg.net.channels,
        hidden=cfg.net.hidden,
        num_classes=train.num_classes,
        extractor=cfg.net.extractor,
        sa_residual=cfg.net.sa_residual,
        replay_capacity=None if method == "ftf-only" else cfg.memory.replay_capacity,
        sbd_budget=cfg.memory.sbd_budget,
        use_sbd=method == "ours",
    )
    nv = cfg.eval.validation_batch
    val = [(train.images[idx[:nv]], train.labels[idx[:nv]]) for idx in stream.task_indices]
    rows: list[list] = []
    seen: set[int] = set()
    task_end_acc: list[float] = []

    def on_epoch_end(st, epoch):
        t = st.task_index
        recs = [
            ("validation-current", ev.evaluate(st.m, st.p_r, st.sa, *val[t])),
            ("validation-task0", ev.evaluate(st.m, st.p_r, st.sa, *val[0])),
            ("test-seen", ev.evaluate(st.m, st.p_r, st.sa, test.images, test.labels, sorted(seen))),
        ]
        for split, acc in recs:
            rows.append([seed, t, epoch, st.step, split, "accuracy", acc])
        if epoch == cfg.train.epochs_per_task - 1:
            task_end_acc.append(recs[2][1])

    for t, batches in enumerate(stream.tasks):
        seen.update(stream.task_classes(t))
        train_task(state, batches, cfg.train, method, on_epoch_end)
        budget = ev.budget_report(state.r, state.e)
        for metric, value in budget.as_dict().items():
            rows.append([seed, t, cfg.train.epochs_per_task - 1, state.step, "budget", metric, value])
        if out_dir is not None:
            save_checkpoint(out_dir / f"task{t}.sbxm", state.named_parameters())

    summary = {
        "seed": seed,
        "a_avg": ev.a_avg(task_end_acc),
        "a_fin": ev.a_fin(task_end_acc),
        "task_end_accuracy": task_end_acc,
        "budget": ev.budget_report(state.r, state.e).as_dict(),
        "warnings": len(state.warnings),
    }
    if out_dir is not None:
        write_csv(out_dir / "records.csv", rows)
        (out_dir / "stream.json").write_text(json.dumps(stream.metadata, indent=2, sort_keys=True) + "\n")
        if state.r is not None:
            state.r.save(out_dir / "replay.sbds", out_dir / "replay_importance.csv")
        if state.e is not None and len(state.e):
            save_sbd(out_dir / "sbd.sbxe", state.e.features, state.e.labels, state.e.task_ids)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"rows": rows, "summary": summary}


def write_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([*r[:6], _fmt(r[6])])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
            try:
                rows.append({
                    "seed": int(rec[0]), "task": int(rec[1]), "epoch": int(rec[2]), "step": int(rec[3]),
                    "split": rec[4], "metric": rec[5], "value": float(rec[6]),
                })
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
        return rows


def summarize_rows(rows: list[dict]) -> dict:
    """Per-seed A_avg/A_fin/budget and the cross-seed mean and sample stdev, from CSV rows alone."""
    per_seed: dict[int, dict] = {}
    for r in rows:
        s = per_seed.setdefault(r["seed"], {"task_end": {}, "last_epoch": {}, "budget": {}})
        if r["split"] == "test-seen" and r["metric"] == "accuracy":
            prev = s["last_epoch"].get(r["task"], -1)
            if r["epoch"] >= prev:
                s["last_epoch"][r["task"]] = r["epoch"]
                s["task_end"][r["task"]] = r["value"]
        elif r["split"] == "budget":
            s["budget"][r["metric"]] = int(r["value"])
    seeds = {}
    for seed in sorted(per_seed):
        acc = [per_seed[seed]["task_end"][t] for t in sorted(per_seed[seed]["task_end"])]
        seeds[str(seed)] = {"a_avg": ev.a_avg(acc), "a_fin": ev.a_fin(acc), "budget": per_seed[seed]["budget"]}

    def agg(key):
        vals = [v[key] for v in seeds.values()]
        return {"mean": statistics.fmean(vals), "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0}

    return {"seeds": seeds, "a_avg": agg("a_avg"), "a_fin": agg("a_fin")}


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


def _run_one(cfg: ExperimentConfig, seed: int, train: Dataset, test: Dataset, seed_dir: Path) -> list[list]:
    seed_dir.mkdir(exist_ok=True)
    log.info("running seed %d (%s)", seed, cfg.baseline)
    result = run_seed(cfg, seed, train, test, seed_dir)
    (seed_dir / "DONE").write_text("ok\n")
    return result["rows"]


def run(cfg: ExperimentConfig, out_root: Path | None = None, resume: bool = True, workers: int = 1) -> Path:
    """Run every seed of ``cfg``; returns the run directory.

    Seeds whose directory already holds a ``DONE`` marker are reused.
    With ``workers > 1`` pending seeds run in separate processes; the output
    is identical to a sequential run. Timestamps go only to ``metadata.json``.
    """
    root = Path(out_root) if out_root is not None else output_root(cfg)
    run_dir = root / f"{cfg.name}-{cfg.baseline}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    started = time.time()
    train, test = load_data(cfg)
    per_seed: dict[int, list[list]] = {}
    pending = []
    for seed in cfg.seeds:
        seed_dir = run_dir / f"seed_{seed}"
        if resume and (seed_dir / "DONE").exists():
            log.info("seed %d already complete, reusing %s", seed, seed_dir)
            per_seed[seed] = _rows_as_lists(read_csv(seed_dir / "records.csv"))
        else:
            pending.append(seed)
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(pending))) as pool:
            futures = {s: pool.submit(_run_one, cfg, s, train, test, run_dir / f"seed_{s}") for s in pending}
            for s, fut in futures.items():
                per_seed[s] = fut.result()
    else:
        for s in pending:
            per_seed[s] = _run_one(cfg, s, train, test, run_dir / f"seed_{s}")
    all_rows = [row for s in cfg.seeds for row in per_seed[s]]
    write_csv(run_dir / "results.csv", all_rows)
    summary = summarize_rows(read_csv(run_dir / "results.csv"))
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    meta = {
        "started_unix": started,
        "finished_unix": time.time(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (run_dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
    return run_dir


def _rows_as_lists(rows: list[dict]) -> list[list]:
    out = []
    for r in rows:
        value = int(r["value"]) if r["split"] == "budget" else r["value"]
        out.append([r["seed"], r["task"], r["epoch"], r["step"], r["split"], r["metric"], value])
    return out
