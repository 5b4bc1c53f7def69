#!/usr/bin/env python3
"""
cli.py — Command-line entry point for PatchGD experiments

Run:
    python cli.py generate  --config desk.toml
    python cli.py train     --config desk.toml --mode patchgd --out runs/pgd
    python cli.py train     --manifest runs/pgd/manifest.json --out runs/replay
    python cli.py eval      --checkpoint runs/pgd/best.ckpt --dump-z runs/pgd/z
    python cli.py sweep     --config desk.toml --axis epsilon --values 1,2,4
    python cli.py memreport --config desk.toml --enforce-budget 4000000000

Config precedence: flags > --set section.key=value > --config file > defaults.
`--seed` is the single root seed: it sets both train.seed and data.seed.

Every train run writes manifest.json (resolved config + run id) next to its
RunLog and checkpoints; `train --manifest` replays it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from config import MODES, Settings, load_settings, settings_from_dict, with_train
from data import as_arrays, generate_ultramnist, load_dataset, load_idx, procedural_digits, save_dataset
from errors import ConfigError, PatchGDError
from memcost import MemoryReport, estimate_gd, estimate_patchgd, format_bytes, max_feasible_batch
from model_zoo import PatchGDModel, build_composite_model, build_patchgd_model, build_model
from tensor_core import default_dtype
from tensor_io import read_record
from trainer import (
    RunLog,
    RunStateTD,
    broadcast,
    broadcast_table,
    evaluate,
    fill_chunk,
    load_checkpoint,
    model_config,
    modeled_memory,
    new_run_state,
    prepare_images,
    train_run,
)
from zblock import ZBlock, z_dump

logger = logging.getLogger("patchgd")

SWEEP_AXES = {
    "sampling": "sampling_fraction",
    "max_sampled": "max_coverage",
    "epsilon": "grad_accum_steps",
    "patch_size": "patch_size",
}
SWEEP_HEADER = ["axis", "value", "sampling", "max_sampled", "epsilon", "patch_size", "accuracy", "qwk", "status"]
VAL_SEED_OFFSET = 1


# -----------------------------
# Manifest
# -----------------------------
def run_id_for(settings: Settings) -> str:
    payload = json.dumps(model_config(settings), sort_keys=True, ensure_ascii=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass
class RunManifest:
    run_id: str
    seed: int
    dataset_dir: str
    out_dir: str
    config: Dict[str, Any]

    @classmethod
    def from_settings(cls, settings: Settings) -> "RunManifest":
        return cls(
            run_id=run_id_for(settings),
            seed=settings.train.seed,
            dataset_dir=settings.run.dataset_dir,
            out_dir=settings.run.out_dir,
            config=settings.to_dict(),
        )

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**raw)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read run manifest {path}: {exc}") from exc

    def settings(self, *, out_dir: Optional[str] = None) -> Settings:
        settings = settings_from_dict(self.config)
        if out_dir is not None:
            settings = replace(settings, run=replace(settings.run, out_dir=out_dir))
        return settings


# -----------------------------
# Commands
# -----------------------------
def _digit_bank(settings: Settings):
    if settings.data.digit_source == "idx":
        return load_idx(settings.data.idx_images, settings.data.idx_labels)
    return procedural_digits()


def cmd_generate(settings: Settings, run: Optional[RunStateTD] = None) -> Path:
    """Write <dataset_dir>/train and <dataset_dir>/val."""
    settings.data.validate()
    d = settings.data
    root = Path(settings.run.dataset_dir)
    bank = _digit_bank(settings)
    splits = {"train": (d.train_count, d.seed), "val": (d.val_count, d.seed + VAL_SEED_OFFSET)}
    counts: Dict[str, np.ndarray] = {}
    for split, (count, seed) in splits.items():
        samples = generate_ultramnist(
            bank, count, d.image_size, (d.scale_min, d.scale_max), seed,
            workers=d.workers, progress=not settings.run.quiet,
        )
        save_dataset(samples, root / split)
        counts[split] = np.bincount([s.label for s in samples], minlength=10)
        broadcast(run, f"{split}: {count} samples of {d.image_size}×{d.image_size} written to {root / split}")
    broadcast_table(
        run,
        [("Label", 5, "right"), ("Train", 6, "right"), ("Val", 6, "right")],
        [(c, int(counts["train"][c]), int(counts["val"][c])) for c in range(10)],
        title="LABEL HISTOGRAM",
    )
    return root


def _load_split(settings: Settings, split: str):
    return as_arrays(load_dataset(Path(settings.run.dataset_dir) / split))


def cmd_train(
    settings: Settings,
    *,
    resume: Optional[str] = None,
    init_backbone: Optional[str] = None,
    run: Optional[RunStateTD] = None,
) -> RunStateTD:
    settings.validate()
    out = Path(settings.run.out_dir)
    manifest = RunManifest.from_settings(settings)
    run = run or new_run_state(settings.train.mode, run_id=manifest.run_id, out_dir=str(out))
    run["run_id"] = manifest.run_id

    train_set = _load_split(settings, "train")
    val_dir = Path(settings.run.dataset_dir) / "val"
    val_set = _load_split(settings, "val") if (val_dir / "index.csv").is_file() else None
    manifest.write(out / "manifest.json")
    broadcast(run, f"run {manifest.run_id}: manifest written to {out / 'manifest.json'}")
    return train_run(settings, train_set, val_set, out_dir=out, run=run, resume=resume, init_backbone=init_backbone)


def cmd_eval(
    settings: Settings,
    checkpoint: str,
    *,
    dataset_dir: Optional[str] = None,
    dump_z: Optional[str] = None,
    runlog: Optional[str] = None,
    run: Optional[RunStateTD] = None,
) -> Dict[str, float]:
    """
    Evaluate a checkpoint with the config stored in it. Metrics are broadcast
    and appended as an "eval" row to the RunLog next to the checkpoint.
    """
    _, meta = read_record(checkpoint, expect_kind="checkpoint")
    stored = settings_from_dict(meta.get("config", {}))
    cfg = stored.train
    split_dir = Path(dataset_dir) if dataset_dir else Path(settings.run.dataset_dir) / "val"
    X, y = as_arrays(load_dataset(split_dir))

    with default_dtype(cfg.dtype):
        model = build_model(cfg)
        load_checkpoint(checkpoint, model)
        Xp = prepare_images(X, cfg, downscale_factor=stored.data.downscale, pad_value=stored.data.pad_value)

        hook: Optional[Callable[[int, ZBlock], None]] = None
        if dump_z is not None:
            if not isinstance(model, PatchGDModel):
                raise ConfigError(f"--dump-z needs a patchgd checkpoint, this one is mode '{cfg.mode}'")
            z_dir = Path(dump_z)

            def _dump(offset: int, Z: ZBlock) -> None:
                for i in range(Z.batch):
                    z_dump(Z, z_dir / f"z_{offset + i:06d}.rec", image=i, meta={"label": int(y[offset + i])})

            hook = _dump

        res = evaluate(model, Xp, y, batch_size=cfg.batch_size, num_classes=cfg.num_classes,
                       pad_value=stored.data.pad_value,
                       chunk=fill_chunk(cfg, (Xp.shape[1], Xp.shape[2])), on_z=hook)
        peak = modeled_memory(model, cfg, (Xp.shape[1], Xp.shape[2])).peak_bytes

    log_path = Path(runlog) if runlog else Path(checkpoint).parent / "runlog.csv"
    log = RunLog.read_csv(log_path) if log_path.is_file() else RunLog()
    log.append(int(meta.get("epoch", -1)), "eval", loss=res["loss"], accuracy=res["accuracy"], qwk=res["qwk"],
               lr=0.0, peak_mem_bytes=peak, seconds=0.0)
    log.write_csv(log_path)

    metrics = {"loss": res["loss"], "accuracy": res["accuracy"], "qwk": res["qwk"], "count": int(len(y))}
    broadcast(run, f"eval {checkpoint} on {split_dir}: accuracy={res['accuracy']!r} qwk={res['qwk']!r} "
                   f"loss={res['loss']:.6f} (n={len(y)})")
    return metrics


def _sweep_settings(settings: Settings, axis: str, value: Any) -> Settings:
    key = SWEEP_AXES[axis]
    changes: Dict[str, Any] = {key: value}
    if axis == "sampling":
        changes["patches_per_inner"] = None
    if axis == "patch_size":
        changes["depth_spec"] = None
    sub = with_train(settings, **changes)
    out = Path(settings.run.out_dir) / f"{axis}={value}"
    return replace(sub, run=replace(sub.run, out_dir=str(out), quiet=True))


def _sweep_one(job: tuple) -> Dict[str, Any]:
    settings, axis, value = job
    row: Dict[str, Any] = {"axis": axis, "value": value}
    try:
        sub = _sweep_settings(settings, axis, value)
        t = sub.train
        row.update(sampling=t.sampling_fraction, max_sampled=t.max_coverage, epsilon=t.grad_accum_steps,
                   patch_size=t.patch_size)
        result = cmd_train(sub)
        log = RunLog.read_csv(Path(sub.run.out_dir) / "runlog.csv")
        best = [r for r in log.rows if r["split"] == "val" and r["epoch"] == result["best_epoch"]]
        src = best[0] if best else log.latest("train")
        row.update(accuracy=src["accuracy"], qwk=src["qwk"], status="ok")
    except Exception as exc:  # a failed sub-run is recorded, the sweep goes on
        row.setdefault("sampling", "")
        row.setdefault("max_sampled", "")
        row.setdefault("epsilon", "")
        row.setdefault("patch_size", "")
        row.update(accuracy="", qwk="", status=f"failed: {type(exc).__name__}: {exc}")
    return row


def parse_sweep_values(axis: str, text: str) -> List[Any]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis '{axis}', expected one of {sorted(SWEEP_AXES)}")
    cast = int if axis in ("epsilon", "patch_size") else float
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values for axis '{axis}': {text}") from exc
    if not values:
        raise ConfigError("sweep needs at least one value")
    return values


def cmd_sweep(
    settings: Settings,
    axis: str,
    values: Sequence[Any],
    *,
    workers: int = 1,
    run: Optional[RunStateTD] = None,
) -> List[Dict[str, Any]]:
    """One training run per axis value (same root seed), aggregated into sweep.csv."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis '{axis}', expected one of {sorted(SWEEP_AXES)}")
    jobs = [(settings, axis, v) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(job) for job in jobs]

    out = Path(settings.run.out_dir) / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    broadcast_table(
        run,
        [("Value", 8, "right"), ("Sampling", 8, "right"), ("MaxSamp", 7, "right"), ("Eps", 3, "right"),
         ("p", 4, "right"), ("Acc", 7, "right"), ("QWK", 7, "right"), ("Status", 24, "left")],
        [(r["value"], r["sampling"], r["max_sampled"], r["epsilon"], r["patch_size"], r["accuracy"], r["qwk"],
          r["status"]) for r in rows],
        title=f"SWEEP {axis}",
    )
    return rows


def _report_builders(settings: Settings) -> Dict[str, Callable[[int], MemoryReport]]:
    """Per-mode B -> MemoryReport at the configured image size (padded to p)."""
    cfg = settings.train
    p = cfg.patch_size
    side = -(-settings.data.image_size // p) * p
    m = side // p
    k = cfg.resolve_k(m, m)
    accumulate = cfg.gd_accum_steps > 1
    with default_dtype(cfg.dtype):
        pgd = build_patchgd_model(cfg)
        gd = build_composite_model(cfg, "gd")
        gd_ext = build_composite_model(cfg, "gd_extended")
    return {
        "gd": lambda b: estimate_gd(gd, (side, side), b, dtype=cfg.dtype, accumulate=accumulate),
        "gd_extended": lambda b: estimate_gd(gd_ext, (side, side), b, dtype=cfg.dtype, accumulate=accumulate),
        "patchgd": lambda b: estimate_patchgd(pgd.extractor, pgd.head, (side, side), p, k, b, dtype=cfg.dtype),
    }


def memory_reports(settings: Settings) -> Dict[str, MemoryReport]:
    """GD, GD-extended and PatchGD reports for the configured image size and batch."""
    return {mode: build(settings.train.batch_size) for mode, build in _report_builders(settings).items()}


def max_batches(settings: Settings, budget: int) -> Dict[str, int]:
    return {mode: max_feasible_batch(build, budget) for mode, build in _report_builders(settings).items()}


def cmd_memreport(
    settings: Settings,
    *,
    csv_path: Optional[str] = None,
    run: Optional[RunStateTD] = None,
) -> Dict[str, MemoryReport]:
    settings.validate()
    reports = memory_reports(settings)
    modes = ("gd", "gd_extended", "patchgd")
    components = list(reports["gd"].components())
    rows = [[name] + [reports[m].components()[name] for m in modes] for name in components]
    budget = settings.run.enforce_budget
    if budget is not None:
        feasible = max_batches(settings, budget)
        rows.append(["max_batch"] + [feasible[m] for m in modes])

    broadcast_table(
        run,
        [("Component", 18, "left"), ("GD", 12, "right"), ("GD-ext", 12, "right"), ("PatchGD", 12, "right")],
        [[r[0]] + [format_bytes(v) if r[0] != "max_batch" else v for v in r[1:]] for r in rows],
        title=f"MEMORY {settings.data.image_size}² p={settings.train.patch_size} B={settings.train.batch_size}",
    )
    if csv_path:
        path = Path(csv_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["component", *modes])
            writer.writerows(rows)
    return reports


# -----------------------------
# Argument parsing
# -----------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="PatchGD: patch-wise training of CNNs on large images")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_gen = sub.add_parser("generate", help="Generate the synthetic UltraMNIST-style dataset")
    p_train = sub.add_parser("train", help="Train a patchgd / gd / gd_extended model")
    p_train.add_argument("--resume", type=str, default=None, help="Checkpoint to continue from")
    p_train.add_argument("--init-backbone", type=str, default=None, help="Checkpoint whose θ1 (f.*) initialises the backbone")
    p_train.add_argument("--manifest", type=str, default=None, help="Replay the config of a run manifest")
    p_eval = sub.add_parser("eval", help="Evaluate a checkpoint (accuracy, QWK)")
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--dataset", type=str, default=None, help="Dataset split directory (default <dataset_dir>/val)")
    p_eval.add_argument("--dump-z", type=str, default=None, help="Write each image's filled Z block here")
    p_eval.add_argument("--runlog", type=str, default=None, help="RunLog to append to (default next to checkpoint)")
    p_sweep = sub.add_parser("sweep", help="One training run per value of an ablation axis")
    p_sweep.add_argument("--axis", type=str, required=True, choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--values", type=str, required=True, help="Comma-separated axis values")
    p_sweep.add_argument("--workers", type=int, default=1, help="Parallel sub-runs (processes)")
    p_mem = sub.add_parser("memreport", help="GD vs PatchGD modeled memory")
    p_mem.add_argument("--csv", type=str, default=None, help="Also write the report as CSV")

    for sp_ in (p_gen, p_train, p_eval, p_sweep, p_mem):
        sp_.add_argument("--config", type=str, default=None, help="TOML config file")
        sp_.add_argument("--seed", type=int, default=None, help="Root seed (train.seed and data.seed)")
        sp_.add_argument("--out", type=str, default=None, help="Output directory (run.out_dir)")
        sp_.add_argument("--mode", type=str, default=None, choices=MODES)
        sp_.add_argument("--enforce-budget", type=int, default=None, help="Modeled memory budget in bytes")
        sp_.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="Config override, e.g. train.patch_size=16 (repeatable)")
        sp_.add_argument("--log-level", type=str, default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        sp_.add_argument("--quiet", action="store_true", help="No progress bars")
    return parser


def settings_from_args(args: argparse.Namespace) -> Settings:
    flags = {
        "train.seed": args.seed,
        "data.seed": args.seed,
        "run.out_dir": args.out,
        "train.mode": args.mode,
        "run.enforce_budget": args.enforce_budget,
        "run.log_level": args.log_level,
        "run.quiet": True if args.quiet else None,
    }
    if getattr(args, "manifest", None):
        settings = RunManifest.read(Path(args.manifest)).settings(out_dir=args.out)
        if any(v is not None for k, v in flags.items() if k != "run.out_dir") or args.overrides or args.config:
            raise ConfigError("--manifest replays a run as recorded; only --out may be combined with it")
        return settings
    return load_settings(args.config, overrides=args.overrides, flags=flags)


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format="%(message)s", force=True)


def _dispatch(args: argparse.Namespace, settings: Settings, run: RunStateTD) -> None:
    commands: Dict[str, Callable[[], Any]] = {
        "generate": lambda: cmd_generate(settings, run),
        "train": lambda: cmd_train(settings, resume=args.resume, init_backbone=args.init_backbone, run=run),
        "eval": lambda: cmd_eval(settings, args.checkpoint, dataset_dir=args.dataset, dump_z=args.dump_z,
                                 runlog=args.runlog, run=run),
        "sweep": lambda: cmd_sweep(settings, args.axis, parse_sweep_values(args.axis, args.values),
                                   workers=args.workers, run=run),
        "memreport": lambda: cmd_memreport(settings, csv_path=args.csv, run=run),
    }
    commands[args.cmd]()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or "INFO")
    try:
        settings = settings_from_args(args)
        configure_logging(settings.run.log_level)
        run = new_run_state(settings.train.mode, out_dir=settings.run.out_dir)
        _dispatch(args, settings, run)
    except PatchGDError as exc:
        logger.error("error: %s", exc)
        return 2
    except OSError as exc:
        logger.error("io error: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
