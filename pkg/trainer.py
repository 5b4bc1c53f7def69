#!/usr/bin/env python3
"""
trainer.py — PatchGD outer/inner iterations, GD baselines, schedule, inference, checkpoints

One outer iteration over a mini-batch X[B]:
1) Z-filling: every cell of every image's Z = f_θ1(patch), no graph recorded
2) for j = 1..ζ:
     - each image draws the next k cells of its shuffled bag and refreshes them
       with gradient-tracked embeddings (z_update)
     - logits = g_θ2(Z), loss = batch-mean cross-entropy
     - dL/dθ1 → U1, dL/dθ2 → U2
     - if j % ε == 0: Adam step with U/ε, then U = 0
3) leftover U (ζ % ε != 0) is dropped unless train.flush_remainder is set

Run bookkeeping:
- RunStateTD: the single mutable dict of a training run (public_log included)
- broadcast(): every public message goes to the logger AND run["public_log"]
- RunLog: one CSV row per (epoch, split), fixed header

Training is single-threaded on the parameters; only batch assembly may run
ahead on a worker thread (prefetch).
"""

from __future__ import annotations

import csv
import logging
import queue
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, TypedDict, Union

import numpy as np
from tqdm import tqdm

from config import Settings, TrainConfig
from data import downscale, iterate_batches
from errors import ConfigError, LoadError, NonFiniteError, ValidationError
from memcost import MemoryReport, estimate_gd, estimate_patchgd, format_bytes
from metrics import accuracy, qwk
from model_zoo import CompositeModel, PatchGDModel, Params, build_model, head_forward, predict_proba
from patching import GridSpec, grid_for, new_sampler, sample_patches
from tensor_core import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    default_dtype,
    no_grad,
    softmax_cross_entropy,
    zero_grad,
)
from tensor_io import read_record, write_record
from zblock import ZBlock, z_fill_batch, z_read, z_update

logger = logging.getLogger("patchgd")

Model = Union[PatchGDModel, CompositeModel]
PathLike = Union[str, Path]

RUNLOG_HEADER = ["epoch", "split", "loss", "accuracy", "qwk", "lr", "peak_mem_bytes", "seconds"]
CHECKPOINT_KIND = "checkpoint"
PER_EPOCH_SPLITS = ("train", "val")   # "eval" rows are appended by later evaluations


# -----------------------------
# Run state + public log
# -----------------------------
class RunStateTD(TypedDict, total=False):
    run_id: str
    mode: str
    epoch: int                      # last finished epoch, -1 before the first
    optimizer_steps: int
    best_val_accuracy: float
    best_epoch: int
    peak_mem_bytes: int
    public_log: List[str]
    out_dir: str


def new_run_state(mode: str, *, run_id: str = "", out_dir: str = "") -> RunStateTD:
    return {
        "run_id": run_id,
        "mode": mode,
        "epoch": -1,
        "optimizer_steps": 0,
        "best_val_accuracy": -1.0,
        "best_epoch": -1,
        "peak_mem_bytes": 0,
        "public_log": [],
        "out_dir": out_dir,
    }


def broadcast(run: Optional[RunStateTD], msg: str, *, level: int = logging.INFO) -> None:
    """Public message: logged and stored centrally in the run state."""
    logger.log(level, msg)
    if run is not None:
        run["public_log"].append(msg)


def _fmt_cell(val: object, width: int, align: str = "left") -> str:
    s = f"{val:.4g}" if isinstance(val, float) else str(val)
    if len(s) > width:
        s = s[: width - 1] + "…"
    if align == "right":
        return s.rjust(width)
    if align == "center":
        return s.center(width)
    return s.ljust(width)


def broadcast_table(
    run: Optional[RunStateTD],
    headers: Sequence[Tuple[str, int, str]],
    rows: Iterable[Sequence[object]],
    *,
    title: str,
) -> str:
    """Fixed-width table, display only. headers: (name, width, align)."""
    head = " | ".join(_fmt_cell(name, w, "center") for name, w, _ in headers)
    sep = "-+-".join("-" * w for _, w, _ in headers)
    lines = [f"=== {title} ===", head, sep]
    for row in rows:
        lines.append(" | ".join(_fmt_cell(v, w, a) for v, (_, w, a) in zip(row, headers)))
    text = "\n".join(lines)
    broadcast(run, text)
    return text


# -----------------------------
# Gradient accumulation
# -----------------------------
@dataclass
class AccumulatorPair:
    """
    U1 (θ1, the "f.*" parameters) and U2 (everything else) buffers. `steps`
    counts add() calls; `weight` sums the weights passed to them.
    """

    u1: Dict[str, np.ndarray] = field(default_factory=dict)
    u2: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0
    weight: float = 0.0

    @classmethod
    def for_model(cls, model: Model) -> "AccumulatorPair":
        params = model.parameters()
        return cls(
            u1={k: np.zeros_like(p.data) for k, p in params.items() if k.startswith("f.")},
            u2={k: np.zeros_like(p.data) for k, p in params.items() if not k.startswith("f.")},
        )

    def add(self, grads: Dict[str, np.ndarray], weight: float = 1.0) -> None:
        for name, g in grads.items():
            target = self.u1 if name in self.u1 else self.u2
            target[name] += g
        self.steps += 1
        self.weight += weight

    def averaged(self, divisor: float) -> Dict[str, np.ndarray]:
        return {name: u / divisor for name, u in {**self.u1, **self.u2}.items()}

    def zero(self) -> None:
        for u in (*self.u1.values(), *self.u2.values()):
            u.fill(0.0)
        self.steps = 0
        self.weight = 0.0

    def is_zero(self) -> bool:
        return self.steps == 0 and all(not u.any() for u in (*self.u1.values(), *self.u2.values()))


def collect_grads(params: Params) -> Dict[str, np.ndarray]:
    """Read leaf gradients (zeros for parameters outside the graph) and clear them."""
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    zero_grad(params.values())
    return grads


def _checked_loss(loss: Tensor, where: str) -> float:
    value = float(loss.item())
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss ({value}) in {where}; aborting epoch", name="loss")
    return value


def to_nchw(X: np.ndarray) -> Tensor:
    """[B, M, N, C] (or [B, M, N]) images -> [B, C, M, N] tensor."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    return Tensor(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))


def pad_batch(X: np.ndarray, multiple: int, fill: float = 0.0) -> np.ndarray:
    """Pad [B, M, N, C] on the bottom/right so M and N divide by `multiple` (never resize)."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    pad_h = (-X.shape[1]) % multiple
    pad_w = (-X.shape[2]) % multiple
    if not pad_h and not pad_w:
        return X
    return np.pad(X, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)), mode="constant", constant_values=fill)


# -----------------------------
# PatchGD
# -----------------------------
@dataclass
class OuterStats:
    loss: float                    # mean over the inner iterations run
    logits: np.ndarray             # last inner iteration, [B, c]
    inner_steps: int
    optimizer_steps: int


def patchgd_outer_iteration(
    X: np.ndarray,
    y: np.ndarray,
    model: PatchGDModel,
    cfg: TrainConfig,
    adam: AdamState,
    lr: float,
    *,
    rng: Optional[random.Random] = None,
    acc: Optional[AccumulatorPair] = None,
    pad_value: float = 0.0,
) -> OuterStats:
    """One mini-batch step of PatchGD; θ1 and θ2 are updated in place."""
    p = cfg.patch_size
    images = pad_batch(X, p, pad_value)
    labels = np.asarray(y)
    rng = rng or random.Random(cfg.seed)
    acc = acc or AccumulatorPair.for_model(model)
    params = model.parameters()

    grid: GridSpec = grid_for(images[0], p)
    k = cfg.resolve_k(grid.m, grid.n)
    Z: ZBlock = z_fill_batch(list(images), model.extractor, p, embed_dim=model.extractor.embed_dim,
                             chunk=len(images) * k)
    samplers = [new_sampler(grid, max_coverage=cfg.max_coverage, seed=rng.getrandbits(32)) for _ in images]

    eps = cfg.grad_accum_steps
    losses: List[float] = []
    last_logits = np.zeros((len(images), cfg.num_classes))
    applied = 0
    for j in range(1, cfg.inner_iterations + 1):
        Z.begin_inner_iteration()
        refreshed = 0
        for b, image in enumerate(images):
            batch = sample_patches(image, k, samplers[b])
            if batch is None:
                continue
            z_update(Z, batch, model.extractor, image=b)
            refreshed += 1
        if refreshed == 0:
            if applied == 0:
                raise ConfigError(
                    f"patch sampler exhausted after {j - 1} inner iterations before the first update "
                    f"(k={k}, ε={eps}, μ={cfg.max_coverage}, grid {grid.m}×{grid.n}); "
                    f"lower train.grad_accum_steps or raise train.max_coverage"
                )
            break

        logits = head_forward(z_read(Z), model.head)
        loss = softmax_cross_entropy(logits, labels)
        losses.append(_checked_loss(loss, f"inner iteration {j}"))
        last_logits = logits.data.copy()
        backward(loss)
        acc.add(collect_grads(params))

        if j % eps == 0:
            adam_step(params, acc.averaged(eps), adam, lr)
            acc.zero()
            applied += 1

    applied += flush_accumulated(model, acc, adam, lr, apply=cfg.flush_remainder)

    return OuterStats(float(np.mean(losses)), last_logits, len(losses), applied)


# -----------------------------
# GD baselines
# -----------------------------
def gd_iteration(
    X: np.ndarray,
    y: np.ndarray,
    model: CompositeModel,
    adam: AdamState,
    lr: float,
    *,
    micro_batches: int = 1,
    acc: Optional[AccumulatorPair] = None,
    accum_steps: int = 1,
) -> OuterStats:
    """
    Forward/backward of one mini-batch. With micro_batches > 1 the batch is
    pushed through in chunks (same gradient). The per-sample gradient sum goes
    into `acc`; the optimizer steps once `accum_steps` mini-batches are in,
    on the mean over every accumulated sample.
    """
    images = pad_batch(X, model.backbone.stride)
    labels = np.asarray(y)
    B = len(labels)
    params = model.parameters()
    acc = acc if acc is not None else AccumulatorPair.for_model(model)
    total = {name: np.zeros_like(p.data) for name, p in params.items()}
    loss_sum = 0.0
    logits_out: List[np.ndarray] = []
    for chunk in np.array_split(np.arange(B), min(micro_batches, B)):
        logits = model(to_nchw(images[chunk]))
        loss = softmax_cross_entropy(logits, labels[chunk])
        loss_sum += _checked_loss(loss, "gd iteration") * len(chunk)
        logits_out.append(logits.data.copy())
        backward(loss)
        for name, g in collect_grads(params).items():
            total[name] += g * len(chunk)
    acc.add(total, weight=B)

    applied = 0
    if acc.steps >= accum_steps:
        adam_step(params, acc.averaged(acc.weight), adam, lr)
        acc.zero()
        applied = 1
    return OuterStats(loss_sum / B, np.concatenate(logits_out), 1, applied)


def flush_accumulated(model: Model, acc: AccumulatorPair, adam: AdamState, lr: float, *, apply: bool) -> int:
    """Apply (or drop) whatever is left in `acc`; returns the optimizer steps taken."""
    applied = 0
    if acc.steps and apply:
        adam_step(model.parameters(), acc.averaged(acc.weight), adam, lr)
        applied = 1
    acc.zero()
    return applied


def lr_schedule(
    epoch: float,
    peak: float = 1e-3,
    warmup: int = 2,
    total: int = 100,
    final_fraction: float = 0.5,
) -> float:
    """Linear warm-up from 0 to `peak`, then linear decay to peak·final_fraction at `total` (clamped after)."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    epoch = min(epoch, total)
    if warmup > 0 and epoch < warmup:
        return peak * epoch / warmup
    if total == warmup:
        return peak * final_fraction
    frac = (epoch - warmup) / (total - warmup)
    return peak + (peak * final_fraction - peak) * frac


# -----------------------------
# Inference / evaluation
# -----------------------------
def infer(
    X: np.ndarray,
    model: Model,
    *,
    pad_value: float = 0.0,
    chunk: Optional[int] = None,
    on_z: Optional[Callable[[ZBlock], None]] = None,
) -> np.ndarray:
    """
    Class probabilities. X is one image ([M,N] or [M,N,C]) -> [c], or a batch
    [B,M,N,C] -> [B,c]. PatchGD fills Z with the trained f_θ1, never samples.
    """
    X = np.asarray(X)
    channels = model.extractor.in_channels if isinstance(model, PatchGDModel) else model.backbone.in_channels
    single = X.ndim == 2 or (X.ndim == 3 and X.shape[-1] == channels)
    if single:
        X = X[None] if X.ndim == 3 else X[None, :, :, None]
    with no_grad():
        if isinstance(model, PatchGDModel):
            p = model.extractor.patch_size
            images = pad_batch(X, p, pad_value)
            Z = z_fill_batch(list(images), model.extractor, p, chunk=chunk)
            if on_z is not None:
                on_z(Z)
            logits = head_forward(Tensor(Z.values, dtype=Z.values.dtype), model.head)
        else:
            logits = model(to_nchw(pad_batch(X, model.backbone.stride, pad_value)))
    probs = predict_proba(logits)
    return probs[0] if single else probs


def evaluate(
    model: Model,
    X: np.ndarray,
    y: np.ndarray,
    *,
    batch_size: int = 16,
    num_classes: int = 10,
    pad_value: float = 0.0,
    chunk: Optional[int] = None,
    on_z: Optional[Callable[[int, ZBlock], None]] = None,
) -> Dict[str, Any]:
    """Full-image evaluation: mean loss, accuracy, QWK and the predictions. `chunk` bounds the patches per fill forward."""
    if len(y) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    probs_parts: List[np.ndarray] = []
    for start in range(0, len(y), batch_size):
        hook = None
        if on_z is not None:
            hook = lambda Z, offset=start: on_z(offset, Z)  # noqa: E731
        probs_parts.append(infer(X[start:start + batch_size], model, pad_value=pad_value, chunk=chunk, on_z=hook))
    probs = np.concatenate(probs_parts)
    labels = np.asarray(y, dtype=np.int64)
    picked = np.clip(probs[np.arange(len(labels)), labels], 1e-12, None)
    preds = probs.argmax(axis=1)
    return {
        "loss": float(-np.log(picked).mean()),
        "accuracy": accuracy(preds, labels),
        "qwk": qwk(preds, labels, num_classes),
        "preds": preds,
        "probs": probs,
    }


# -----------------------------
# Checkpoints
# -----------------------------
def save_checkpoint(
    path: PathLike,
    model: Model,
    adam: Optional[AdamState] = None,
    *,
    epoch: int = -1,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    tensors: Dict[str, np.ndarray] = {name: p.data for name, p in model.parameters().items()}
    info: Dict[str, Any] = {"epoch": epoch, "params": sorted(tensors), **(meta or {})}
    if adam is not None:
        for name in info["params"]:
            if name in adam.m:
                tensors[f"adam.m.{name}"] = adam.m[name]
                tensors[f"adam.v.{name}"] = adam.v[name]
        info["adam"] = {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    return write_record(path, tensors, kind=CHECKPOINT_KIND, meta=info)


def load_checkpoint(
    path: PathLike,
    model: Model,
    adam: Optional[AdamState] = None,
    *,
    backbone_only: bool = False,
) -> Dict[str, Any]:
    """
    Copy stored parameters into `model` (and Adam moments into `adam`).
    backbone_only loads the θ1 ("f.*") entries and leaves everything else as is.
    """
    tensors, meta = read_record(path, expect_kind=CHECKPOINT_KIND)
    params = model.parameters()
    wanted = {n: p for n, p in params.items() if n.startswith("f.")} if backbone_only else params

    for name, p in wanted.items():
        if name not in tensors:
            raise LoadError(f"{path}: checkpoint has no parameter '{name}'", name=name)
        arr = tensors[name]
        if arr.shape != p.shape:
            raise LoadError(f"{path}: parameter '{name}' has shape {arr.shape}, model expects {p.shape}", name=name)
        if arr.dtype != p.dtype:
            raise LoadError(f"{path}: parameter '{name}' stored as {arr.dtype}, model uses {p.dtype}", name=name)
    if not backbone_only:
        extra = sorted(set(meta.get("params", [])) - set(params))
        if extra:
            raise LoadError(f"{path}: checkpoint parameters not in model: {', '.join(extra)}", name=extra[0])

    for name, p in wanted.items():
        p.data[...] = tensors[name]
    if adam is not None and not backbone_only and "adam" in meta:
        adam.t = int(meta["adam"]["t"])
        for name in params:
            if f"adam.m.{name}" in tensors:
                adam.m[name] = tensors[f"adam.m.{name}"].copy()
                adam.v[name] = tensors[f"adam.v.{name}"].copy()
    return meta


# -----------------------------
# RunLog
# -----------------------------
class RunLog:
    """Per-epoch metrics; train/val rows appear once per epoch in epoch order, eval rows may follow."""

    def __init__(self) -> None:
        self.rows: List[Dict[str, Any]] = []

    def append(
        self,
        epoch: int,
        split: str,
        *,
        loss: float,
        accuracy: float,
        qwk: float,
        lr: float,
        peak_mem_bytes: int,
        seconds: float,
    ) -> None:
        per_epoch = [r for r in self.rows if r["split"] in PER_EPOCH_SPLITS]
        if split in PER_EPOCH_SPLITS and per_epoch and epoch < per_epoch[-1]["epoch"]:
            raise ValidationError(f"RunLog epoch {epoch} after epoch {per_epoch[-1]['epoch']}")
        if split in PER_EPOCH_SPLITS and any(r["epoch"] == epoch and r["split"] == split for r in self.rows):
            raise ValidationError(f"RunLog already has a '{split}' row for epoch {epoch}")
        self.rows.append({
            "epoch": int(epoch), "split": split, "loss": float(loss), "accuracy": float(accuracy),
            "qwk": float(qwk), "lr": float(lr), "peak_mem_bytes": int(peak_mem_bytes), "seconds": float(seconds),
        })

    def truncate_after(self, epoch: int) -> None:
        self.rows = [r for r in self.rows if r["epoch"] <= epoch]

    def latest(self, split: str) -> Optional[Dict[str, Any]]:
        matches = [r for r in self.rows if r["split"] == split]
        return matches[-1] if matches else None

    def write_csv(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RUNLOG_HEADER)
            for r in self.rows:
                writer.writerow([r["epoch"], r["split"], repr(r["loss"]), repr(r["accuracy"]), repr(r["qwk"]),
                                 repr(r["lr"]), r["peak_mem_bytes"], repr(r["seconds"])])
        return path

    @classmethod
    def read_csv(cls, path: PathLike) -> "RunLog":
        log = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != RUNLOG_HEADER:
                raise LoadError(f"{path}: RunLog header must be {','.join(RUNLOG_HEADER)}")
            for row in reader:
                epoch, split, loss, acc, kappa, lr, peak, secs = row
                log.append(int(epoch), split, loss=float(loss), accuracy=float(acc), qwk=float(kappa),
                           lr=float(lr), peak_mem_bytes=int(peak), seconds=float(secs))
        return log


# -----------------------------
# Prefetch
# -----------------------------
_DONE = object()


def prefetch(batches: Iterable[Any], depth: int = 2) -> Iterator[Any]:
    """Produce `batches` on a worker thread through a bounded queue; order is preserved."""
    if depth < 1:
        yield from batches
        return
    q: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def _producer() -> None:
        try:
            for item in batches:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except BaseException as exc:  # re-raised on the consumer side
            q.put(exc)

    worker = threading.Thread(target=_producer, name="prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=1.0)


# -----------------------------
# Full run
# -----------------------------
def model_config(settings: Settings) -> Dict[str, Any]:
    """train + data tables only; run paths never change what gets trained."""
    raw = settings.to_dict()
    return {"train": raw["train"], "data": raw["data"]}


def prepare_images(X: np.ndarray, cfg: TrainConfig, *, downscale_factor: int = 1, pad_value: float = 0.0) -> np.ndarray:
    """Mode-specific view of the images: GD modes may be downscaled; all modes pad to multiples of p."""
    if cfg.mode != "patchgd" and downscale_factor > 1:
        X = downscale(X, downscale_factor)
    return pad_batch(X, cfg.patch_size, pad_value)


def fill_chunk(cfg: TrainConfig, image_hw: Tuple[int, int]) -> int:
    """Patches per f_θ1 forward while filling Z: B·k, the chunk memcost budgets for."""
    p = cfg.patch_size
    m, n = -(-image_hw[0] // p), -(-image_hw[1] // p)
    return cfg.batch_size * cfg.resolve_k(m, n)


def modeled_memory(model: Model, cfg: TrainConfig, image_hw: Tuple[int, int]) -> MemoryReport:
    M, N = image_hw
    if isinstance(model, PatchGDModel):
        p = cfg.patch_size
        m, n = -(-M // p), -(-N // p)
        return estimate_patchgd(model.extractor, model.head, (M, N), p, cfg.resolve_k(m, n), cfg.batch_size,
                                dtype=cfg.dtype)
    return estimate_gd(model, (M, N), cfg.batch_size, dtype=cfg.dtype, accumulate=cfg.gd_accum_steps > 1)


def check_budget(report: MemoryReport, budget: Optional[int], mode: str) -> None:
    if budget is not None and report.peak_bytes > budget:
        raise ConfigError(
            f"mode '{mode}' needs a modeled peak of {report.peak_bytes} bytes ({format_bytes(report.peak_bytes)}), "
            f"over the enforced budget of {budget} bytes (memcost)"
        )


def _train_epoch(
    model: Model,
    cfg: TrainConfig,
    adam: AdamState,
    lr: float,
    X: np.ndarray,
    y: np.ndarray,
    epoch: int,
    run: RunStateTD,
    *,
    pad_value: float,
    progress: bool,
) -> Tuple[float, np.ndarray]:
    rng = random.Random(cfg.seed * 1_000_003 + epoch)
    acc = AccumulatorPair.for_model(model)
    losses: List[float] = []
    preds = np.zeros(len(y), dtype=np.int64)
    order_y: List[np.ndarray] = []
    batches = prefetch(iterate_batches(X, y, cfg.batch_size, seed=cfg.seed, epoch=epoch), depth=2)
    total = -(-len(y) // cfg.batch_size)
    filled = 0
    for xb, yb in tqdm(batches, total=total, desc=f"epoch {epoch}", unit="batch", leave=False, disable=not progress):
        if isinstance(model, PatchGDModel):
            stats = patchgd_outer_iteration(xb, yb, model, cfg, adam, lr, rng=rng, acc=acc, pad_value=pad_value)
        else:
            stats = gd_iteration(xb, yb, model, adam, lr, acc=acc, accum_steps=cfg.gd_accum_steps)
        run["optimizer_steps"] += stats.optimizer_steps
        losses.extend([stats.loss] * len(yb))
        preds[filled:filled + len(yb)] = stats.logits.argmax(axis=1)
        order_y.append(yb)
        filled += len(yb)
    if not isinstance(model, PatchGDModel):
        run["optimizer_steps"] += flush_accumulated(model, acc, adam, lr, apply=cfg.flush_remainder)
    return float(np.mean(losses)), np.stack([preds, np.concatenate(order_y)])


def train_run(
    settings: Settings,
    train_set: Tuple[np.ndarray, np.ndarray],
    val_set: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    *,
    out_dir: Optional[PathLike] = None,
    run: Optional[RunStateTD] = None,
    resume: Optional[PathLike] = None,
    init_backbone: Optional[PathLike] = None,
) -> RunStateTD:
    """
    Train for settings.train.epochs epochs. Writes runlog.csv, last.ckpt and
    best.ckpt (highest validation accuracy) under out_dir.
    """
    settings.validate()
    cfg = settings.train
    out = Path(out_dir or settings.run.out_dir)
    run = run or new_run_state(cfg.mode, out_dir=str(out))
    progress = not settings.run.quiet
    pad_value = settings.data.pad_value

    with default_dtype(cfg.dtype):
        model = build_model(cfg)
        adam = AdamState(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        adam.init_for(model.parameters())

        X = prepare_images(train_set[0], cfg, downscale_factor=settings.data.downscale, pad_value=pad_value)
        y = np.asarray(train_set[1], dtype=np.int64)
        if len(y) == 0:
            raise ValidationError("training set is empty")
        Xv = yv = None
        if val_set is not None and len(val_set[1]):
            Xv = prepare_images(val_set[0], cfg, downscale_factor=settings.data.downscale, pad_value=pad_value)
            yv = np.asarray(val_set[1], dtype=np.int64)

        report = modeled_memory(model, cfg, (X.shape[1], X.shape[2]))
        check_budget(report, settings.run.enforce_budget, cfg.mode)
        run["peak_mem_bytes"] = report.peak_bytes
        if isinstance(model, PatchGDModel):
            m, n = X.shape[1] // cfg.patch_size, X.shape[2] // cfg.patch_size
            for note in cfg.grid_warnings(m, n):
                broadcast(run, f"[warn] {note}", level=logging.WARNING)

        log = RunLog()
        start_epoch = 0
        if init_backbone is not None:
            load_checkpoint(init_backbone, model, backbone_only=True)
            broadcast(run, f"θ1 initialised from {init_backbone}")
        if resume is not None:
            meta = load_checkpoint(resume, model, adam)
            start_epoch = int(meta["epoch"]) + 1
            run["best_val_accuracy"] = float(meta.get("best_val_accuracy", -1.0))
            run["best_epoch"] = int(meta.get("best_epoch", -1))
            run["optimizer_steps"] = int(meta.get("optimizer_steps", 0))
            if (out / "runlog.csv").is_file():
                log = RunLog.read_csv(out / "runlog.csv")
                log.truncate_after(start_epoch - 1)
            broadcast(run, f"resumed from {resume} at epoch {start_epoch}")

        broadcast(run, f"training mode={cfg.mode} epochs={cfg.epochs} B={cfg.batch_size} "
                       f"modeled peak={format_bytes(report.peak_bytes)}")
        ckpt_meta = {"config": model_config(settings), "run_id": run.get("run_id", "")}

        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_schedule(epoch, cfg.lr, cfg.warmup_epochs, cfg.schedule_total_epochs, cfg.final_lr_fraction)
            train_loss, (preds, labels) = _train_epoch(model, cfg, adam, lr, X, y, epoch, run,
                                                       pad_value=pad_value, progress=progress)
            seconds = 0.0 if cfg.deterministic_log else time.perf_counter() - t0
            log.append(epoch, "train", loss=train_loss, accuracy=accuracy(preds, labels),
                       qwk=qwk(preds, labels, cfg.num_classes), lr=lr,
                       peak_mem_bytes=report.peak_bytes, seconds=seconds)
            summary = f"epoch {epoch}: lr={lr:.3g} train_loss={train_loss:.4f}"

            improved = False
            if Xv is not None:
                res = evaluate(model, Xv, yv, batch_size=cfg.batch_size, num_classes=cfg.num_classes,
                               pad_value=pad_value, chunk=fill_chunk(cfg, (Xv.shape[1], Xv.shape[2])))
                seconds = 0.0 if cfg.deterministic_log else time.perf_counter() - t0
                log.append(epoch, "val", loss=res["loss"], accuracy=res["accuracy"], qwk=res["qwk"], lr=lr,
                           peak_mem_bytes=report.peak_bytes, seconds=seconds)
                summary += f" val_acc={res['accuracy']:.4f} val_qwk={res['qwk']:.4f}"
                if res["accuracy"] > run["best_val_accuracy"]:
                    run["best_val_accuracy"] = res["accuracy"]
                    run["best_epoch"] = epoch
                    improved = True

            run["epoch"] = epoch
            meta = {**ckpt_meta, "best_val_accuracy": run["best_val_accuracy"], "best_epoch": run["best_epoch"],
                    "optimizer_steps": run["optimizer_steps"]}
            save_checkpoint(out / "last.ckpt", model, adam, epoch=epoch, meta=meta)
            if improved:
                save_checkpoint(out / "best.ckpt", model, adam, epoch=epoch, meta=meta)
            log.write_csv(out / "runlog.csv")
            broadcast(run, summary)

        rows = [(r["epoch"], r["split"], r["loss"], r["accuracy"], r["qwk"], r["lr"]) for r in log.rows]
        broadcast_table(
            run,
            [("Epoch", 5, "right"), ("Split", 5, "left"), ("Loss", 8, "right"),
             ("Acc", 7, "right"), ("QWK", 7, "right"), ("LR", 9, "right")],
            rows,
            title="RUN LOG",
        )
    return run
