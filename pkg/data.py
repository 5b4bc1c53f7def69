#!/usr/bin/env python3
"""
data.py — UltraMNIST-style synthetic dataset, IDX digit ingestion, dataset IO

A sample is a black M×M canvas with 3–5 white digits of widely varying size.
Its label is the sum of the placed digit classes (always < 10).

Generation rules:
- labels are stratified: label i % 10 for sample i, then shuffled once
  (per-class counts differ by at most 1 for any count)
- the digit classes of a sample are a random composition of its label
  into n ∈ {3, 4, 5} non-negative parts
- every sample draws from its own sub-seed derived from (seed, index), so
  serial and threaded generation agree bit-for-bit
- digits are placed by rejection sampling with no bounding-box overlap;
  a layout that cannot be completed is redrawn from a fresh sub-seed

Digit sources:
- load_idx(): MNIST IDX files (magic 0x00000803 images / 0x00000801 labels)
- procedural_digits(): 10 stroke glyphs rasterised at 28×28, no download

On disk a dataset split is `index.csv` (id,label,seed) plus one binary
tensor record per sample (see tensor_io).
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from skimage.draw import line as draw_line
from skimage.morphology import dilation, disk
from skimage.transform import downscale_local_mean, resize
from tqdm import tqdm

from errors import LoadError, ParseError, ValidationError
from tensor_io import read_record, write_record

PathLike = Union[str, Path]
Box = Tuple[int, int, int, int]   # (row, col, height, width)

GLYPH_SIZE = 28
DIGITS_PER_SAMPLE = (3, 4, 5)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
INDEX_FILE = "index.csv"
INDEX_HEADER = ["id", "label", "seed"]
RECORD_KIND = "ultrasample"

_PLACEMENT_TRIES = 100
_MAX_LAYOUTS = 200
_LABEL_STREAM = 0x1ABE1


# -----------------------------
# Types
# -----------------------------
@dataclass
class DigitBank:
    images: np.ndarray      # [K, h, w] float32 in [0, 1]
    labels: np.ndarray      # [K] int64 in 0..9
    source: str = "procedural"

    def __post_init__(self) -> None:
        if self.images.ndim != 3:
            raise ValidationError(f"digit bank images must be [K,h,w], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValidationError(f"digit bank has {len(self.images)} images but {len(self.labels)} labels")
        missing = sorted(set(range(10)) - set(np.unique(self.labels).tolist()))
        if missing:
            raise ValidationError(f"digit bank has no exemplar for classes {missing}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("digit bank pixel values must be normalised to [0, 1]")
        self._by_class: Dict[int, np.ndarray] = {c: np.flatnonzero(self.labels == c) for c in range(10)}

    def __len__(self) -> int:
        return len(self.labels)

    def exemplars(self, digit: int) -> np.ndarray:
        return self._by_class[digit]


@dataclass
class UltraSample:
    image: np.ndarray                                  # [M, M, 1] float32
    label: int
    seed: int                                          # per-sample sub-seed
    digits: List[int] = field(default_factory=list)
    scales: List[int] = field(default_factory=list)    # placed side length in px
    boxes: List[Box] = field(default_factory=list)
    attempt: int = 0                                   # layout redraws needed

    def provenance(self) -> Dict[str, object]:
        return {
            "label": self.label,
            "seed": self.seed,
            "digits": list(self.digits),
            "scales": list(self.scales),
            "boxes": [list(b) for b in self.boxes],
            "attempt": self.attempt,
        }


# -----------------------------
# IDX ingestion
# -----------------------------
def _parse_idx(blob: bytes, magic: int, ndim: int, source: str) -> np.ndarray:
    if len(blob) < 4:
        raise ParseError(f"{source}: file too short for an IDX magic number", offset=len(blob))
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise ParseError(f"{source}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise ParseError(f"{source}: truncated IDX header ({ndim} dimension sizes)", offset=len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    available = len(blob) - header_end
    if available < expected:
        raise ParseError(
            f"{source}: truncated IDX payload, dims {dims} need {expected} bytes, found {available}",
            offset=len(blob),
        )
    if available > expected:
        raise ParseError(f"{source}: {available - expected} trailing bytes after IDX payload", offset=header_end + expected)
    return np.frombuffer(blob, dtype=np.uint8, count=expected, offset=header_end).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike) -> DigitBank:
    """Parse an MNIST image/label IDX pair into a DigitBank with pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _parse_idx(images_path.read_bytes(), IDX_IMAGES_MAGIC, 3, str(images_path))
    labels = _parse_idx(labels_path.read_bytes(), IDX_LABELS_MAGIC, 1, str(labels_path))
    if len(images) != len(labels):
        raise ValidationError(f"IDX count mismatch: {len(images)} images vs {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise ValidationError(f"IDX labels must be digits 0..9, found {int(labels.max())}")
    return DigitBank(images.astype(np.float32) / 255.0, labels.astype(np.int64), source="idx_files")


# -----------------------------
# Procedural glyphs
# -----------------------------
# seven-segment style strokes on a 28×28 canvas, as (r0, c0, r1, c1)
_SEGMENTS: Dict[str, Tuple[int, int, int, int]] = {
    "top": (4, 8, 4, 19),
    "mid": (14, 8, 14, 19),
    "bot": (23, 8, 23, 19),
    "ul": (4, 8, 14, 8),
    "ur": (4, 19, 14, 19),
    "ll": (14, 8, 23, 8),
    "lr": (14, 19, 23, 19),
    "diag": (4, 19, 23, 10),
    "stem": (4, 14, 23, 14),
}

_GLYPHS: Dict[int, Tuple[str, ...]] = {
    0: ("top", "bot", "ul", "ur", "ll", "lr"),
    1: ("stem",),
    2: ("top", "ur", "mid", "ll", "bot"),
    3: ("top", "ur", "mid", "lr", "bot"),
    4: ("ul", "mid", "ur", "lr"),
    5: ("top", "ul", "mid", "lr", "bot"),
    6: ("top", "ul", "mid", "ll", "lr", "bot"),
    7: ("top", "diag"),
    8: ("top", "mid", "bot", "ul", "ur", "ll", "lr"),
    9: ("top", "ul", "ur", "mid", "lr", "bot"),
}


def _rasterise(segments: Sequence[str]) -> np.ndarray:
    canvas = np.zeros((GLYPH_SIZE, GLYPH_SIZE), dtype=bool)
    for name in segments:
        rr, cc = draw_line(*_SEGMENTS[name])
        canvas[rr, cc] = True
    return dilation(canvas, disk(1)).astype(np.float32)


def procedural_digits() -> DigitBank:
    """One deterministic stroke glyph per class, 28×28, values in {0, 1}."""
    images = np.stack([_rasterise(_GLYPHS[d]) for d in range(10)])
    return DigitBank(images, np.arange(10, dtype=np.int64), source="procedural")


# -----------------------------
# Generation
# -----------------------------
def stratified_labels(count: int, seed: int) -> np.ndarray:
    labels = np.arange(count, dtype=np.int64) % 10
    np.random.default_rng([seed, _LABEL_STREAM]).shuffle(labels)
    return labels


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def compose_label(label: int, rng: np.random.Generator) -> List[int]:
    """Random split of `label` into 3–5 non-negative digit classes (stars and bars)."""
    n = int(rng.choice(DIGITS_PER_SAMPLE))
    bars = np.sort(rng.choice(label + n - 1, size=n - 1, replace=False))
    edges = np.concatenate(([-1], bars, [label + n - 1]))
    parts = (np.diff(edges) - 1).astype(int).tolist()
    rng.shuffle(parts)
    return parts


def _overlaps(box: Box, placed: Sequence[Box]) -> bool:
    r, c, h, w = box
    for pr, pc, ph, pw in placed:
        if r < pr + ph and pr < r + h and c < pc + pw and pc < c + w:
            return True
    return False


def _try_layout(
    bank: DigitBank,
    digits: Sequence[int],
    image_size: int,
    scale_range: Tuple[float, float],
    rng: np.random.Generator,
) -> Optional[Tuple[np.ndarray, List[int], List[Box]]]:
    lo = max(4, int(round(scale_range[0] * image_size)))
    hi = max(lo, int(round(scale_range[1] * image_size)))
    canvas = np.zeros((image_size, image_size), dtype=np.float32)
    scales: List[int] = []
    boxes: List[Box] = []
    for d in digits:
        side = int(rng.integers(lo, hi + 1))
        box = None
        for _ in range(_PLACEMENT_TRIES):
            r = int(rng.integers(0, image_size - side + 1))
            c = int(rng.integers(0, image_size - side + 1))
            if not _overlaps((r, c, side, side), boxes):
                box = (r, c, side, side)
                break
        if box is None:
            return None
        glyph = bank.images[int(rng.choice(bank.exemplars(d)))]
        scaled = resize(glyph, (side, side), order=1, anti_aliasing=side < glyph.shape[0], preserve_range=True)
        canvas[r:r + side, c:c + side] = np.clip(scaled, 0.0, 1.0)
        scales.append(side)
        boxes.append(box)
    return canvas, scales, boxes


def make_sample(
    bank: DigitBank,
    label: int,
    image_size: int,
    scale_range: Tuple[float, float],
    seed: int,
) -> UltraSample:
    """Build one sample; a failed layout is redrawn from sub-seed (seed, attempt)."""
    lo, hi = scale_range
    for attempt in range(_MAX_LAYOUTS):
        rng = np.random.default_rng([seed, attempt])
        digits = compose_label(label, rng)
        # shrink the upper bound on repeated failure so dense layouts still terminate
        shrink = max(lo, hi * 0.9 ** attempt)
        layout = _try_layout(bank, digits, image_size, (lo, shrink), rng)
        if layout is None:
            continue
        canvas, scales, boxes = layout
        return UltraSample(canvas[:, :, None], int(label), seed, list(digits), scales, boxes, attempt)
    raise ValidationError(
        f"could not place digits without overlap on a {image_size}×{image_size} canvas "
        f"after {_MAX_LAYOUTS} layouts (scale range {scale_range})"
    )


def generate_ultramnist(
    bank: DigitBank,
    count: int,
    image_size: int = 128,
    scale_range: Tuple[float, float] = (0.05, 0.6),
    seed: int = 0,
    *,
    workers: int = 1,
    progress: bool = False,
) -> List[UltraSample]:
    """
    `count` samples, deterministic given `seed`; `scale_range` is the digit side
    as a fraction of M. `workers` > 1 generates on a thread pool with the same output.
    """
    lo, hi = scale_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ValidationError(f"scale_range must satisfy 0 < min <= max <= 1 (fraction of M), got {scale_range}")
    if count < 0:
        raise ValidationError(f"count must be >= 0, got {count}")
    if image_size < 8:
        raise ValidationError(f"image_size must be >= 8, got {image_size}")
    labels = stratified_labels(count, seed)

    def build(i: int) -> UltraSample:
        return make_sample(bank, int(labels[i]), image_size, (lo, hi), sample_seed(seed, i))

    bar = tqdm(total=count, desc="generate", unit="img", disable=not progress)
    if workers <= 1:
        samples = []
        for i in range(count):
            samples.append(build(i))
            bar.update(1)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = []
            for sample in pool.map(build, range(count)):
                samples.append(sample)
                bar.update(1)
    bar.close()
    return samples


# -----------------------------
# Arrays / batches
# -----------------------------
def as_arrays(samples: Sequence[UltraSample]) -> Tuple[np.ndarray, np.ndarray]:
    """([n, M, M, 1] float32 images, [n] int64 labels)"""
    if not samples:
        raise ValidationError("dataset is empty")
    X = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def downscale(X: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean reduce [n, M, N, C] images by `factor` along both spatial axes."""
    if factor == 1:
        return X
    if X.shape[1] % factor or X.shape[2] % factor:
        raise ValidationError(f"downscale factor {factor} must divide image size {X.shape[1]}×{X.shape[2]}")
    return downscale_local_mean(X, (1, factor, factor, 1)).astype(X.dtype, copy=False)


def iterate_batches(
    X: np.ndarray,
    y: np.ndarray,
    batch_size: int,
    *,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in a seeded per-epoch order; the last batch may be short."""
    order = np.arange(len(y))
    if shuffle:
        np.random.default_rng([seed, epoch]).shuffle(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield X[idx], y[idx]


# -----------------------------
# Dataset IO
# -----------------------------
def _record_name(sample_id: int) -> str:
    return f"sample_{sample_id:06d}.rec"


def save_dataset(samples: Sequence[UltraSample], directory: PathLike) -> Path:
    """Write one record per sample plus `index.csv`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / INDEX_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_HEADER)
        for i, s in enumerate(samples):
            write_record(directory / _record_name(i), {"image": s.image}, kind=RECORD_KIND, meta=s.provenance())
            writer.writerow([i, s.label, s.seed])
    return directory


def load_dataset(directory: PathLike) -> List[UltraSample]:
    directory = Path(directory)
    index_path = directory / INDEX_FILE
    if not index_path.is_file():
        raise LoadError(f"dataset index not found: {index_path}")
    with open(index_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != INDEX_HEADER:
        raise LoadError(f"{index_path}: header must be {','.join(INDEX_HEADER)}")

    samples: List[UltraSample] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(INDEX_HEADER):
            raise LoadError(f"{index_path}:{line_no}: partial index row {row}")
        try:
            sample_id, label, seed = (int(v) for v in row)
        except ValueError as exc:
            raise LoadError(f"{index_path}:{line_no}: non-integer field in {row}") from exc
        if sample_id != len(samples):
            raise LoadError(f"{index_path}:{line_no}: expected id {len(samples)}, found {sample_id}")
        path = directory / _record_name(sample_id)
        if not path.is_file():
            raise LoadError(f"missing record for sample {sample_id}: {path}", name=str(sample_id))
        tensors, meta = read_record(path, expect_kind=RECORD_KIND)
        if meta.get("label") != label or meta.get("seed") != seed:
            raise LoadError(
                f"record {path.name} (label={meta.get('label')}, seed={meta.get('seed')}) "
                f"disagrees with index (label={label}, seed={seed})",
                name=str(sample_id),
            )
        samples.append(
            UltraSample(
                image=tensors["image"],
                label=label,
                seed=seed,
                digits=list(meta.get("digits", [])),
                scales=list(meta.get("scales", [])),
                boxes=[tuple(b) for b in meta.get("boxes", [])],
                attempt=int(meta.get("attempt", 0)),
            )
        )

    on_disk = len(list(directory.glob("sample_*.rec")))
    if on_disk != len(samples):
        raise LoadError(f"{index_path} lists {len(samples)} samples but {on_disk} records exist (partial index)")
    return samples
