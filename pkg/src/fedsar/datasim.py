"""Synthetic SAR-like chips, Dirichlet label-skew partitioning and the
server's probe set."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from fedsar.errors import ConfigurationError, ContractViolation
from fedsar.numerics import RngStream, _as_generator, sample_speckle

I_MAX = 4.0
BACKGROUND = 0.15
_TEMPLATE_SEED = 0x5A12C41F


@dataclass
class SarChip:
    grid: np.ndarray
    label: int


@dataclass
class ChipSet:
    """A stack of chips ``images[n, H, W]`` with integer ``labels[n]``."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[0] != self.labels.shape[0]:
            raise ContractViolation(
                f"images {self.images.shape} and labels {self.labels.shape} do not line up"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "ChipSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ChipSet(self.images[idx], self.labels[idx])

    def copy(self) -> "ChipSet":
        return ChipSet(self.images.copy(), self.labels.copy())


def _box(grid, rows, cols, cy, cx, hy, hx, level):
    inside = (np.abs(rows - cy) <= hy) & (np.abs(cols - cx) <= hx)
    grid[inside] = np.maximum(grid[inside], level)


def _ellipse(grid, rows, cols, cy, cx, ry, rx, level):
    inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    grid[inside] = np.maximum(grid[inside], level)


def _draw_base(cls, grid, rows, cols):
    """Ten fixed target layouts; coordinates are fractions of the chip."""
    h, w = grid.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    u = h / 32.0
    if cls == 0:  # large square
        _box(grid, rows, cols, cy, cx, 6 * u, 6 * u, 2.0)
    elif cls == 1:  # horizontal hull
        _ellipse(grid, rows, cols, cy, cx, 3.5 * u, 11 * u, 2.6)
    elif cls == 2:  # vertical bar
        _box(grid, rows, cols, cy, cx, 11 * u, 2 * u, 2.6)
    elif cls == 3:  # two bright blocks
        _box(grid, rows, cols, cy, cx - 6 * u, 2.5 * u, 2.5 * u, 3.0)
        _box(grid, rows, cols, cy, cx + 6 * u, 2.5 * u, 2.5 * u, 3.0)
    elif cls == 4:  # four point scatterers
        for dy in (-6, 6):
            for dx in (-6, 6):
                _box(grid, rows, cols, cy + dy * u, cx + dx * u, 1 * u, 1 * u, 3.4)
    elif cls == 5:  # hollow frame
        _box(grid, rows, cols, cy, cx, 9 * u, 9 * u, 2.2)
        inner = (np.abs(rows - cy) <= 6 * u) & (np.abs(cols - cx) <= 6 * u)
        grid[inner] = BACKGROUND
    elif cls == 6:  # broad dim plate
        _box(grid, rows, cols, cy, cx, 8 * u, 12 * u, 1.0)
    elif cls == 7:  # cross
        _box(grid, rows, cols, cy, cx, 10 * u, 1.5 * u, 2.4)
        _box(grid, rows, cols, cy, cx, 1.5 * u, 10 * u, 2.4)
    elif cls == 8:  # diagonal streak
        inside = (np.abs((rows - cy) - (cols - cx)) <= 2 * u) & (np.abs(rows - cy) <= 10 * u)
        grid[inside] = np.maximum(grid[inside], 2.6)
    elif cls == 9:  # compact bright core with a dim halo
        _ellipse(grid, rows, cols, cy, cx, 7 * u, 7 * u, 0.9)
        _ellipse(grid, rows, cols, cy, cx, 2.5 * u, 2.5 * u, 3.6)


@lru_cache(maxsize=None)
def class_template(cls: int, height: int = 32, width: int = 32) -> np.ndarray:
    """Noise-free intensity layout for one class.

    Classes 0-9 have fixed hand-drawn layouts (squares, bars, point
    scatterers, frames...). Higher classes get 2-4 random rectangles or
    ellipses from a fixed per-class stream, independent of the experiment
    seed.
    """
    grid = np.full((height, width), BACKGROUND)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    if cls < 10:
        _draw_base(int(cls), grid, rows, cols)
    else:
        gen = RngStream(_TEMPLATE_SEED, ("template", int(cls))).generator()
        for _ in range(int(gen.integers(2, 5))):
            cy = gen.uniform(0.25, 0.75) * height
            cx = gen.uniform(0.25, 0.75) * width
            ry = gen.uniform(0.06, 0.22) * height
            rx = gen.uniform(0.06, 0.22) * width
            level = gen.uniform(1.2, 2.8)
            if gen.random() < 0.5:
                _box(grid, rows, cols, cy, cx, ry, rx, level)
            else:
                _ellipse(grid, rows, cols, cy, cx, ry, rx, level)
    grid.setflags(write=False)
    return grid


def generate_chip(cls: int, looks: float, rng, num_classes: int = 10,
                  height: int = 32, width: int = 32, jitter: int = 1) -> SarChip:
    """Template for ``cls`` shifted by up to ``jitter`` pixels, times speckle."""
    if not 0 <= cls < num_classes:
        raise ContractViolation(f"class {cls} outside [0, {num_classes})")
    gen = _as_generator(rng)
    template = class_template(int(cls), height, width)
    dy, dx = gen.integers(-jitter, jitter + 1, size=2) if jitter else (0, 0)
    shifted = np.roll(template, (int(dy), int(dx)), axis=(0, 1))
    speckle = sample_speckle(height, width, looks, gen)
    return SarChip(np.clip(shifted * speckle, 0.0, I_MAX), int(cls))


def generate_chips(labels, looks: float, stream: RngStream, num_classes: int = 10,
                   height: int = 32, width: int = 32) -> ChipSet:
    """One chip per label, chip ``i`` drawn from ``stream.child(i)``."""
    labels = np.asarray(labels, dtype=np.int64)
    images = np.empty((labels.size, height, width))
    for i, c in enumerate(labels):
        images[i] = generate_chip(int(c), looks, stream.child(i), num_classes, height, width).grid
    return ChipSet(images, labels)


def make_dataset(per_class: int, looks: float, stream: RngStream, num_classes: int = 10,
                 height: int = 32, width: int = 32) -> ChipSet:
    labels = np.repeat(np.arange(num_classes), per_class)
    return generate_chips(labels, looks, stream, num_classes, height, width)


def build_probe_set(size: int, looks: float, stream: RngStream, num_classes: int = 10,
                    height: int = 32, width: int = 32) -> ChipSet:
    """Server-held clean chips, classes assigned round-robin."""
    if size < num_classes:
        raise ConfigurationError(f"probe set size {size} is smaller than the class count {num_classes}")
    labels = np.arange(size) % num_classes
    return generate_chips(labels, looks, stream, num_classes, height, width)


# --------------------------------------------------------------------------
# Partitioning


@dataclass
class Partition:
    shards: list[np.ndarray]

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def sizes(self) -> list[int]:
        return [int(s.size) for s in self.shards]


def dirichlet_partition(labels, num_clients: int, alpha: float, min_per_client: int,
                        rng) -> Partition:
    """Label-skewed split: per class, client shares ~ Dirichlet(alpha)."""
    labels = np.asarray(labels, dtype=np.int64)
    if num_clients < 2:
        raise ConfigurationError(f"need at least 2 clients, got {num_clients}")
    if not alpha > 0:
        raise ConfigurationError(f"Dirichlet alpha must be > 0, got {alpha}")
    if min_per_client * num_clients > labels.size:
        raise ConfigurationError(
            f"min_per_client={min_per_client} is infeasible for {labels.size} samples "
            f"over {num_clients} clients"
        )
    gen = _as_generator(rng)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        gen.shuffle(idx)
        shares = gen.dirichlet(np.full(num_clients, alpha))
        cuts = np.floor(np.cumsum(shares)[:-1] * idx.size).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(int(i) for i in part)

    # Top up deficient clients from the largest shard, taking from its
    # most frequent class first.
    while True:
        sizes = [len(b) for b in buckets]
        short = [i for i in range(num_clients) if sizes[i] < min_per_client]
        if not short:
            break
        needy = min(short, key=lambda i: (sizes[i], i))
        donor = max(range(num_clients), key=lambda i: (sizes[i], -i))
        donor_labels = labels[buckets[donor]]
        counts = np.bincount(donor_labels)
        top_class = int(np.argmax(counts))
        pos = max(j for j, i in enumerate(buckets[donor]) if labels[i] == top_class)
        buckets[needy].append(buckets[donor].pop(pos))

    return Partition([np.array(sorted(b), dtype=np.int64) for b in buckets])


# --------------------------------------------------------------------------
# Export


def export_jsonl(chips: ChipSet, path) -> Path:
    """Write one JSON object per chip: label, height, width, row-major values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for img, label in zip(chips.images, chips.labels):
            rec = {
                "label": int(label),
                "height": int(img.shape[0]),
                "width": int(img.shape[1]),
                "values": [float(v) for v in img.ravel()],
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def load_jsonl(path) -> ChipSet:
    images, labels = [], []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            images.append(np.asarray(rec["values"], dtype=np.float64).reshape(rec["height"], rec["width"]))
            labels.append(rec["label"])
    return ChipSet(np.stack(images), np.asarray(labels))
