"""Supervision targets from a ground-truth mask.

A target is an :class:`EvidenceAnchor`: a key slice chosen by Top-K
visibility sampling, plus one tight box per connected component of the mask
on that slice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from medvol.volmask import SliceMask, VoxelMask, slice_of


class EmptyTargetError(ValueError):
    """The ground truth has no foreground to derive a target from."""


@dataclass(frozen=True, order=True)
class Box2D:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``; ``x`` indexes columns."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def within(self, height: int, width: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def sort_key(self) -> tuple[int, int, int, int]:
        return (self.y0, self.x0, self.y1, self.x1)


@dataclass(frozen=True)
class EvidenceAnchor:
    key_slice: int
    boxes: tuple[Box2D, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if isinstance(self.key_slice, bool) or self.key_slice < 0:
            raise ValueError(f"invalid key slice {self.key_slice!r}")
        object.__setattr__(self, "key_slice", int(self.key_slice))

    def validate(self, dims: Sequence[int]) -> None:
        """Raise ``ValueError`` unless every part of the anchor fits a ``(H, W, D)`` grid."""
        h, w, d = dims
        if not 0 <= self.key_slice < d:
            raise ValueError(f"key slice {self.key_slice} outside [0, {d})")
        for box in self.boxes:
            if not box.within(h, w):
                raise ValueError(f"box {box.as_list()} outside {w}x{h} slice")


@dataclass(frozen=True)
class TopKConfig:
    k: int = 3
    seed: int = 0
    connectivity: int = 8
    min_area: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")


def rank_slices_by_visibility(mask: VoxelMask | Sequence[int]) -> list[tuple[int, int]]:
    """All slices as ``(t, area)``, largest area first, ties by ascending ``t``."""
    areas = mask.areas() if isinstance(mask, VoxelMask) else np.asarray(mask)
    if not np.any(np.asarray(areas) > 0):
        raise EmptyTargetError("mask has no foreground")
    order = sorted(range(len(areas)), key=lambda t: (-int(areas[t]), t))
    return [(t, int(areas[t])) for t in order]


class KeySliceSampler:
    """Uniform draw among the Top-K visible slices; owns its generator state."""

    def __init__(self, cfg: TopKConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    def sample(self, ranking: Sequence[tuple[int, int]]) -> int:
        if not ranking:
            raise EmptyTargetError("empty ranking")
        visible = [t for t, area in ranking if area > 0]
        if not visible:
            raise EmptyTargetError("no slice has foreground")
        pool = visible[:min(self.cfg.k, len(visible))]
        if len(pool) == 1:
            return pool[0]
        return pool[int(self.rng.integers(len(pool)))]


def sample_key_slice(ranking: Sequence[tuple[int, int]], cfg: TopKConfig,
                     rng: np.random.Generator | None = None) -> int:
    return KeySliceSampler(cfg, rng).sample(ranking)


# --- connected components ---------------------------------------------------


def _row_runs(row: np.ndarray) -> list[tuple[int, int]]:
    edges = np.diff(np.concatenate(([0], row.astype(np.int8), [0])))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def label_slice(bits: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Run-based two-pass labeling.

    Returns a label image (0 = background, components ``1..n`` numbered by
    first pixel in raster order) and ``n``.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    bits = np.asarray(bits, dtype=bool)
    reach = 1 if connectivity == 8 else 0
    parent: list[int] = []

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    runs = []  # (row, start, stop, provisional label)
    prev: list[tuple[int, int, int]] = []
    for y, row in enumerate(bits):
        current = []
        j = 0
        for start, stop in _row_runs(row):
            label = -1
            # prev runs are sorted; skip those ending before this run's reach
            while j < len(prev) and prev[j][1] + reach <= start:
                j += 1
            k = j
            while k < len(prev) and prev[k][0] < stop + reach:
                other = find(prev[k][2])
                if label < 0:
                    label = other
                elif other != label:
                    hi, lo = max(label, other), min(label, other)
                    parent[hi] = lo
                    label = lo
                k += 1
            if label < 0:
                label = len(parent)
                parent.append(label)
            current.append((start, stop, label))
            runs.append((y, start, stop, label))
        prev = current

    labels = np.zeros(bits.shape, dtype=np.int32)
    final: dict[int, int] = {}
    for y, start, stop, label in runs:
        root = find(label)
        if root not in final:
            final[root] = len(final) + 1
        labels[y, start:stop] = final[root]
    return labels, len(final)


def connected_components(mask: SliceMask | np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """Foreground components, each an ``(n, 2)`` array of ``(y, x)`` in raster order."""
    bits = mask.bits if isinstance(mask, SliceMask) else np.asarray(mask, dtype=bool)
    labels, n = label_slice(bits, connectivity)
    if n == 0:
        return []
    ys, xs = np.nonzero(labels)
    ids = labels[ys, xs]
    order = np.argsort(ids, kind="stable")
    coords = np.stack([ys[order], xs[order]], axis=1)
    splits = np.cumsum(np.bincount(ids, minlength=n + 1)[1:])[:-1]
    return np.split(coords, splits)


def boxes_from_components(components: Sequence[np.ndarray], min_area: int = 1) -> list[Box2D]:
    """Tight box per component of at least ``min_area`` pixels, ordered by ``(y0, x0)``."""
    boxes = []
    for comp in components:
        comp = np.asarray(comp)
        if len(comp) == 0 or len(comp) < min_area:
            continue
        y0, x0 = comp.min(axis=0)
        y1, x1 = comp.max(axis=0) + 1
        boxes.append(Box2D(int(x0), int(y0), int(x1), int(y1)))
    return sorted(boxes, key=Box2D.sort_key)


def slice_boxes(mask: VoxelMask, t: int, connectivity: int = 8, min_area: int = 1) -> list[Box2D]:
    return boxes_from_components(connected_components(slice_of(mask, t), connectivity), min_area)


def derive_target(mask: VoxelMask, cfg: TopKConfig,
                  rng: np.random.Generator | None = None) -> EvidenceAnchor:
    ranking = rank_slices_by_visibility(mask)
    k = sample_key_slice(ranking, cfg, rng)
    boxes = slice_boxes(mask, k, cfg.connectivity, cfg.min_area)
    if not boxes:
        raise EmptyTargetError(f"no component on slice {k} reaches min_area={cfg.min_area}")
    return EvidenceAnchor(k, tuple(boxes))
