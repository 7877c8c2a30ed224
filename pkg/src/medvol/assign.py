"""Box IoU and minimum-cost one-to-one assignment (Kuhn-Munkres)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from medvol.targets import Box2D

PAD_COST = 1.0


def iou(a: Box2D, b: Box2D) -> float:
    """Intersection over union of two half-open pixel rectangles."""
    if a.area <= 0 or b.area <= 0:
        raise ValueError("iou is undefined for degenerate boxes")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def build_cost_matrix(pred: Sequence[Box2D], gt: Sequence[Box2D]) -> np.ndarray:
    """``C[i, j] = 1 - IoU(pred[i], gt[j])`` with shape ``(len(pred), len(gt))``."""
    cost = np.ones((len(pred), len(gt)), dtype=np.float64)
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            cost[i, j] = 1.0 - iou(p, g)
    return cost


def _solve_square(cost: np.ndarray) -> list[int]:
    # Shortest augmenting path with row/column potentials, O(n^3).
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # row_of[j]: 1-based row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of = [0] * n
    for j in range(1, n + 1):
        col_of[row_of[j] - 1] = j - 1
    return col_of


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost matching of ``min(N, N*)`` pairs, sorted by row.

    Rectangular inputs are padded to square with :data:`PAD_COST` and the
    padded pairs dropped afterwards.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return []
    n = max(n_rows, n_cols)
    square = np.full((n, n), PAD_COST)
    square[:n_rows, :n_cols] = cost
    col_of = _solve_square(square)
    return [(i, col_of[i]) for i in range(n_rows) if col_of[i] < n_cols]


def matching_cost(cost: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    return float(sum(cost[i, j] for i, j in pairs))
