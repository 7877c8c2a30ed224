"""Tabular toy policy over evidence anchors.

Per query the policy holds

* slice logits ``(D,)``: categorical over the key slice,
* count logits ``(M,)``: categorical over the number of boxes ``1..M``,
* box means ``(M, 4)``: ``(cx, cy, w, h)`` per box slot, shared by all slices,
* optional per-slice box offsets ``(D, M, 4)`` added to the shared means,
* box log-scales ``(4,)`` shared by slices and slots.

Sharing the box means lets every rollout train the box head regardless of
the slice it picked; without sharing, slices that are rarely sampled keep
poor boxes and the slice head locks onto whichever slice improved first.

Boxes are drawn from a diagonal Gaussian and rounded to integer pixel
rectangles only when rendered.  All parameters live in one flat vector so
that optimizers and finite-difference checks can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from medvol.targets import Box2D, EvidenceAnchor

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Action:
    query: int
    slice_index: int
    count: int
    z: np.ndarray  # (M, 4) raw Gaussian draws; only the first ``count`` rows are used


class ToyPolicy:
    """Parameter layout and distribution math; parameters are passed in, never stored."""

    def __init__(self, n_queries: int, dims: Sequence[int], max_boxes: int = 1, slice_offsets: bool = False):
        if n_queries < 1 or max_boxes < 1:
            raise ValueError("need at least one query and one box slot")
        self.n_queries = n_queries
        self.height, self.width, self.depth = (int(v) for v in dims)
        self.max_boxes = max_boxes
        self.slice_offsets = slice_offsets
        q, d, m = n_queries, self.depth, max_boxes
        shapes = {"slice": (q, d), "count": (q, m), "mean": (q, m, 4), "logstd": (q, 4)}
        if slice_offsets:
            shapes["offset"] = (q, d, m, 4)
        self._layout = {}
        offset = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            self._layout[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset

    def view(self, params: np.ndarray, name: str) -> np.ndarray:
        lo, hi, shape = self._layout[name]
        return params[lo:hi].reshape(shape)

    def init_params(self, rng: np.random.Generator, box_std: float = 2.0) -> np.ndarray:
        params = np.zeros(self.size)
        self.view(params, "slice")[:] = rng.normal(0.0, 0.01, size=(self.n_queries, self.depth))
        mean = self.view(params, "mean")
        mean[..., 0] = self.width / 2 + rng.normal(0.0, 1.0, size=mean.shape[:-1])
        mean[..., 1] = self.height / 2 + rng.normal(0.0, 1.0, size=mean.shape[:-1])
        mean[..., 2] = self.width / 3
        mean[..., 3] = self.height / 3
        self.view(params, "logstd")[:] = np.log(box_std)
        return params

    # --- distribution -------------------------------------------------------

    def slice_probs(self, params: np.ndarray, query: int) -> np.ndarray:
        return softmax(self.view(params, "slice")[query])

    def box_means(self, params: np.ndarray, query: int, t: int) -> np.ndarray:
        """``(M, 4)`` box means for ``query`` on slice ``t``."""
        mean = self.view(params, "mean")[query]
        if self.slice_offsets:
            mean = mean + self.view(params, "offset")[query, t]
        return mean

    def sample(self, params: np.ndarray, query: int, rng: np.random.Generator) -> Action:
        t = int(rng.choice(self.depth, p=self.slice_probs(params, query)))
        count = int(rng.choice(self.max_boxes, p=softmax(self.view(params, "count")[query]))) + 1
        mu = self.box_means(params, query, t)
        sigma = np.exp(self.view(params, "logstd")[query])
        z = mu + sigma * rng.standard_normal(mu.shape)
        return Action(query, t, count, z)

    def mode(self, params: np.ndarray, query: int) -> Action:
        t = int(np.argmax(self.view(params, "slice")[query]))
        count = int(np.argmax(self.view(params, "count")[query])) + 1
        return Action(query, t, count, np.array(self.box_means(params, query, t)))

    def log_prob(self, params: np.ndarray, action: Action) -> float:
        q, t, c = action.query, action.slice_index, action.count
        lp = log_softmax(self.view(params, "slice")[q])[t]
        lp += log_softmax(self.view(params, "count")[q])[c - 1]
        mu = self.box_means(params, q, t)[:c]
        logstd = self.view(params, "logstd")[q]
        u = (action.z[:c] - mu) / np.exp(logstd)
        lp += float(np.sum(-0.5 * u ** 2 - logstd - 0.5 * LOG_2PI))
        return float(lp)

    def grad_log_prob(self, params: np.ndarray, action: Action) -> np.ndarray:
        grad = np.zeros(self.size)
        q, t, c = action.query, action.slice_index, action.count
        g_slice = -softmax(self.view(params, "slice")[q])
        g_slice[t] += 1.0
        self.view(grad, "slice")[q] = g_slice
        g_count = -softmax(self.view(params, "count")[q])
        g_count[c - 1] += 1.0
        self.view(grad, "count")[q] = g_count
        mu = self.box_means(params, q, t)[:c]
        logstd = self.view(params, "logstd")[q]
        sigma = np.exp(logstd)
        diff = action.z[:c] - mu
        self.view(grad, "mean")[q, :c] = diff / sigma ** 2
        if self.slice_offsets:
            self.view(grad, "offset")[q, t, :c] = diff / sigma ** 2
        self.view(grad, "logstd")[q] = np.sum(diff ** 2 / sigma ** 2 - 1.0, axis=0)
        return grad

    # --- decoding -----------------------------------------------------------

    def box_from_vector(self, v: np.ndarray) -> Box2D:
        cx, cy, bw, bh = (float(x) for x in v)
        bw, bh = max(bw, 1.0), max(bh, 1.0)
        x0 = int(np.clip(np.floor(cx - bw / 2 + 0.5), 0, self.width - 1))
        y0 = int(np.clip(np.floor(cy - bh / 2 + 0.5), 0, self.height - 1))
        x1 = int(np.clip(np.floor(cx + bw / 2 + 0.5), x0 + 1, self.width))
        y1 = int(np.clip(np.floor(cy + bh / 2 + 0.5), y0 + 1, self.height))
        return Box2D(x0, y0, x1, y1)

    def decode(self, action: Action) -> EvidenceAnchor:
        boxes = tuple(self.box_from_vector(action.z[s]) for s in range(action.count))
        return EvidenceAnchor(action.slice_index, boxes)


def box_vector(box: Box2D) -> np.ndarray:
    """``(cx, cy, w, h)`` of a pixel rectangle; inverse of the policy's rounding."""
    return np.array([(box.x0 + box.x1) / 2, (box.y0 + box.y1) / 2, box.width, box.height], dtype=np.float64)


def fit_cold_start(policy: ToyPolicy, params: np.ndarray, targets: Sequence[Sequence[EvidenceAnchor]],
                   box_std: float = 1.0, smoothing: float = 0.05) -> np.ndarray:
    """Maximum-likelihood fit of slice, count and box heads to target anchors.

    ``targets[q]`` lists the supervision anchors of query ``q``.  Categorical
    heads get smoothed log-frequencies; shared box means become per-slot
    averages over all targets, and per-slice offsets (when present) the
    deviation of each slice's own average.  Box scales are reset to
    ``box_std`` so that exploration survives the fit.
    """
    params = params.copy()
    m = policy.max_boxes
    for q, anchors in enumerate(targets):
        if not anchors:
            continue
        slice_counts = np.full(policy.depth, smoothing)
        count_counts = np.full(m, smoothing)
        sums = np.zeros((policy.depth, m, 4))
        hits = np.zeros((policy.depth, m))
        for anchor in anchors:
            # keep the M largest boxes, in the anchor's own (slot) order
            keep = sorted(sorted(range(len(anchor.boxes)), key=lambda i: -anchor.boxes[i].area)[:m])
            boxes = [anchor.boxes[i] for i in keep]
            slice_counts[anchor.key_slice] += 1
            count_counts[len(boxes) - 1] += 1
            for s, box in enumerate(boxes):
                sums[anchor.key_slice, s] += box_vector(box)
                hits[anchor.key_slice, s] += 1
        policy.view(params, "slice")[q] = np.log(slice_counts / slice_counts.sum())
        policy.view(params, "count")[q] = np.log(count_counts / count_counts.sum())
        mean = policy.view(params, "mean")[q]
        total_hits = hits.sum(axis=0)
        for s in range(m):
            if total_hits[s]:
                mean[s] = sums[:, s].sum(axis=0) / total_hits[s]
            elif s > 0:
                mean[s] = mean[0]
        if policy.slice_offsets:
            offsets = policy.view(params, "offset")[q]
            offsets[:] = 0.0
            seen = hits > 0
            offsets[seen] = sums[seen] / hits[seen][:, None] - np.broadcast_to(mean, offsets.shape)[seen]
        policy.view(params, "logstd")[q] = np.log(box_std)
    return params
