"""Four-part verifiable reward for an evidence-anchor response.

* format: 1 when the response parses, else 0
* axial: foreground area on the chosen slice over the largest slice area
* spatial: matched box IoU sum over ``max(N, N*)`` after optimal matching
  against the ground-truth boxes of the *chosen* slice
* consistency: Dice of the propagated prediction against the ground truth
  on slices ``|t - k| <= delta``

A response that fails to parse scores zero on every component.  A component
whose weight is zero is not evaluated and reported as 0.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

from medvol import respparse
from medvol.assign import build_cost_matrix, hungarian
from medvol.evalmetrics import dice
from medvol.propagate import PropagationError, Propagator, PropagatorSpec, make_propagator
from medvol.targets import Box2D, EvidenceAnchor, slice_boxes
from medvol.volmask import Volume, VoxelMask

logger = logging.getLogger(__name__)

PROPAGATOR_ERROR = "propagator-error"
PROMPT_MODES = ("matched", "matched-nonzero", "all")


class InvalidSampleError(ValueError):
    """Ground truth with no foreground cannot be scored."""


@dataclass(frozen=True)
class RewardWeights:
    format: float = 1.0
    axial: float = 1.0
    spatial: float = 1.0
    consistency: float = 1.0

    def __post_init__(self):
        if min(self.format, self.axial, self.spatial, self.consistency) < 0:
            raise ValueError("reward weights must be >= 0")


@dataclass(frozen=True)
class RewardConfig:
    """``prompt_boxes`` picks what the propagator receives: predicted boxes
    that were matched (default), only matches with IoU > 0, or every
    predicted box."""

    weights: RewardWeights = field(default_factory=RewardWeights)
    delta: int = 5
    propagator: PropagatorSpec = field(default_factory=PropagatorSpec)
    connectivity: int = 8
    min_area: int = 1
    prompt_boxes: str = "matched"

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.prompt_boxes not in PROMPT_MODES:
            raise ValueError(f"prompt_boxes must be one of {PROMPT_MODES}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_f: float
    r_a: float
    r_s: float
    r_c: float
    r_total: float
    failure_reason: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def reward_format(text: str, dims: Sequence[int]) -> int:
    return int(bool(respparse.parse(text, dims)))


def reward_axial(k_hat: int, gt: VoxelMask) -> float:
    areas = gt.areas()
    peak = int(areas.max())
    if peak == 0:
        raise InvalidSampleError("ground-truth mask is empty")
    return int(areas[k_hat]) / peak


def spatial_matching(pred: Sequence[Box2D], gt_boxes: Sequence[Box2D]) -> tuple[float, list[tuple[int, int, float]]]:
    """Spatial score plus the optimal pairs as ``(pred_index, gt_index, iou)``."""
    if not pred and not gt_boxes:
        return 1.0, []
    if not pred or not gt_boxes:
        return 0.0, []
    cost = build_cost_matrix(pred, gt_boxes)
    pairs = [(i, j, 1.0 - cost[i, j]) for i, j in hungarian(cost)]
    return sum(v for _, _, v in pairs) / max(len(pred), len(gt_boxes)), pairs


def reward_spatial(pred: Sequence[Box2D], gt_boxes: Sequence[Box2D]) -> float:
    return spatial_matching(pred, gt_boxes)[0]


def neighborhood(k_hat: int, delta: int, depth: int) -> tuple[int, int]:
    """Half-open slice range ``[k - delta, k + delta]`` clipped to the volume."""
    return max(0, k_hat - delta), min(depth, k_hat + delta + 1)


def prompt_boxes(pred: Sequence[Box2D], pairs, mode: str = "matched") -> list[Box2D]:
    if mode == "all":
        return list(pred)
    return [pred[i] for i, _, v in sorted(pairs) if mode == "matched" or v > 0]


class RewardScorer:
    """Scores responses for one ground-truth sample.

    Ground-truth boxes per slice are computed once and cached; the
    propagator is built once per scorer, so use one scorer per worker.
    With ``memoize`` identical response texts are scored once.
    """

    def __init__(self, gt: VoxelMask, volume: Volume | None, cfg: RewardConfig | None = None,
                 propagator: Propagator | None = None, memoize: bool = False):
        if gt.count == 0:
            raise InvalidSampleError("ground-truth mask is empty")
        if volume is not None and volume.dims != gt.dims:
            raise ValueError(f"volume dims {volume.dims} differ from mask dims {gt.dims}")
        self.gt = gt
        self.volume = volume
        self.cfg = cfg or RewardConfig()
        self.propagator = propagator
        self._gt_boxes: dict[int, list[Box2D]] = {}
        self._memo: dict[str, RewardBreakdown] | None = {} if memoize else None

    def gt_boxes(self, t: int) -> list[Box2D]:
        if t not in self._gt_boxes:
            self._gt_boxes[t] = slice_boxes(self.gt, t, self.cfg.connectivity, self.cfg.min_area)
        return self._gt_boxes[t]

    def _propagator(self) -> Propagator:
        if self.propagator is None:
            self.propagator = make_propagator(self.cfg.propagator, self.cfg.delta)
        return self.propagator

    def propagate(self, key_slice: int, boxes: Sequence[Box2D]) -> VoxelMask:
        if self.volume is None:
            raise ValueError("a volume is required to propagate")
        return self._propagator()(self.volume, key_slice, boxes)

    def predicted_mask(self, anchor: EvidenceAnchor) -> VoxelMask:
        """Volumetric prediction from the boxes the consistency term prompts with."""
        _, pairs = spatial_matching(anchor.boxes, self.gt_boxes(anchor.key_slice))
        return self.propagate(anchor.key_slice, prompt_boxes(anchor.boxes, pairs, self.cfg.prompt_boxes))

    def consistency(self, anchor: EvidenceAnchor) -> tuple[float, str | None]:
        try:
            pred = self.predicted_mask(anchor)
        except PropagationError as exc:
            logger.warning("propagation failed: %s", exc)
            return 0.0, PROPAGATOR_ERROR
        return dice(pred, self.gt, neighborhood(anchor.key_slice, self.cfg.delta, self.gt.depth)), None

    def score(self, text: str) -> RewardBreakdown:
        if self._memo is not None and text in self._memo:
            return self._memo[text]
        parsed = respparse.parse(text, self.gt.dims)
        if not parsed:
            result = RewardBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, parsed.reason)
        else:
            result = self.score_anchor(parsed.anchor)
        if self._memo is not None:
            self._memo[text] = result
        return result

    def score_anchor(self, anchor: EvidenceAnchor) -> RewardBreakdown:
        w = self.cfg.weights
        r_f = 1.0
        r_a = reward_axial(anchor.key_slice, self.gt) if w.axial else 0.0
        r_s = reward_spatial(anchor.boxes, self.gt_boxes(anchor.key_slice)) if w.spatial else 0.0
        r_c, reason = self.consistency(anchor) if w.consistency else (0.0, None)
        total = w.format * r_f + w.axial * r_a + w.spatial * r_s + w.consistency * r_c
        return RewardBreakdown(r_f, r_a, r_s, r_c, total, reason)


def reward_consistency(anchor: EvidenceAnchor, gt: VoxelMask, volume: Volume,
                       cfg: RewardConfig | None = None, propagator: Propagator | None = None) -> float:
    return RewardScorer(gt, volume, cfg, propagator).consistency(anchor)[0]


def reward_total(text: str, gt: VoxelMask, volume: Volume | None, cfg: RewardConfig | None = None,
                 propagator: Propagator | None = None) -> RewardBreakdown:
    return RewardScorer(gt, volume, cfg, propagator).score(text)
