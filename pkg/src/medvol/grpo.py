"""Group Relative Policy Optimization on the toy evidence-anchor policy."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from medvol import respparse
from medvol.evalmetrics import dice
from medvol.policy import Action, ToyPolicy, box_vector, fit_cold_start
from medvol.reward import RewardBreakdown, RewardConfig, RewardScorer
from medvol.targets import EvidenceAnchor, TopKConfig, derive_target
from medvol.volmask import Volume, VoxelMask

logger = logging.getLogger(__name__)

THINK_TEMPLATE = "Slice {slice} shows the target at its largest cross-section; {count} region(s) outlined."

# seed streams
_SFT, _INIT, _ROLLOUT, _BATCH = 1, 2, 3, 4


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 4
    clip_eps: float = 0.2
    beta: float = 0.01
    lr: float = 0.02
    steps: int = 300
    adv_eps: float = 1e-6
    queries_per_step: int = 8
    inner_steps: int = 1
    min_log_std: float = math.log(0.1)

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.steps < 0 or self.inner_steps < 1 or self.queries_per_step < 1:
            raise ValueError("steps >= 0, inner_steps >= 1 and queries_per_step >= 1 required")


@dataclass
class RolloutGroup:
    query: int
    actions: list[Action]
    responses: list[str]
    breakdowns: list[RewardBreakdown]
    rewards: np.ndarray
    advantages: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray


@dataclass
class Sample:
    volume: Volume
    mask: VoxelMask
    name: str = ""


# --- math -------------------------------------------------------------------


def normalize_advantages(rewards: Sequence[float], eps_floor: float = 1e-6) -> np.ndarray:
    """Group-standardized rewards using the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least two rewards per group")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    std = r.std()
    if std < eps_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def kl_to_reference(logp_theta, logp_ref) -> np.ndarray | float:
    """Per-sample ``exp(d) - d - 1`` with ``d = logp_ref - logp_theta``; always >= 0."""
    lt = np.asarray(logp_theta, dtype=np.float64)
    lr = np.asarray(logp_ref, dtype=np.float64)
    if not (np.all(np.isfinite(lt)) and np.all(np.isfinite(lr))):
        raise ValueError("log-probabilities must be finite")
    d = lr - lt
    # expm1(d) - d keeps precision near zero
    kl = np.maximum(np.expm1(d) - d, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def surrogate_from_logps(logp, logp_old, logp_ref, advantages, clip_eps: float = 0.2,
                         beta: float = 0.01) -> tuple[float, np.ndarray]:
    """Clipped group objective with KL penalty, and its gradient w.r.t. ``logp``."""
    arrays = [np.asarray(a, dtype=np.float64) for a in (logp, logp_old, logp_ref, advantages)]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError("surrogate inputs must be finite")
    lp, lp_old, lp_ref, adv = arrays
    g = lp.size
    ratio = np.exp(lp - lp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    take_unclipped = unclipped <= clipped
    objective = np.where(take_unclipped, unclipped, clipped)
    d = lp_ref - lp
    kl = np.expm1(d) - d
    loss = -float(np.mean(objective - beta * kl))
    grad = -(np.where(take_unclipped, unclipped, 0.0) + beta * np.expm1(d)) / g
    return loss, grad


def surrogate_loss(group: RolloutGroup, policy: ToyPolicy, params: np.ndarray,
                   cfg: GrpoConfig) -> tuple[float, np.ndarray]:
    """Loss of one rollout group at ``params`` and its gradient in parameter space."""
    if not np.all(np.isfinite(params)):
        raise ValueError("policy parameters must be finite")
    logp = np.array([policy.log_prob(params, a) for a in group.actions])
    loss, dlogp = surrogate_from_logps(logp, group.logp_old, group.logp_ref, group.advantages,
                                       cfg.clip_eps, cfg.beta)
    grad = np.zeros(policy.size)
    for weight, action in zip(dlogp, group.actions):
        if weight:
            grad += weight * policy.grad_log_prob(params, action)
    return loss, grad


# --- rollouts ---------------------------------------------------------------


def render(policy: ToyPolicy, action: Action) -> str:
    anchor = policy.decode(action)
    think = THINK_TEMPLATE.format(slice=anchor.key_slice, count=len(anchor.boxes))
    return respparse.serialize(think, anchor)


def rollout(policy: ToyPolicy, params: np.ndarray, query: int, scorer: RewardScorer, group_size: int,
            rng: np.random.Generator, ref_params: np.ndarray | None = None,
            adv_eps: float = 1e-6) -> RolloutGroup:
    """Sample a group for ``query``, score each response and standardize rewards."""
    actions = [policy.sample(params, query, rng) for _ in range(group_size)]
    responses = [render(policy, a) for a in actions]
    breakdowns = [scorer.score(text) for text in responses]
    rewards = np.array([b.r_total for b in breakdowns])
    logp_old = np.array([policy.log_prob(params, a) for a in actions])
    ref = params if ref_params is None else ref_params
    logp_ref = np.array([policy.log_prob(ref, a) for a in actions])
    return RolloutGroup(query, actions, responses, breakdowns, rewards,
                        normalize_advantages(rewards, adv_eps), logp_old, logp_ref)


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    topk: TopKConfig = field(default_factory=TopKConfig)
    seed: int = 0
    cold_start: bool = True
    sft_targets: int = 24
    sft_box_std: float = 1.0
    sft_box_jitter: float = 0.0
    sft_box_bias: float = 0.0
    init_box_std: float = 2.0
    max_boxes: int = 2
    slice_offsets: bool = False


@dataclass
class TrainResult:
    policy: ToyPolicy
    params: np.ndarray
    initial_params: np.ndarray
    ref_params: np.ndarray
    log: list[dict]


class Adam:
    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Generator for one node of the seed hierarchy (run seed, stream, ...)."""
    return np.random.default_rng([seed, *stream])


def cold_start_targets(samples: Sequence[Sample], cfg: TrainConfig, policy: ToyPolicy) -> list[list[EvidenceAnchor]]:
    """Top-K targets per sample, optionally degraded to imitate imperfect supervision.

    ``sft_box_bias`` draws one ``(cx, cy, w, h)`` offset per sample that is
    added to all of its boxes (an annotator's systematic error);
    ``sft_box_jitter`` adds independent noise to every box.
    """
    targets = []
    for q, sample in enumerate(samples):
        rng = rng_for(cfg.seed, _SFT, q)
        bias = rng.normal(0.0, cfg.sft_box_bias, 4) if cfg.sft_box_bias > 0 else np.zeros(4)
        anchors = []
        for _ in range(cfg.sft_targets):
            anchor = derive_target(sample.mask, cfg.topk, rng)
            if cfg.sft_box_jitter > 0 or cfg.sft_box_bias > 0:
                boxes = tuple(policy.box_from_vector(box_vector(b) + bias + rng.normal(0.0, cfg.sft_box_jitter, 4))
                              for b in anchor.boxes)
                anchor = EvidenceAnchor(anchor.key_slice, boxes)
            anchors.append(anchor)
        targets.append(anchors)
    return targets


def initial_policy(samples: Sequence[Sample], cfg: TrainConfig) -> tuple[ToyPolicy, np.ndarray]:
    """Random initialization, followed by the cold-start fit when enabled."""
    dims = samples[0].mask.dims
    if any(s.mask.dims != dims for s in samples):
        raise ValueError("all samples must share one grid size")
    policy = ToyPolicy(len(samples), dims, cfg.max_boxes, cfg.slice_offsets)
    params = policy.init_params(rng_for(cfg.seed, _INIT), cfg.init_box_std)
    if cfg.cold_start:
        params = fit_cold_start(policy, params, cold_start_targets(samples, cfg, policy), cfg.sft_box_std)
    return policy, params


def train(samples: Sequence[Sample], cfg: TrainConfig,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Cold start (optional) then GRPO; returns final parameters and per-step records."""
    if not samples:
        raise ValueError("empty training set")
    policy, params = initial_policy(samples, cfg)
    initial = params.copy()
    ref = params.copy()
    g = cfg.grpo
    scorers = [RewardScorer(s.mask, s.volume, cfg.reward, memoize=True) for s in samples]
    optimizer = Adam(policy.size, g.lr)
    n_q = len(samples)
    log = []
    for step in range(g.steps):
        if g.queries_per_step >= n_q:
            queries = list(range(n_q))
        else:
            queries = sorted(rng_for(cfg.seed, _BATCH, step).choice(n_q, g.queries_per_step, replace=False))
        groups = [rollout(policy, params, q, scorers[q], g.group_size, rng_for(cfg.seed, _ROLLOUT, step, q),
                          ref, g.adv_eps) for q in queries]
        for _ in range(g.inner_steps):
            loss = 0.0
            grad = np.zeros(policy.size)
            for group in groups:
                group_loss, group_grad = surrogate_loss(group, policy, params, g)
                loss += group_loss / len(groups)
                grad += group_grad / len(groups)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDivergedError(f"non-finite loss or gradient at step {step}")
            params = optimizer.step(params, grad)
            logstd = policy.view(params, "logstd")
            np.maximum(logstd, g.min_log_std, out=logstd)
            if not np.all(np.isfinite(params)):
                raise TrainingDivergedError(f"non-finite parameters after step {step}")
        record = step_record(step, groups, policy, params, ref, loss)
        log.append(record)
        if on_step is not None:
            on_step(record)
    return TrainResult(policy, params, initial, ref, log)


def step_record(step: int, groups: Sequence[RolloutGroup], policy: ToyPolicy, params: np.ndarray,
                ref: np.ndarray, loss: float) -> dict:
    breakdowns = [b for grp in groups for b in grp.breakdowns]
    kl = [kl_to_reference(policy.log_prob(params, a), policy.log_prob(ref, a))
          for grp in groups for a in grp.actions]
    return {
        "step": step,
        "mean_reward": float(np.mean([b.r_total for b in breakdowns])),
        "r_f": float(np.mean([b.r_f for b in breakdowns])),
        "r_a": float(np.mean([b.r_a for b in breakdowns])),
        "r_s": float(np.mean([b.r_s for b in breakdowns])),
        "r_c": float(np.mean([b.r_c for b in breakdowns])),
        "kl": float(np.mean(kl)),
        "loss": float(loss),
    }


# --- evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class PolicyEvaluation:
    modal_accuracy: float
    mean_reward: float
    greedy_reward: float
    mean_dsc: float
    per_query: list[dict]


def evaluate_policy(policy: ToyPolicy, params: np.ndarray, samples: Sequence[Sample], reward: RewardConfig,
                    n_samples: int = 16, seed: int = 0) -> PolicyEvaluation:
    """Score the modal anchor and a batch of sampled anchors per query.

    Whole-volume DSC propagates every box of the modal anchor, as at
    inference time when no ground truth is available for matching.
    """
    rows = []
    for q, sample in enumerate(samples):
        scorer = RewardScorer(sample.mask, sample.volume, reward)
        areas = sample.mask.areas()
        modal = policy.mode(params, q)
        anchor = policy.decode(modal)
        greedy = scorer.score_anchor(anchor)
        pred = scorer.propagate(anchor.key_slice, anchor.boxes)
        rng = rng_for(seed, _ROLLOUT, 10 ** 6, q)
        sampled = [scorer.score(render(policy, policy.sample(params, q, rng))).r_total for _ in range(n_samples)]
        rows.append({
            "query": q,
            "modal_slice": modal.slice_index,
            "modal_is_argmax": bool(areas[modal.slice_index] == areas.max()),
            "greedy_reward": greedy.r_total,
            "mean_reward": float(np.mean(sampled)),
            "dsc": dice(pred, sample.mask),
        })
    return PolicyEvaluation(
        modal_accuracy=float(np.mean([r["modal_is_argmax"] for r in rows])),
        mean_reward=float(np.mean([r["mean_reward"] for r in rows])),
        greedy_reward=float(np.mean([r["greedy_reward"] for r in rows])),
        mean_dsc=float(np.mean([r["dsc"] for r in rows])),
        per_query=rows,
    )
