import math

import numpy as np
import pytest

from medvol.grpo import (GrpoConfig, Sample, TrainConfig, TrainingDivergedError, evaluate_policy,
                         initial_policy, kl_to_reference, normalize_advantages, rollout,
                         surrogate_from_logps, surrogate_loss, train)
from medvol.policy import ToyPolicy
from medvol.respparse import parse
from medvol.reward import RewardConfig, RewardScorer
from medvol.targets import TopKConfig, derive_target
from medvol.volmask import PhantomSpec, generate_phantom

DIMS = (24, 24, 16)


@pytest.fixture(scope="module")
def samples():
    specs = [PhantomSpec("sphere", (11.5, 12.2, 8), (4.5, 4.5, 4.5), DIMS, noise=6.0, seed=1),
             PhantomSpec("two-blob", (12, 11, 7), (3, 3, 3), DIMS, noise=6.0, seed=2, separation=9.0)]
    return [Sample(*generate_phantom(s), s.kind) for s in specs]


def central_difference(f, x, h=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# --- advantages and KL ------------------------------------------------------


def test_advantage_examples():
    np.testing.assert_allclose(normalize_advantages([1, 2, 3, 4]), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)
    assert normalize_advantages([2.5] * 4).tolist() == [0.0] * 4
    np.testing.assert_allclose(normalize_advantages([0, 1]), [-1, 1], atol=1e-12)
    with pytest.raises(ValueError):
        normalize_advantages([1.0])
    with pytest.raises(ValueError):
        normalize_advantages([1.0, np.nan])


def test_advantage_invariances():
    rng = np.random.default_rng(22)
    for _ in range(200):
        r = rng.normal(size=int(rng.integers(2, 10)))
        a = normalize_advantages(r)
        np.testing.assert_allclose(normalize_advantages(r + rng.normal() * 10), a, atol=1e-9)
        np.testing.assert_allclose(normalize_advantages(r * rng.uniform(0.01, 100)), a, atol=1e-9)
        assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-9


def test_kl_examples():
    assert kl_to_reference(-1.3, -1.3) == 0.0
    assert kl_to_reference(0.0, 0.1) == pytest.approx(math.exp(0.1) - 1.1, abs=1e-15)
    assert kl_to_reference(0.0, 0.1) == pytest.approx(0.0051709, abs=1e-7)
    d = np.linspace(-5, 5, 101)
    np.testing.assert_allclose(kl_to_reference(np.zeros_like(d), d), np.exp(d) - d - 1, rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        kl_to_reference(np.inf, 0.0)


def test_kl_nonnegative_and_zero_only_on_equality():
    rng = np.random.default_rng(23)
    a, b = rng.normal(scale=5, size=(2, 10_000))
    kl = kl_to_reference(a, b)
    assert np.all(kl >= 0) and np.all(kl[a != b] > 0)


# --- surrogate --------------------------------------------------------------


def test_ratio_one_zero_beta_gives_zero_loss():
    adv = normalize_advantages([0.3, 1.2, 2.0, 0.1])
    lp = np.log([0.2, 0.1, 0.3, 0.4])
    loss, _ = surrogate_from_logps(lp, lp, lp, adv, 0.2, 0.0)
    assert abs(loss) < 1e-12


def test_clipped_sample_has_zero_gradient():
    eps = 0.2
    lp_old = np.zeros(3)
    lp = np.array([math.log(1 + 2 * eps), 0.05, -0.1])
    adv = np.array([1.0, -0.5, -0.5])
    _, grad = surrogate_from_logps(lp, lp_old, lp, adv, eps, 0.0)
    assert grad[0] == 0.0 and grad[1] != 0.0


def random_instance(rng, boundary: bool):
    g = int(rng.integers(2, 9))
    lp_old = rng.normal(-2, 1, size=g)
    eps = rng.uniform(0.1, 0.3)
    if boundary:
        # ratios on both sides of 1 +/- eps, kept 1e-3 away from the kinks
        side = rng.choice([-1, 1], size=g)
        offset = rng.uniform(1e-3, 0.05, size=g) * rng.choice([-1, 1], size=g)
        ratio = 1 + side * eps + offset
    else:
        ratio = rng.uniform(1 - 0.9 * eps, 1 + 0.9 * eps, size=g)
    lp = lp_old + np.log(ratio)
    lp_ref = lp + rng.normal(0, 0.3, size=g)
    adv = normalize_advantages(rng.normal(size=g))
    return lp, lp_old, lp_ref, adv, eps, rng.uniform(0, 0.1)


@pytest.mark.parametrize("boundary", [False, True])
def test_surrogate_gradient_finite_differences(boundary):
    rng = np.random.default_rng(24 + boundary)
    for _ in range(100):
        lp, lp_old, lp_ref, adv, eps, beta = random_instance(rng, boundary)
        _, grad = surrogate_from_logps(lp, lp_old, lp_ref, adv, eps, beta)
        fd = central_difference(lambda x: surrogate_from_logps(x, lp_old, lp_ref, adv, eps, beta)[0], lp)
        assert rel_err(grad, fd) < 1e-4


def test_surrogate_rejects_non_finite():
    with pytest.raises(ValueError):
        surrogate_from_logps([0.0, np.nan], [0.0, 0.0], [0.0, 0.0], [1.0, -1.0])


def test_parameter_space_gradient(samples):
    policy = ToyPolicy(2, DIMS, max_boxes=2, slice_offsets=True)
    rng = np.random.default_rng(26)
    cfg = GrpoConfig(beta=0.05)
    scorer = RewardScorer(samples[1].mask, samples[1].volume, RewardConfig(), memoize=True)
    for _ in range(5):
        params = policy.init_params(rng)
        params += rng.normal(0, 0.1, size=params.size)
        group = rollout(policy, params, 1, scorer, 4, rng, params)
        moved = params + rng.normal(0, 0.02, size=params.size)
        _, grad = surrogate_loss(group, policy, moved, cfg)
        idx = np.flatnonzero(np.abs(grad) > 0)[:60]
        fd = np.array([(surrogate_loss(group, policy, moved + h, cfg)[0] -
                        surrogate_loss(group, policy, moved - h, cfg)[0]) / 2e-5
                       for h in (np.eye(1, params.size, i).ravel() * 1e-5 for i in idx)])
        assert rel_err(grad[idx], fd) < 1e-4


# --- rollouts ---------------------------------------------------------------


def test_deterministic_policy_gives_identical_group(samples):
    policy = ToyPolicy(2, DIMS)
    params = policy.init_params(np.random.default_rng(0))
    logits = policy.view(params, "slice")
    logits[:] = -1e3
    logits[:, 8] = 0.0
    policy.view(params, "logstd")[:] = -60.0
    scorer = RewardScorer(samples[0].mask, samples[0].volume)
    group = rollout(policy, params, 0, scorer, 4, np.random.default_rng(1))
    assert len(set(group.responses)) == 1
    assert group.advantages.tolist() == [0.0] * 4


def test_rollout_is_seed_reproducible(samples):
    policy = ToyPolicy(2, DIMS, max_boxes=2)
    params = policy.init_params(np.random.default_rng(0))
    scorer = RewardScorer(samples[0].mask, samples[0].volume)
    a = rollout(policy, params, 0, scorer, 6, np.random.default_rng(5))
    b = rollout(policy, params, 0, scorer, 6, np.random.default_rng(5))
    assert a.responses == b.responses
    assert a.rewards.tobytes() == b.rewards.tobytes()


def test_random_policy_always_schema_valid(samples):
    policy = ToyPolicy(2, DIMS, max_boxes=2)
    rng = np.random.default_rng(27)
    params = policy.init_params(rng, box_std=8.0)
    scorer = RewardScorer(samples[0].mask, samples[0].volume)
    group = rollout(policy, params, 0, scorer, 64, rng)
    assert all(b.r_f == 1.0 for b in group.breakdowns)
    assert all(parse(text, DIMS) for text in group.responses)


def test_reinforce_sign_agreement():
    """beta = 0 with no clipping is REINFORCE with a mean baseline, up to a positive scale."""
    vol, mask = generate_phantom(PhantomSpec("sphere", (12, 12, 8), (5, 5, 5), DIMS, noise=6.0, seed=3))
    scorer = RewardScorer(mask, vol, memoize=True)
    policy = ToyPolicy(1, DIMS)
    agreement = []
    for seed in range(50):
        rng = np.random.default_rng([seed, 99])
        params = policy.init_params(rng, box_std=2.0)
        group = rollout(policy, params, 0, scorer, 64, rng, params)
        logp = np.array([policy.log_prob(params, a) for a in group.actions])
        _, dlogp = surrogate_from_logps(logp, group.logp_old, group.logp_ref, group.advantages, 1e9, 0.0)
        grpo_dir = -sum(w * policy.grad_log_prob(params, a) for w, a in zip(dlogp, group.actions))
        baseline = group.rewards - group.rewards.mean()
        reinforce = sum(b * policy.grad_log_prob(params, a) for b, a in zip(baseline, group.actions)) / 64
        live = np.abs(reinforce) > 1e-12
        agreement.append(np.mean(np.sign(grpo_dir[live]) == np.sign(reinforce[live])))
    assert np.mean(agreement) >= 0.95


# --- training ---------------------------------------------------------------


def test_zero_steps_keeps_cold_start(samples):
    cfg = TrainConfig(grpo=GrpoConfig(steps=0), seed=4)
    result = train(samples, cfg)
    assert np.array_equal(result.params, result.initial_params)
    assert np.array_equal(result.params, initial_policy(samples, cfg)[1])
    assert result.log == []


def test_cold_start_modal_slice_matches_target():
    vol, mask = generate_phantom(PhantomSpec("ellipsoid", (12, 11, 6.4), (6, 4, 3), DIMS, noise=5.0, seed=6))
    cfg = TrainConfig(grpo=GrpoConfig(steps=0), topk=TopKConfig(k=1))
    policy, params = initial_policy([Sample(vol, mask)], cfg)
    target = derive_target(mask, TopKConfig(k=1))
    modal = policy.decode(policy.mode(params, 0))
    assert modal.key_slice == target.key_slice
    assert modal.boxes == target.boxes


def test_training_is_reproducible_and_logs(samples):
    cfg = TrainConfig(grpo=GrpoConfig(steps=6, queries_per_step=1), seed=7)
    records = []
    a = train(samples, cfg, on_step=records.append)
    b = train(samples, cfg)
    assert np.array_equal(a.params, b.params)
    assert a.log == b.log == records
    assert [r["step"] for r in a.log] == list(range(6))
    assert set(a.log[0]) == {"step", "mean_reward", "r_f", "r_a", "r_s", "r_c", "kl", "loss"}
    assert all(r["kl"] >= 0 for r in a.log)  # measured after each update
    assert np.array_equal(a.ref_params, a.initial_params)


def test_divergence_is_reported(samples):
    cfg = TrainConfig(grpo=GrpoConfig(steps=3, lr=float("nan")), seed=0)
    with pytest.raises(TrainingDivergedError):
        train(samples, cfg)


def test_grpo_config_validation():
    for bad in (dict(group_size=1), dict(clip_eps=0.0), dict(clip_eps=1.0), dict(beta=-0.1), dict(steps=-1)):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)
    with pytest.raises(ValueError):
        train([], TrainConfig())


def test_short_training_improves_reward(samples):
    cfg = TrainConfig(grpo=GrpoConfig(steps=40, lr=0.05), seed=1, cold_start=False)
    result = train(samples, cfg)
    first = np.mean([r["mean_reward"] for r in result.log[:5]])
    last = np.mean([r["mean_reward"] for r in result.log[-5:]])
    assert last > first


def test_evaluate_policy_fields(samples):
    cfg = TrainConfig(grpo=GrpoConfig(steps=0), topk=TopKConfig(k=1))
    policy, params = initial_policy(samples, cfg)
    ev = evaluate_policy(policy, params, samples, RewardConfig(), n_samples=4)
    assert ev.modal_accuracy == 1.0
    assert len(ev.per_query) == 2
    assert 0.9 <= ev.mean_dsc <= 1.0
    assert ev.greedy_reward > 3.5
