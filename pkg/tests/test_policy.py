import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvol.policy import ToyPolicy, box_vector, fit_cold_start
from medvol.targets import Box2D, EvidenceAnchor

DIMS = (20, 30, 12)


def test_layout_and_validation():
    policy = ToyPolicy(3, DIMS, max_boxes=2, slice_offsets=True)
    assert policy.size == 3 * 12 + 3 * 2 + 3 * 2 * 4 + 3 * 4 + 3 * 12 * 2 * 4
    with pytest.raises(ValueError):
        ToyPolicy(0, DIMS)


def test_log_prob_gradient_finite_differences():
    rng = np.random.default_rng(30)
    policy = ToyPolicy(2, DIMS, max_boxes=2, slice_offsets=True)
    for _ in range(20):
        params = policy.init_params(rng) + rng.normal(0, 0.2, size=policy.size)
        action = policy.sample(params, int(rng.integers(2)), rng)
        grad = policy.grad_log_prob(params, action)
        fd = np.zeros(policy.size)
        for i in np.flatnonzero(grad):
            e = np.zeros(policy.size)
            e[i] = 1e-5
            fd[i] = (policy.log_prob(params + e, action) - policy.log_prob(params - e, action)) / 2e-5
        assert np.linalg.norm(grad - fd) / np.linalg.norm(grad) < 1e-6


def test_sample_distribution_matches_slice_probs():
    rng = np.random.default_rng(31)
    policy = ToyPolicy(1, DIMS)
    params = policy.init_params(rng)
    policy.view(params, "slice")[0] = np.linspace(-1, 1, 12)
    counts = np.bincount([policy.sample(params, 0, rng).slice_index for _ in range(20_000)], minlength=12)
    np.testing.assert_allclose(counts / counts.sum(), policy.slice_probs(params, 0), atol=0.01)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=4))
def test_decoded_boxes_always_valid(v):
    policy = ToyPolicy(1, DIMS)
    box = policy.box_from_vector(np.array(v))
    assert box.within(20, 30)


def test_box_vector_round_trip():
    policy = ToyPolicy(1, DIMS)
    for box in (Box2D(0, 0, 1, 1), Box2D(3, 4, 10, 9), Box2D(0, 0, 30, 20), Box2D(7, 2, 12, 19)):
        assert policy.box_from_vector(box_vector(box)) == box


def test_cold_start_fit():
    policy = ToyPolicy(1, DIMS, max_boxes=2, slice_offsets=True)
    params = policy.init_params(np.random.default_rng(0))
    a, b = Box2D(2, 3, 8, 9), Box2D(15, 3, 21, 9)
    targets = [[EvidenceAnchor(5, (a, b))] * 3 + [EvidenceAnchor(6, (a,))]]
    fitted = fit_cold_start(policy, params, targets, box_std=0.5)
    probs = policy.slice_probs(fitted, 0)
    assert np.argmax(probs) == 5 and probs[5] > probs[6] > probs[0]
    modal = policy.decode(policy.mode(fitted, 0))
    assert modal == EvidenceAnchor(5, (a, b))
    np.testing.assert_allclose(np.exp(policy.view(fitted, "logstd")[0]), 0.5)


def test_cold_start_keeps_slot_order():
    policy = ToyPolicy(1, DIMS, max_boxes=2)
    params = policy.init_params(np.random.default_rng(0))
    left, right = Box2D(2, 3, 8, 9), Box2D(15, 3, 21, 9)
    shifted_right = Box2D(15, 1, 21, 7)  # sorts before `left` by (y0, x0)
    targets = [[EvidenceAnchor(5, (left, right)), EvidenceAnchor(5, (left, shifted_right))]]
    fitted = fit_cold_start(policy, params, targets)
    means = policy.view(fitted, "mean")[0]
    assert means[0, 0] < 10 < means[1, 0]
