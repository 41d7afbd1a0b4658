import math

import numpy as np
import pytest
from oracles import brute_pairwise_loss, brute_projection_loss

from motionbox import autodiff as ad
from motionbox.autodiff import Graph, Tensor, grad_check
from motionbox.losses import (
    LossSchedule,
    detection_loss,
    pair_probability,
    pairwise_loss,
    projection_loss,
    total_loss,
)
from motionbox.pairwise import PairSet, SupervisionParams, build_pair_set, enumerate_pairs


def pair_set(pairs, y):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 4)
    n = len(pairs)
    return PairSet(pairs, np.asarray(y, dtype=np.uint8), np.ones(n), np.ones(n))


def score_map(values):
    return Tensor(np.asarray(values, dtype=np.float64)[None], requires_grad=True)


def test_pair_probability_values():
    assert pair_probability(1.0, 1.0) == 1.0
    assert pair_probability(0.5, 0.123) == 0.5
    assert pair_probability(0.3, 0.8) == pytest.approx(0.38, abs=1e-15)


def test_pairwise_loss_examples():
    ones = score_map(np.ones((3, 3)))
    pairs = enumerate_pairs((0, 0, 3, 3), (3, 3))
    ps = pair_set(pairs, np.ones(len(pairs)))
    assert pairwise_loss(ones, ps).item() == 0.0
    half = score_map([[0.5, 0.5]])
    assert pairwise_loss(half, pair_set([0, 0, 0, 1], [1])).item() == pytest.approx(0.693147, abs=1e-6)
    assert pairwise_loss(half, pair_set([0, 0, 0, 1], [0])).item() == 0.0


def test_pairwise_loss_normalizes_by_all_pairs():
    m = score_map([[0.5, 0.5, 0.5]])
    ps = pair_set([[0, 0, 0, 1], [0, 1, 0, 2]], [1, 0])
    assert pairwise_loss(m, ps).item() == pytest.approx(math.log(2) / 2, abs=1e-15)


def test_pairwise_loss_empty_set_rejected():
    with pytest.raises(ValueError):
        pairwise_loss(score_map([[0.5]]), pair_set(np.zeros((0, 4)), []))


def test_pairwise_loss_saturated_scores_stay_finite():
    m = score_map([[1.0, 0.0]])
    loss = pairwise_loss(m, pair_set([0, 0, 0, 1], [1]))
    assert loss.item() == pytest.approx(-math.log(1e-8))


def test_pairwise_loss_matches_oracle():
    rng = np.random.default_rng(0)
    params = SupervisionParams(tau_color=0.3, tau_flow=0.6, theta_color=2.0, theta_flow=0.5, dilation=1)
    for _ in range(10):
        h, w = rng.integers(2, 9, size=2)
        m = rng.uniform(0.01, 0.99, size=(h, w))
        color = rng.normal(0, 1.5, size=(h, w, 3))
        flow = rng.uniform(0, 0.3, size=(h, w, 3))
        ps = build_pair_set((0, 0, h, w), color, flow, params)
        got = pairwise_loss(score_map(m), ps).item()
        want = brute_pairwise_loss(m.tolist(), ps.pairs.tolist(), color.tolist(), flow.tolist(), 2.0, 0.5, 0.3, 0.6)
        assert abs(got - want) <= 1e-12


def test_pairwise_grad_check_6x6():
    rng = np.random.default_rng(1)
    ps = build_pair_set((1, 1, 5, 5), rng.normal(0, 1, (6, 6, 3)), rng.uniform(0, 0.3, (6, 6, 3)), SupervisionParams())
    assert ps.y.any()
    logits = Tensor(rng.standard_normal((1, 6, 6)))
    assert grad_check(lambda t: pairwise_loss(ad.sigmoid(t), ps), [logits]) < 1e-4


def test_projection_examples():
    ind = np.zeros((6, 7))
    ind[1:4, 2:6] = 1.0
    assert projection_loss(score_map(ind), (1, 2, 4, 6)).item() < 1e-6
    assert projection_loss(score_map(np.zeros((6, 7))), (1, 2, 4, 6)).item() == pytest.approx(2.0, abs=1e-9)
    # a diagonal-ish arrangement that still projects onto the full box
    cross = np.zeros((6, 7))
    for r, c in zip([1, 2, 3, 3], [2, 3, 4, 5]):
        cross[r, c] = 1.0
    assert projection_loss(score_map(cross), (1, 2, 4, 6)).item() < 1e-6


def test_projection_matches_oracle_and_grad():
    rng = np.random.default_rng(2)
    for _ in range(5):
        m = rng.uniform(0, 1, size=(5, 6))
        box = (1, 1, 4, 5)
        got = projection_loss(score_map(m), box).item()
        assert got == pytest.approx(brute_projection_loss(m.tolist(), box), abs=1e-12)
    logits = Tensor(rng.standard_normal((1, 5, 6)))
    assert grad_check(lambda t: projection_loss(ad.sigmoid(t), (1, 1, 4, 5)), [logits]) < 1e-4


def test_projection_box_errors():
    with pytest.raises(ValueError):
        projection_loss(score_map(np.zeros((4, 4))), (1, 1, 1, 3))
    with pytest.raises(ValueError):
        projection_loss(score_map(np.zeros((4, 4))), (0, 0, 5, 3))


def _det_inputs(npos):
    obj_t = np.zeros((3, 3))
    ltrb_t = np.zeros((4, 3, 3))
    pos = np.zeros((3, 3), dtype=bool)
    if npos:
        pos[1, 1] = True
        obj_t[1, 1] = 1.0
        ltrb_t[:, 1, 1] = [1.0, 2.0, 1.5, 0.5]
    return obj_t, ltrb_t, pos


def test_detection_perfect_fit():
    obj_t, ltrb_t, pos = _det_inputs(1)
    logits = Tensor(np.where(obj_t > 0, 30.0, -30.0)[None])
    total, obj, reg = detection_loss(logits, Tensor(ltrb_t.copy()), obj_t, ltrb_t, pos)
    assert total.item() < 1e-3 and reg.item() == 0.0


def test_detection_no_positives():
    obj_t, ltrb_t, pos = _det_inputs(0)
    logits = Tensor(np.zeros((1, 3, 3)))
    total, obj, reg = detection_loss(logits, Tensor(np.ones((4, 3, 3))), obj_t, ltrb_t, pos)
    assert reg.item() == 0.0
    assert total.item() == pytest.approx(9 * math.log(2))


def test_detection_smooth_l1_half_per_side():
    obj_t, ltrb_t, pos = _det_inputs(1)
    logits = Tensor(np.where(obj_t > 0, 50.0, -50.0)[None])
    _, _, reg = detection_loss(logits, Tensor(ltrb_t + 1.0), obj_t, ltrb_t, pos)
    assert reg.item() == pytest.approx(0.5)


def test_detection_grad_check():
    rng = np.random.default_rng(3)
    obj_t, ltrb_t, pos = _det_inputs(1)
    logits = Tensor(rng.standard_normal((1, 3, 3)))
    ltrb = Tensor(rng.standard_normal((4, 3, 3)) + 0.3)
    f = lambda a, b: detection_loss(a, b, obj_t, ltrb_t, pos)[0]  # noqa: E731
    assert grad_check(f, [logits, ltrb]) < 1e-4


def test_schedule_ramp():
    s = LossSchedule(1.0, 1.0, warmup_steps=100)
    assert s.pairwise_weight(0) == 0.0
    assert s.pairwise_weight(50) == 0.5
    assert s.pairwise_weight(100) == 1.0
    assert s.pairwise_weight(1000) == 1.0
    assert LossSchedule(warmup_steps=0).pairwise_weight(0) == 1.0


def test_total_loss_combination():
    det, proj, pair = (Tensor(np.array([v])) for v in (1.0, 2.0, 4.0))
    s = LossSchedule(0.5, 2.0, warmup_steps=10)
    assert total_loss(det, proj, pair, 0, s).item() == 2.0
    assert total_loss(det, proj, pair, 5, s).item() == 6.0
    assert total_loss(det, proj, pair, 10, s).item() == 10.0


def test_backward_reaches_score_map():
    m = score_map(np.full((3, 3), 0.3))
    pairs = enumerate_pairs((0, 0, 2, 2), (3, 3))
    ps = pair_set(pairs, np.ones(len(pairs)))
    with Graph() as g:
        loss = pairwise_loss(m, ps)
    g.backward(loss)
    assert np.any(m.grad != 0)
