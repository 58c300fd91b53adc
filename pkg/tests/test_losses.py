import numpy as np
import pytest

from nicelab.diffcore import Tensor
from nicelab.losses import (LossConfig, LossWeights, bce_loss, dice_loss, giou_loss, giou_terms, smooth_l1,
                            smooth_l1_loss, total_loss)


def test_bce_perfect_prediction():
    eps = 1e-7
    Y = np.random.default_rng(0).random((2, 4, 4)) < 0.5
    M = np.where(Y, 1 - eps, eps)
    assert bce_loss(M, Y.astype(float)).data <= 1e-6


def test_bce_half():
    Y = np.random.default_rng(1).random((3, 4, 4)) < 0.5
    assert float(bce_loss(np.full((3, 4, 4), 0.5), Y).data) == pytest.approx(np.log(2), abs=1e-15)


def test_bce_elementwise_oracle():
    rng = np.random.default_rng(2)
    M, Y = rng.random((2, 5, 5)), (rng.random((2, 5, 5)) < 0.4).astype(float)
    expect = np.mean([-(y * np.log(m) + (1 - y) * np.log(1 - m)) for m, y in zip(M.ravel(), Y.ravel())])
    assert abs(float(bce_loss(M, Y).data) - expect) < 1e-10


def test_bce_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        bce_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_dice_perfect_and_disjoint():
    Y = np.zeros((1, 20, 20))
    Y[0, :10] = 1
    assert float(dice_loss(Y, Y).data) == pytest.approx(0.0, abs=1e-12)
    assert float(dice_loss(1 - Y, Y).data) > 0.99


def test_dice_empty_both():
    assert float(dice_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), eps=1.0).data) == 0.0


def test_smooth_l1_values():
    assert float(smooth_l1(np.array([0.0])).data[0]) == 0.0
    assert float(smooth_l1(np.array([1.0]), 0.5).data[0]) == pytest.approx(0.75)
    # both branches agree at the switch point
    lo = (0.5 - 1e-12) ** 2 * 0.5 / 0.5
    assert float(smooth_l1(np.array([0.5]), 0.5).data[0]) == pytest.approx(0.25)
    assert lo == pytest.approx(0.25)


def test_smooth_l1_printed_variant():
    assert float(smooth_l1(np.array([0.4]), 0.5, printed=True).data[0]) == pytest.approx(0.08)
    assert float(smooth_l1(np.array([1.0]), 0.5, printed=True).data[0]) == pytest.approx(0.5)


def test_smooth_l1_loss_identical_boxes():
    B = np.array([[1.0, 2.0, 5.0, 7.0]])
    assert float(smooth_l1_loss(B, B, 8, 8).data) == 0.0


def test_giou_identical_and_forced():
    B = np.array([[0.0, 0.0, 1.0, 1.0]])
    assert float(giou_loss(B, B).data) == pytest.approx(0.0, abs=1e-12)
    assert float(giou_loss(B, np.array([[2.0, 2.0, 3.0, 3.0]])).data) == pytest.approx(16 / 9, abs=1e-12)


def test_giou_terms():
    t = giou_terms(np.array([[0, 0, 2, 2]]), np.array([[1, 1, 3, 3]]))
    assert (t.intersection[0], t.union[0], t.enclosure[0]) == (1.0, 7.0, 9.0)


def test_giou_random_geometry_oracle():
    rng = np.random.default_rng(3)
    a = rng.random((1000, 2)) * 10
    b = rng.random((1000, 2)) * 10
    B = np.hstack([a, a + rng.random((1000, 2)) * 5 + 0.1])
    G = np.hstack([b, b + rng.random((1000, 2)) * 5 + 0.1])
    vals = []
    for p, g in zip(B, G):
        ix = max(0.0, min(p[2], g[2]) - max(p[0], g[0]))
        iy = max(0.0, min(p[3], g[3]) - max(p[1], g[1]))
        inter = ix * iy
        union = (p[2] - p[0]) * (p[3] - p[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter
        c = (max(p[2], g[2]) - min(p[0], g[0])) * (max(p[3], g[3]) - min(p[1], g[1]))
        vals.append(1 - (inter / union - (c - union) / c))
    assert abs(float(giou_loss(B, G).data) - np.mean(vals)) < 1e-10


def _random_case(rng, L=3, N=3):
    masks = [Tensor(rng.random((N, 6, 6))) for _ in range(L)]
    Y = (rng.random((N, 6, 6)) < 0.4).astype(float)
    xy = rng.random((N, 2)) * 6
    B = np.hstack([xy, xy + rng.random((N, 2)) * 4 + 0.5])
    G = np.hstack([xy + 0.3, xy + rng.random((N, 2)) * 4 + 1.0])
    return masks, B, Y, G


def test_total_zero_weights():
    masks, B, Y, G = _random_case(np.random.default_rng(4))
    out = total_loss(masks, B, Y, G, 12, 12, LossWeights(0, 0, 0, 0))
    assert float(out.total.data) == 0.0


def test_total_single_layer_is_sum():
    masks, B, Y, G = _random_case(np.random.default_rng(5), L=1)
    out = total_loss(masks, B, Y, G, 12, 12)
    direct = (bce_loss(masks[0], Y).data + dice_loss(masks[0], Y).data
              + smooth_l1_loss(B, G, 12, 12).data + giou_loss(B, G).data)
    assert float(out.total.data) == pytest.approx(float(direct), abs=1e-12)


def test_total_recombination_oracle():
    masks, B, Y, G = _random_case(np.random.default_rng(6))
    w = LossWeights(0.5, 2.0, 3.0, 0.7)
    cfg = LossConfig(xi=0.3, dice_eps=0.5)
    out = total_loss(masks, B, Y, G, 12, 12, w, cfg)
    bce = np.mean([bce_loss(m, Y).data for m in masks])
    dice = np.mean([dice_loss(m, Y, 0.5).data for m in masks])
    expect = 0.5 * bce + 2.0 * dice + 3.0 * smooth_l1_loss(B, G, 12, 12, cfg).data + 0.7 * giou_loss(B, G).data
    assert abs(float(out.total.data) - float(expect)) < 1e-12
    assert set(out.as_row()) == {"bce", "dice", "smooth_l1", "giou", "total"}


@pytest.mark.parametrize("term", ["bce", "dice", "smooth_l1", "giou"])
def test_weight_monotonicity(term):
    masks, B, Y, G = _random_case(np.random.default_rng(7))
    lo = total_loss(masks, B, Y, G, 12, 12, LossWeights(**{term: 1.0})).total.data
    hi = total_loss(masks, B, Y, G, 12, 12, LossWeights(**{term: 2.0})).total.data
    assert hi >= lo


def test_zero_box_weights_without_boxes():
    masks, _, Y, _ = _random_case(np.random.default_rng(8))
    out = total_loss(masks, None, Y, None, 12, 12, LossWeights(1, 1, 0, 0))
    assert out.terms["smooth_l1"] == 0.0 and out.terms["giou"] == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(bce=-1.0)
