import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from coarsematte.losses import (LossWeights, l1_mean, mpn_loss, mrn_loss, qun_consistency_loss, qun_identity_loss,
                                qun_loss)
from oracles import l1_loop


def test_mpn_loss_worst_case():
    pred = np.stack([np.ones((4, 4)), np.zeros((4, 4))], axis=-1)
    assert abs(float(mpn_loss(pred, np.zeros((4, 4)), np.ones((4, 4)))) - 1.0) <= 1e-9


def test_mpn_loss_two_pixels():
    pred = np.stack([[0.8, 0.2], [0.2, 0.8]], axis=-1)[None]  # (1, 2, 2)
    loss = mpn_loss(pred, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert abs(float(loss) - 0.2) <= 1e-9


def test_qun_identity_hand_value():
    q = np.full((3, 3), 0.5)
    assert abs(float(qun_identity_loss(q, np.zeros((3, 3)), q, np.ones((3, 3)))) - 1.0) <= 1e-9


def test_qun_midpoint_case():
    r = np.random.default_rng(0)
    x, x2 = r.uniform(size=(2, 8, 8))
    mid = (x + x2) / 2
    d = np.abs(x - x2).mean()
    assert abs(float(qun_loss(mid, x, mid, x2)) - 0.25 * d) <= 1e-9
    assert float(qun_consistency_loss(mid, mid)) == 0.0


def test_mrn_hand_values():
    rgb = np.full((5, 5, 3), 0.4)
    alpha = np.full((5, 5), 0.3)
    pred = np.concatenate([rgb, (alpha + 0.1)[..., None]], axis=-1)
    assert abs(float(mrn_loss(pred, rgb, alpha)) - 0.05) <= 1e-9
    pred = np.concatenate([rgb + 0.2, alpha[..., None]], axis=-1)
    assert abs(float(mrn_loss(pred, rgb, alpha)) - 0.1) <= 1e-9


def test_losses_match_loops(np_rng):
    w = LossWeights(lambda_L=0.3, lambda_1=0.7, lambda_2=0.2, lambda_H=0.9)
    pred2 = np_rng.uniform(size=(6, 7, 2))
    fg, bg = np_rng.uniform(size=(2, 6, 7))
    expected = 0.3 * l1_loop(pred2[..., 0], fg) + 0.7 * l1_loop(pred2[..., 1], bg)
    assert abs(float(mpn_loss(pred2, fg, bg, w)) - expected) <= 1e-9

    qx, x, qx2, x2 = np_rng.uniform(size=(4, 6, 7))
    ident = l1_loop(qx, x) + l1_loop(qx2, x2)
    cons = l1_loop(qx, qx2)
    assert abs(float(qun_identity_loss(qx, x, qx2, x2)) - ident) <= 1e-9
    assert abs(float(qun_consistency_loss(qx, qx2)) - cons) <= 1e-9
    assert abs(float(qun_loss(qx, x, qx2, x2, w)) - (0.7 * ident + 0.2 * cons)) <= 1e-9

    pred4 = np_rng.uniform(size=(6, 7, 4))
    rgb, a = np_rng.uniform(size=(6, 7, 3)), np_rng.uniform(size=(6, 7))
    expected = 0.9 * l1_loop(pred4[..., :3], rgb) + 0.1 * l1_loop(pred4[..., 3], a)
    assert abs(float(mrn_loss(pred4, rgb, a, w)) - expected) <= 1e-9


def test_layouts_agree(np_rng):
    hwc = np_rng.uniform(size=(5, 6, 4))
    rgb, a = np_rng.uniform(size=(5, 6, 3)), np_rng.uniform(size=(5, 6))
    chw = np.moveaxis(hwc, -1, 0)
    a_hwc = float(mrn_loss(hwc, rgb, a))
    a_chw = float(mrn_loss(chw, np.moveaxis(rgb, -1, 0), a))
    a_nchw = float(mrn_loss(chw[None], np.moveaxis(rgb, -1, 0)[None], a[None]))
    assert a_hwc == pytest.approx(a_chw, abs=1e-12) == pytest.approx(a_nchw, abs=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        l1_mean(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        mpn_loss(np.zeros((3, 3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(lambda_L=1.5)


def test_tensor_inputs_keep_graph():
    p = torch.full((1, 2, 3, 3), 0.7, dtype=torch.float64, requires_grad=True)
    loss = mpn_loss(p, torch.ones(1, 3, 3, dtype=torch.float64), torch.zeros(1, 3, 3, dtype=torch.float64))
    loss.backward()
    # d/dp of 0.5*mean|p-1| = -0.5/9 on the fg channel; bg channel +0.5/9
    np.testing.assert_allclose(p.grad[0, 0].numpy(), -0.5 / 9)
    np.testing.assert_allclose(p.grad[0, 1].numpy(), 0.5 / 9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)), arrays(np.float64, (4, 4), elements=st.floats(0, 1)))
def test_l1_properties(a, b):
    ab = float(l1_mean(a, b))
    assert ab >= 0 and ab == float(l1_mean(b, a))
    assert float(l1_mean(a, a)) == 0.0
