import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from duoseg import losses as L

import oracles

LN2 = math.log(2)


def t(x, dtype=torch.float64):
    return torch.tensor(x, dtype=dtype)


def const_critic(value):
    return lambda m: torch.full_like(m, value)


def test_ce_examples():
    ones = torch.ones(3, 3, dtype=torch.float64)
    assert L.ce_loss(ones, ones).item() == pytest.approx(-math.log(1 - 1e-7), abs=1e-12)
    target = t([[1.0, 0.0], [0.0, 1.0]])
    assert L.ce_loss(torch.full((2, 2), 0.5, dtype=torch.float64), target).item() == pytest.approx(LN2)
    # -(log 0.9 + log 0.8) / 2
    assert L.ce_loss(t([0.9, 0.2]), t([1.0, 0.0])).item() == pytest.approx(0.164252033486018, abs=1e-12)


def test_dice_examples():
    y = t([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    assert L.dice_loss(y, y).item() <= 1 / (2 * 3 + 1)
    assert L.dice_loss(y, y).item() == pytest.approx(0.0, abs=1e-12)
    # total miss with k=3 foreground pixels: 1 - s/(k+s)
    assert L.dice_loss(torch.zeros_like(y), y).item() == pytest.approx(1 - 1 / 4)
    assert L.dice_loss(t([1.0, 1.0, 0.0, 0.0]), t([1.0, 0.0, 1.0, 0.0])).item() == pytest.approx(0.4)


def test_supervised_examples():
    y = t([1.0, 1.0, 0.0, 0.0])
    half = torch.full((4,), 0.5, dtype=torch.float64)
    # ln 2 + (1 - (2*1 + 1) / (2 + 2 + 1))
    assert L.supervised_loss(half, y).item() == pytest.approx(1.0931471805599453)
    perfect = L.supervised_loss(y, y).item()
    assert 0 <= perfect < 1e-6
    p = torch.rand(2, 3, 3, dtype=torch.float64)
    tgt = (torch.rand(2, 3, 3) > 0.5).double()
    assert L.supervised_loss(p, tgt, 1.0, 0.0).item() == L.ce_loss(p, tgt).item()


def test_agreement_examples():
    sat = t([[1.0, 0.0], [0.0, 1.0]])
    assert L.agreement_loss(sat, sat).item() == pytest.approx(-math.log(1 - 1e-7), abs=1e-12)
    half = torch.full((2, 2), 0.5, dtype=torch.float64)
    assert L.agreement_loss(half, half).item() == pytest.approx(LN2)
    # -(0.9 log 0.1 + 0.1 log 0.9)
    assert L.agreement_loss(t([0.9]), t([0.1])).item() == pytest.approx(2.0828626352604234, abs=1e-12)


def test_critic_loss_examples():
    preds = [torch.rand(2, 4, 4, dtype=torch.float64) for _ in range(2)]
    gts = [(torch.rand(2, 4, 4) > 0.5).double() for _ in range(2)]
    assert L.adv_loss_labeled_for_critic(const_critic(0.5), preds, gts).item() == pytest.approx(2 * LN2)

    def perfect(m):
        return torch.where(m == m.round(), torch.ones_like(m), torch.zeros_like(m))

    soft = [torch.full((1, 3, 3), 0.3, dtype=torch.float64)]
    hard = [torch.ones(1, 3, 3, dtype=torch.float64)]
    assert L.adv_loss_labeled_for_critic(perfect, soft, hard).item() == pytest.approx(0.0, abs=1e-6)


def test_seg_adv_examples():
    preds = [torch.rand(1, 3, 3, dtype=torch.float64)]
    assert L.adv_loss_for_seg(const_critic(1.0), preds).item() == pytest.approx(0.0, abs=1e-6)
    assert L.adv_loss_for_seg(const_critic(0.5), preds).item() == pytest.approx(LN2)


def test_adv_losses_match_pixel_loop_2x2():
    rng = np.random.default_rng(3)
    psi_t = lambda m: torch.sigmoid(3 * m - 1)
    psi_s = lambda v: 1 / (1 + math.exp(-(3 * v - 1)))
    for _ in range(10):
        preds = [rng.uniform(size=(2, 2)).tolist() for _ in range(2)]
        gts = [(rng.uniform(size=(2, 2)) > 0.5).astype(float).tolist() for _ in range(2)]
        got = L.adv_loss_labeled_for_critic(psi_t, [t(p) for p in preds], [t(g) for g in gts]).item()
        assert got == pytest.approx(oracles.critic_loss(psi_s, preds, gts), abs=1e-6)
        got = L.adv_loss_for_seg(psi_t, [t(p) for p in preds]).item()
        assert got == pytest.approx(oracles.gen_adv(psi_s, preds), abs=1e-6)


def test_shape_mismatch_raises():
    a, b = torch.rand(2, 2), torch.rand(3, 2)
    for fn in (L.ce_loss, L.dice_loss, L.supervised_loss, L.agreement_loss):
        with pytest.raises(ValueError):
            fn(a, b)


def test_nan_critic_aborts():
    with pytest.raises(FloatingPointError):
        L.adv_loss_for_seg(lambda m: torch.full_like(m, float("nan")), [torch.rand(2, 2)])


def test_total_seg_loss():
    w = L.LossWeights()
    assert (w.lambda_s, w.lambda_u, w.lambda_c) == (1.0, 0.3, 0.2)
    z = torch.zeros(())
    assert L.total_seg_loss(w, [z], z, [z]).total.item() == 0.0
    b = L.total_seg_loss(w, [t(1.0)], t(2.0), [t(3.0)])
    assert b.total.item() == pytest.approx(2.2, rel=1e-12)
    no_u = L.LossWeights(1.0, 0.0, 0.2)
    assert L.total_seg_loss(no_u, [t(1.0)], t(5.0), [t(3.0)]).total.item() == \
        L.total_seg_loss(no_u, [t(1.0)], t(50.0), [t(3.0)]).total.item()
    # two supervised terms and the labeled/unlabeled adversarial terms are summed
    b = L.total_seg_loss(w, [t(0.5), t(0.25)], t(1.0), [t(1.0), t(2.0)], parts={"adv1": t(1.0)})
    d = b.to_dict()
    assert d["supervised"] == 0.75 and d["critic_adv"] == 3.0 and d["adv1"] == 1.0
    assert d["total"] == pytest.approx(0.75 + 0.3 + 0.6, rel=1e-6)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        L.LossWeights(lambda_u=-1)


def test_confidence_weighting_uniform_is_identity():
    p1, p2 = torch.rand(2, 3, 3), torch.rand(2, 3, 3)
    ones = torch.full_like(p1, 0.7)
    assert L.agreement_loss(p1, p2, conf1=ones, conf2=ones).item() == pytest.approx(
        L.agreement_loss(p1, p2).item(), rel=1e-6
    )


def test_detached_targets_change_gradient_only():
    p1 = torch.rand(3, 3, dtype=torch.float64, requires_grad=True)
    p2 = torch.rand(3, 3, dtype=torch.float64, requires_grad=True)
    full = L.agreement_loss(p1, p2)
    det = L.agreement_loss(p1, p2, detach_targets=True)
    assert full.item() == pytest.approx(det.item())
    g_full = torch.autograd.grad(full, p1)[0]
    g_det = torch.autograd.grad(det, p1)[0]
    assert not torch.allclose(g_full, g_det)


# --- property tests -------------------------------------------------------

maps = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=60, deadline=None)
@given(maps)
def test_nonnegative_and_symmetric(rng):
    p1 = torch.tensor(rng.uniform(size=(2, 3, 3)))
    p2 = torch.tensor(rng.uniform(size=(2, 3, 3)))
    y = torch.tensor((rng.uniform(size=(2, 3, 3)) > 0.5).astype(float))
    psi = lambda m: torch.sigmoid(m - 0.5)
    for v in (
        L.ce_loss(p1, y), L.dice_loss(p1, y), L.supervised_loss(p1, y),
        L.agreement_loss(p1, p2), L.adv_loss_labeled_for_critic(psi, [p1], [y]),
        L.adv_loss_for_seg(psi, [p1, p2]),
    ):
        assert v.item() >= 0
    assert L.agreement_loss(p1, p2).item() == L.agreement_loss(p2, p1).item()


@settings(max_examples=40, deadline=None)
@given(maps)
def test_batch_loss_is_mean_of_sample_losses(rng):
    p = torch.tensor(rng.uniform(size=(4, 3, 3)))
    q = torch.tensor(rng.uniform(size=(4, 3, 3)))
    y = torch.tensor((rng.uniform(size=(4, 3, 3)) > 0.5).astype(float))
    psi = lambda m: torch.sigmoid(2 * m)
    cases = [
        (L.ce_loss, (p, y)), (L.dice_loss, (p, y)), (L.supervised_loss, (p, y)),
        (L.agreement_loss, (p, q)),
        (lambda a, b: L.adv_loss_labeled_for_critic(psi, [a], [b]), (p, y)),
        (lambda a, b: L.adv_loss_for_seg(psi, [a]), (p, y)),
    ]
    for fn, (a, b) in cases:
        whole = fn(a, b).item()
        per = np.mean([fn(a[i:i + 1], b[i:i + 1]).item() for i in range(4)])
        assert whole == pytest.approx(per, abs=1e-6)


@pytest.mark.parametrize("target", [0.0, 1.0])
def test_minimized_at_target(target):
    grid = np.linspace(0.0, 1.0, 101)
    y = t([target])
    for fn in (L.ce_loss, L.dice_loss):
        vals = [fn(t([g]), y).item() for g in grid]
        assert grid[int(np.argmin(vals))] == target


def _fd_check(fn, x, rng, points=10):
    """Central differences vs autograd at ``points`` random elements of x."""
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    h = 1e-6
    for _ in range(points):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (fn(xp).item() - fn(xm).item()) / (2 * h)
        assert abs(fd - g[idx].item()) <= 1e-3 * max(abs(fd), 1e-8) + 1e-9, (idx, fd, g[idx].item())


def test_loss_gradients_finite_difference():
    rng = np.random.default_rng(0)
    psi = lambda m: torch.sigmoid(2 * m - 0.7)
    for _ in range(10):
        p = torch.tensor(rng.uniform(0.05, 0.95, size=(2, 2)))
        q = torch.tensor(rng.uniform(0.05, 0.95, size=(2, 2)))
        y = torch.tensor((rng.uniform(size=(2, 2)) > 0.5).astype(float))
        _fd_check(lambda a: L.ce_loss(a, y), p, rng)
        _fd_check(lambda a: L.dice_loss(a, y), p, rng)
        _fd_check(lambda a: L.supervised_loss(a, y), p, rng)
        _fd_check(lambda a: L.agreement_loss(a, q), p, rng)
        _fd_check(lambda a: L.adv_loss_labeled_for_critic(psi, [a], [y]), p, rng)
        _fd_check(lambda a: L.adv_loss_for_seg(psi, [a]), p, rng)
