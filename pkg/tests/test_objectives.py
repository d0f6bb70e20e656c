"""Losses, discriminator, optimizer: analytic oracles and measured runs."""

import math

import numpy as np
import pytest

from quadseg.objectives import (
    AdamW,
    DiscConfig,
    OptimizerDiverged,
    adversarial_losses,
    disc_loss,
    discriminator_forward,
    gen_adv_loss,
    init_disc_params,
    lr_schedule,
    seg_cross_entropy,
    total_loss,
)
from quadseg.tensor import (
    ShapeError,
    Tape,
    Tensor,
    finite_diff_check,
    softmax_lastdim,
    transpose,
    tsum,
)

# ---------------------------------------------------------------------------
# segmentation cross-entropy
# ---------------------------------------------------------------------------


def test_ce_perfect_prediction_is_zero():
    logits = np.zeros((2, 2, 2))
    logits[1] = 200.0          # prob ~ 1 on class 1 everywhere
    labels = np.ones((2, 2), dtype=int)
    loss, n = seg_cross_entropy(Tensor(logits), labels)
    assert n == 4
    assert abs(loss.item()) < 1e-12


def test_ce_uniform_two_class_is_ln2():
    loss, _ = seg_cross_entropy(Tensor(np.zeros((2, 3, 3))),
                                np.zeros((3, 3), dtype=int))
    assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_ce_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 2, 2))
    labels = rng.integers(0, 3, size=(2, 2))
    loss, n = seg_cross_entropy(Tensor(logits), labels)
    # direct per-pixel summation
    acc = 0.0
    for i in range(2):
        for j in range(2):
            z = logits[:, i, j]
            p = np.exp(z - z.max())
            p /= p.sum()
            acc -= math.log(p[labels[i, j]])
    assert abs(loss.item() - acc / 4.0) < 1e-12
    assert n == 4


def test_ce_valid_mask_and_zero_valid():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(2, 2, 2)))
    labels = np.zeros((2, 2), dtype=int)
    none_valid = np.zeros((2, 2), dtype=bool)
    loss, n = seg_cross_entropy(logits, labels, valid=none_valid)
    assert n == 0 and loss.item() == 0.0
    one = np.zeros((2, 2), dtype=bool)
    one[0, 0] = True
    loss1, n1 = seg_cross_entropy(logits, labels, valid=one)
    assert n1 == 1
    z = logits.data[:, 0, 0]
    p = np.exp(z - z.max())
    p /= p.sum()
    assert abs(loss1.item() + math.log(p[0])) < 1e-12


def test_ce_class_weights_reweight_pixels():
    """With weights [1, 9] a single class-1 pixel carries 9x the mass of a
    class-0 pixel under the weighted-mean normalization."""
    logits = np.zeros((2, 1, 2))
    logits[:, 0, 0] = [3.0, -1.0]
    logits[:, 0, 1] = [0.5, 2.0]
    labels = np.array([[0, 1]])
    cw = np.array([1.0, 9.0])
    loss, _ = seg_cross_entropy(Tensor(logits), labels, class_weights=cw)

    def nll(z, y):
        p = np.exp(z - z.max())
        p /= p.sum()
        return -math.log(p[y])

    want = (1.0 * nll(logits[:, 0, 0], 0) + 9.0 * nll(logits[:, 0, 1], 1)) / 10.0
    assert abs(loss.item() - want) < 1e-12


def test_ce_nonnegative_property():
    rng = np.random.default_rng(2)
    for _ in range(50):
        logits = Tensor(rng.normal(size=(2, 4, 4)) * 3.0)
        labels = rng.integers(0, 2, size=(4, 4))
        loss, _ = seg_cross_entropy(logits, labels)
        assert loss.item() >= 0.0


def test_ce_rejects_bad_shapes_and_labels():
    with pytest.raises(ShapeError):
        seg_cross_entropy(Tensor(np.zeros((2, 4, 4))), np.zeros((3, 3), dtype=int))
    with pytest.raises(ValueError):
        seg_cross_entropy(Tensor(np.zeros((2, 2, 2))), np.full((2, 2), 5))


def test_ce_gradient():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 2, size=(4, 4))
    err = finite_diff_check(
        lambda t: seg_cross_entropy(t, labels,
                                    class_weights=np.array([1.0, 10.0]))[0],
        Tensor(rng.normal(size=(2, 4, 4))))
    assert err < 1e-6


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

MICRO_DISC = DiscConfig(channels=(4, 1))


def test_disc_config_requires_unit_tail():
    with pytest.raises(ValueError):
        DiscConfig(channels=(8, 16))


def test_disc_zero_weights_zero_logits():
    cfg = DiscConfig(channels=(8, 16, 32, 64, 1))
    params = init_disc_params(cfg, np.random.default_rng(4))
    for k in params:
        params[k] = Tensor(np.zeros_like(params[k].data))
    out = discriminator_forward(params, cfg,
                                Tensor(np.random.default_rng(5).random((2, 64, 64))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_disc_shape_chain_64px_five_layers():
    cfg = DiscConfig(channels=(8, 16, 32, 64, 1))
    params = init_disc_params(cfg, np.random.default_rng(6))
    out = discriminator_forward(params, cfg, Tensor(np.zeros((2, 64, 64))))
    assert out.shape == (1, 2, 2)


def test_disc_too_small_input_raises():
    cfg = DiscConfig(channels=(8, 16, 32, 64, 1))
    params = init_disc_params(cfg, np.random.default_rng(7))
    with pytest.raises(ShapeError):
        discriminator_forward(params, cfg, Tensor(np.zeros((2, 8, 8))))


def test_disc_gradient():
    params = init_disc_params(MICRO_DISC, np.random.default_rng(8))
    x = np.random.default_rng(9).random((2, 8, 8))
    name = "disc.conv0.w"

    def f(t):
        trial = dict(params)
        trial[name] = t
        return tsum(discriminator_forward(trial, MICRO_DISC, Tensor(x)))

    assert finite_diff_check(f, params[name].copy()) < 1e-5


# ---------------------------------------------------------------------------
# adversarial and total losses
# ---------------------------------------------------------------------------


def test_dloss_at_zero_logits_is_two_ln2():
    z = Tensor(np.zeros((1, 2, 2)))
    d, g = adversarial_losses(z, z)
    assert abs(d.item() - 2.0 * math.log(2.0)) < 1e-12
    assert abs(g.item() - math.log(2.0)) < 1e-12


def test_dloss_vanishes_for_confident_discriminator():
    real = Tensor(np.full((1, 2, 2), 50.0))
    fake = Tensor(np.full((1, 2, 2), -50.0))
    assert disc_loss(real, fake).item() < 1e-20


def test_gen_loss_decreases_when_fake_scores_rise():
    lo = gen_adv_loss(Tensor(np.full((1, 2, 2), -1.0))).item()
    hi = gen_adv_loss(Tensor(np.full((1, 2, 2), 1.0))).item()
    assert hi < lo


def test_total_loss_arithmetic():
    t = total_loss(Tensor(1.0), Tensor(0.5), Tensor(0.2))
    assert abs(t.item() - 1.25) < 1e-15
    src_only = total_loss(Tensor(1.0), Tensor(0.5), Tensor(0.2),
                          beta1=0.0, beta2=0.0)
    assert abs(src_only.item() - 1.0) < 1e-15


def test_total_loss_gradient_is_weighted_sum():
    rng = np.random.default_rng(10)
    a, b, c = (rng.normal(size=(3, 3)) for _ in range(3))
    x0 = rng.normal(size=(3, 3))
    with Tape() as tape:
        x = tape.watch(Tensor(x0.copy()))
        loss = total_loss(tsum(x * Tensor(a)), tsum(x * Tensor(b)),
                          tsum(x * Tensor(c)))
        tape.backward(loss)
        g = tape.grad(x)
    np.testing.assert_allclose(g, a + 0.1 * b + 1.0 * c, atol=1e-12)


def test_alternating_updates_drive_g_loss_down():
    """After the discriminator learns to separate a fixed toy pair, 100
    alternating D/G steps pull the generator loss back down."""
    rng = np.random.default_rng(11)
    dparams = init_disc_params(MICRO_DISC, rng)
    gen_logits = Tensor(rng.normal(size=(8, 8, 2)))
    src_probs = np.random.default_rng(12).dirichlet([1, 1], size=(8, 8))
    src_probs = np.ascontiguousarray(src_probs.transpose(2, 0, 1))

    def d_step(opt):
        # discriminator sees detached generator output
        fake = softmax_lastdim(Tensor(gen_logits.data)).data.transpose(2, 0, 1)
        with Tape() as tape:
            for t in dparams.values():
                tape.watch(t)
            d = disc_loss(
                discriminator_forward(dparams, MICRO_DISC, Tensor(src_probs)),
                discriminator_forward(dparams, MICRO_DISC, Tensor(fake)))
            tape.backward(d)
            opt.step(dparams, {k: tape.grad(t) for k, t in dparams.items()})
        return d.item()

    def g_step(opt):
        # generator trains through the frozen discriminator
        with Tape() as tape:
            tape.watch(gen_logits)
            probs = transpose(softmax_lastdim(gen_logits), (2, 0, 1))
            g = gen_adv_loss(discriminator_forward(dparams, MICRO_DISC, probs))
            tape.backward(g)
            opt.step({"g": gen_logits}, {"g": tape.grad(gen_logits)})
        return g.item()

    warm = AdamW(lr=5e-3, weight_decay=0.0, warmup=0, total=None)
    for _ in range(100):
        d_step(warm)
    opt_d = AdamW(lr=1e-4, weight_decay=0.0, warmup=0, total=None)
    opt_g = AdamW(lr=2e-2, weight_decay=0.0, warmup=0, total=None)
    history = []
    for _ in range(100):
        d_step(opt_d)
        history.append(g_step(opt_g))
    assert history[-1] < 0.25 * history[0]


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def test_lr_schedule_shape():
    base, warm, total = 2e-3, 150, 4000
    assert lr_schedule(1, base, warm, total) == base / 150
    assert lr_schedule(warm, base, warm, total) == base
    assert lr_schedule(total, base, warm, total) == 0.0
    # piecewise continuity around the warmup corner
    before = lr_schedule(warm - 1, base, warm, total)
    after = lr_schedule(warm + 1, base, warm, total)
    assert before < base and after < base
    assert abs(after - base * (total - warm - 1) / (total - warm)) < 1e-18
    with pytest.raises(ValueError):
        lr_schedule(0, base, warm, total)
    assert lr_schedule(10, base, 0, None) == base


def test_adamw_zero_grad_zero_decay_no_change():
    p = {"x": Tensor([1.0, -2.0])}
    opt = AdamW(lr=1e-2, weight_decay=0.0, warmup=0, total=None)
    opt.step(p, {"x": np.zeros(2)})
    np.testing.assert_array_equal(p["x"].data, [1.0, -2.0])


def test_adamw_decay_only_shrinks_by_lr_wd():
    p = {"x": Tensor([4.0])}
    opt = AdamW(lr=1e-2, weight_decay=0.5, warmup=0, total=None)
    opt.step(p, {"x": np.zeros(1)})
    np.testing.assert_allclose(p["x"].data, [4.0 * (1 - 1e-2 * 0.5)], atol=1e-15)


def test_adamw_quadratic_convergence():
    p = {"x": Tensor([1.0])}
    opt = AdamW(lr=1e-2, weight_decay=0.0, warmup=0, total=None)
    for _ in range(2000):
        opt.step(p, {"x": 2.0 * p["x"].data})   # grad of x^2
        if abs(p["x"].item()) < 1e-3:
            break
    assert abs(p["x"].item()) < 1e-3


def test_adamw_nan_grad_aborts_with_name():
    p = {"w.bad": Tensor([1.0])}
    opt = AdamW(lr=1e-2)
    with pytest.raises(OptimizerDiverged) as exc:
        opt.step(p, {"w.bad": np.array([np.nan])})
    assert "w.bad" in str(exc.value)


def test_adamw_state_roundtrip_resumes_identically():
    rng = np.random.default_rng(13)
    grads = [dict(x=rng.normal(size=3)) for _ in range(6)]

    p1 = {"x": Tensor([1.0, 2.0, 3.0])}
    opt1 = AdamW(lr=1e-2, warmup=2, total=10)
    for g in grads:
        opt1.step(p1, g)

    # run 3 steps, snapshot, resume, run 3 more
    p2 = {"x": Tensor([1.0, 2.0, 3.0])}
    opt2 = AdamW(lr=1e-2, warmup=2, total=10)
    for g in grads[:3]:
        opt2.step(p2, g)
    snap = {k: v.copy() for k, v in opt2.state_tensors().items()}
    t_snap = opt2.t
    opt3 = AdamW(lr=1e-2, warmup=2, total=10)
    opt3.load_state(snap, t_snap)
    for g in grads[3:]:
        opt3.step(p2, g)
    np.testing.assert_array_equal(p1["x"].data, p2["x"].data)
