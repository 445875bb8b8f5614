import numpy as np
import pytest

from sbdsphere.experiments import BernoulliGaussian, SynthSpec, kernel_error, synth
from sbdsphere.extensions import (
    DEBLUR_LADDER,
    KernelBank,
    bank_coherence,
    cdl_solve,
    deblur_solve,
    disc_scene,
    image_gradients,
    random_walk_kernel,
)
from sbdsphere.prox import InnerConfig, Penalty
from sbdsphere.seeding import derive_seed
from sbdsphere.signal import circ_conv
from sbdsphere.solver import SolverConfig, SolverError, _BankObjective, solve


def test_image_gradients_of_constant_vanish():
    pair = image_gradients(np.full((5, 4), 3.2))
    assert not np.any(pair.gx) and not np.any(pair.gy)


def test_image_gradients_ramp_by_hand():
    img = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [6.0, 7.0, 8.0]])
    pair = image_gradients(img)
    np.testing.assert_array_equal(pair.gx, [[1, 1, -2], [1, 1, -2], [1, 1, -2]])
    np.testing.assert_array_equal(pair.gy, [[3, 3, 3], [3, 3, 3], [-6, -6, -6]])


def test_image_gradients_commute_with_convolution():
    rng = np.random.default_rng(0)
    a, x = rng.random((4, 3)), rng.standard_normal((16, 12))
    blurred = image_gradients(circ_conv(a, x))
    sharp = image_gradients(x)
    np.testing.assert_allclose(blurred.gx, circ_conv(a, sharp.gx), atol=1e-12)
    np.testing.assert_allclose(blurred.gy, circ_conv(a, sharp.gy), atol=1e-12)


def test_image_gradients_reject_tiny_input():
    with pytest.raises(ValueError):
        image_gradients(np.ones((1, 5)))


def test_two_channel_gradient_is_sum_of_channels():
    rng = np.random.default_rng(1)
    Y = rng.standard_normal((2, 12, 12))
    a = np.abs(rng.standard_normal((1, 3, 3)))
    a /= np.linalg.norm(a)
    pen = Penalty.l1(0.1)
    inner = InnerConfig(1e-13, 100000)
    val, _, grad, _, _ = _BankObjective(Y, pen, inner).evaluate(a)
    parts = [_BankObjective(Y[c:c + 1], pen, inner).evaluate(a) for c in range(2)]
    assert val == pytest.approx(parts[0][0] + parts[1][0], rel=1e-10)
    np.testing.assert_allclose(grad, parts[0][2] + parts[1][2], atol=1e-9)
    d = rng.standard_normal(a.shape)
    h = 1e-6
    fd = (_BankObjective(Y, pen, inner).evaluate(a + h * d)[0]
          - _BankObjective(Y, pen, inner).evaluate(a - h * d)[0]) / (2 * h)
    assert fd == pytest.approx(float(np.sum(grad * d)), rel=1e-5)


def test_kernel_bank_validation():
    with pytest.raises(ValueError):
        KernelBank(np.ones((2, 3)))
    with pytest.raises(ValueError):
        KernelBank(np.zeros((0, 3)))
    bank = KernelBank(np.eye(3)[:2])
    assert len(bank) == 2


def test_bank_coherence():
    assert bank_coherence([np.array([1.0, 0.0])]) == 0.0
    e = np.eye(4)
    assert bank_coherence([e[0], e[1]]) == pytest.approx(1.0)  # shifts of each other
    a, b = np.array([1.0, 1.0]), np.array([1.0, -1.0])
    assert bank_coherence([a, b]) == pytest.approx(0.5)


def test_cdl_with_one_kernel_is_solve():
    inst = synth(SynthSpec(256, 6, BernoulliGaussian(0.05), seed=3))
    cfg = SolverConfig(k=6, seed=11, x_scale=1.0)
    one = cdl_solve(inst.y, 1, cfg)
    ref = solve(inst.y, cfg)
    np.testing.assert_array_equal(one.bank.kernels[0], ref.a_hat)
    np.testing.assert_array_equal(one.activations[0], ref.x_hat)
    np.testing.assert_array_equal(one.aligned.kernels[0], ref.a_aligned)


def test_cdl_identical_kernels_still_fits():
    base = synth(SynthSpec(256, 5, BernoulliGaussian(0.03), seed=4))
    other = synth(SynthSpec(256, 5, BernoulliGaussian(0.03), seed=5))
    y = base.clean + circ_conv(base.a0, other.x0)
    cfg = SolverConfig(k=5, seed=2, x_scale=1.0, lambda_min=1e-3)
    two = cdl_solve(y, 2, cfg)
    one = cdl_solve(y, 1, cfg)
    assert np.allclose(np.linalg.norm(two.bank.kernels, axis=1), 1.0, atol=1e-12)
    r2 = np.linalg.norm(y - two.reconstruction())
    r1 = np.linalg.norm(y - one.reconstruction())
    assert r2 <= 2 * r1 + 1e-3 * np.linalg.norm(y)


def test_cdl_rejects_bad_input():
    with pytest.raises(ValueError):
        cdl_solve(np.ones(32), 0, SolverConfig(k=3))
    with pytest.raises(SolverError):
        cdl_solve(np.zeros(32), 1, SolverConfig(k=3))
    with pytest.warns(UserWarning, match="not below the signal size"):
        try:
            cdl_solve(np.random.default_rng(0).standard_normal(16), 4, SolverConfig(k=4, max_outer_iters=2))
        except SolverError:
            pass


def test_deblur_delta_kernel():
    img = disc_scene(32, seed=1, shapes=12)
    res = deblur_solve(img, 3, 3, SolverConfig(k=(3, 3), seed=0))
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    assert kernel_error(res.a_hat, delta, signs=False) <= 1e-3
    assert res.a_hat.min() >= 0
    assert abs(np.linalg.norm(res.a_hat) - 1) <= 1e-12
    assert all(r.kernels.min() >= 0 for r in res.trace.records)


def test_deblur_uses_fixed_ladder():
    img = disc_scene(24, seed=2, shapes=8)
    y = circ_conv(random_walk_kernel(3, seed=2), img)
    res = deblur_solve(y, 3, 3, SolverConfig(k=(3, 3), seed=1))
    stage2 = sorted({r.lam for r in res.trace.records if r.stage == 2})
    assert stage2 == sorted(set(DEBLUR_LADDER))
    assert res.lambda0 == DEBLUR_LADDER[0]
    assert res.latent_gradients.gx.shape == (24, 24)


def test_deblur_errors():
    with pytest.raises(SolverError):
        deblur_solve(np.ones((16, 16)), 3, 3)
    with pytest.raises(ValueError):
        deblur_solve(np.ones((4, 4)), 5, 3)


def test_generators_are_seeded():
    np.testing.assert_array_equal(disc_scene(16, 3), disc_scene(16, 3))
    k = random_walk_kernel(7, seed=derive_seed(1, "kernel"))
    assert k.shape == (7, 7) and k.min() >= 0 and k.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(k, random_walk_kernel(7, seed=derive_seed(1, "kernel")))
