import numpy as np
import pytest

from sbdsphere.signal import (
    SphereConstraint,
    circ_conv,
    corr,
    cyclic_shift,
    inject,
    lq_norm,
    normalize,
    project,
    retract,
    shift_truncation,
)


def circulant(a, m):
    """Dense matrix of x -> a (*) x, built column by column from unit vectors."""
    return np.stack([np.roll(inject(a, m), j) for j in range(m)], axis=1)


def test_conv_hand_computed():
    # y[i] = sum_j a[j] x[i-j] mod 4
    np.testing.assert_array_equal(circ_conv([1.0, 2.0], [1.0, 0.0, 0.0, 3.0]), [7.0, 2.0, 0.0, 3.0])


def test_corr_hand_computed():
    # out[i] = a[0] y[i] + a[1] y[i+1]
    np.testing.assert_array_equal(corr([1.0, 2.0], [1.0, 2.0, 3.0, 4.0]), [5.0, 8.0, 11.0, 6.0])


def test_conv_matches_dense_circulant():
    rng = np.random.default_rng(0)
    a, x = rng.standard_normal(5), rng.standard_normal(17)
    C = circulant(a, 17)
    np.testing.assert_allclose(circ_conv(a, x), C @ x, atol=1e-13)
    np.testing.assert_allclose(corr(a, x), C.T @ x, atol=1e-13)


def test_conv_2d_matches_loop_and_fft_path():
    rng = np.random.default_rng(1)
    a, x = rng.standard_normal((3, 4)), rng.standard_normal((9, 7))
    loop = np.zeros_like(x)
    for i in range(3):
        for j in range(4):
            for r in range(9):
                for c in range(7):
                    loop[r, c] += a[i, j] * x[(r - i) % 9, (c - j) % 7]
    np.testing.assert_allclose(circ_conv(a, x, "direct"), loop, atol=1e-12)
    np.testing.assert_allclose(circ_conv(a, x, "fft"), loop, atol=1e-12)


def test_delta_kernel_is_identity():
    x = np.arange(6.0)
    np.testing.assert_array_equal(circ_conv([1.0], x), x)
    np.testing.assert_array_equal(corr([1.0], x), x)


def test_cyclic_shift_convention():
    np.testing.assert_array_equal(cyclic_shift([1.0, 2.0, 3.0, 4.0], 1), [4.0, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(cyclic_shift([1.0, 2.0, 3.0, 4.0], -1), [2.0, 3.0, 4.0, 1.0])


def test_inject_project_roundtrip():
    a = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(inject(a, 6), [1.0, -2.0, 3.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(project(inject(a, 6), 3), a)
    with pytest.raises(ValueError):
        inject(a, 2)


def test_shift_truncations_of_example_kernel():
    a0 = np.array([1.0, 8.0, 2.0])
    np.testing.assert_allclose(shift_truncation(a0, 0, 8), a0 / np.sqrt(69))
    np.testing.assert_allclose(shift_truncation(a0, 1, 8), np.array([0.0, 1.0, 8.0]) / np.sqrt(65))
    np.testing.assert_allclose(shift_truncation(a0, -1, 8), np.array([8.0, 2.0, 0.0]) / np.sqrt(68))
    np.testing.assert_allclose(shift_truncation(a0, 2, 8), [0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        shift_truncation(a0, 3, 8)


def test_shift_truncation_lq_normalized():
    t = shift_truncation([1.0, 8.0, 2.0], 0, 8, q=4)
    assert abs(lq_norm(t, 4) - 1.0) < 1e-14


def test_normalize_rejects_zero():
    with pytest.raises(ValueError):
        normalize(np.zeros(3))


def test_nonneg_retraction_clips_then_renormalizes():
    np.testing.assert_allclose(retract([3.0, -1.0, 4.0], SphereConstraint.NONNEG), [0.6, 0.0, 0.8])
    np.testing.assert_allclose(retract([-1.0, -1.0], SphereConstraint.NONNEG, fallback=[0.0, 2.0]), [0.0, 1.0])
    with pytest.raises(ValueError):
        retract([-1.0, -1.0], SphereConstraint.NONNEG)


def test_mismatched_shapes_rejected():
    with pytest.raises(ValueError):
        circ_conv(np.ones(5), np.ones(4))
    with pytest.raises(ValueError):
        circ_conv(np.ones((2, 2)), np.ones(8))


def test_small_documented_cases():
    np.testing.assert_array_equal(circ_conv([1.0, 0.0], [0.0, 1.0, 0.0, 0.0]), [0.0, 1.0, 0.0, 0.0])
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(circ_conv([s, s], [1.0, 0.0, 0.0]), [s, s, 0.0], atol=1e-15)
    np.testing.assert_array_equal(cyclic_shift([1.0, 2.0, 3.0], 0), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(cyclic_shift([1.0, 2.0, 3.0], 4), [3.0, 1.0, 2.0])
    np.testing.assert_array_equal(inject([5.0], 1), [5.0])
    np.testing.assert_array_equal(project([1.0, 2.0, 3.0], 2), [1.0, 2.0])


def test_corr_of_injected_kernel_lists_truncation_inner_products():
    rng = np.random.default_rng(4)
    a, a0, m = rng.standard_normal(3), rng.standard_normal(3), 8
    u = corr(a, inject(a0, m))
    expect = [a @ project(cyclic_shift(inject(a0, m), -i), 3) for i in range(m)]
    np.testing.assert_allclose(u, expect, atol=1e-13)
