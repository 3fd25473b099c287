"""Tests for the rigid-motion primitives."""

import numpy as np
import pytest

from geomflow.geometry import (
    apply_transform,
    as_point_cloud,
    compose_permutations,
    identity_permutation,
    invert_permutation,
    project_zero_com,
    quaternion_to_rotation,
    random_permutation,
    random_rotation,
    squared_cost,
)


def test_project_zero_com_centers_and_is_idempotent():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((12, 3)) + 5.0
    centered = project_zero_com(x)
    assert np.abs(centered.mean(axis=0)).max() < 1e-12
    again = project_zero_com(centered)
    np.testing.assert_allclose(again, centered, rtol=0, atol=1e-14)


def test_project_zero_com_single_point_goes_to_origin():
    out = project_zero_com(np.array([[3.0, -1.0, 2.0]]))
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_project_zero_com_rejects_bad_input():
    with pytest.raises(ValueError):
        project_zero_com(np.ones((4, 2)))
    with pytest.raises(ValueError):
        project_zero_com(np.array([[np.nan, 0.0, 0.0]]))


def test_random_rotation_is_proper():
    rng = np.random.default_rng(1)
    for _ in range(50):
        r = random_rotation(rng)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_random_rotation_covers_the_group():
    # Uniform sampling has zero-mean matrix entries; a crude moment check
    # catches gross bias (e.g. only small-angle rotations).
    rng = np.random.default_rng(2)
    mean = np.mean([random_rotation(rng) for _ in range(4000)], axis=0)
    assert np.abs(mean).max() < 0.05, f"rotation mean too far from 0:\n{mean}"


def test_quaternion_known_case():
    # 180 degrees about z: (w, x, y, z) = (0, 0, 0, 1).
    r = quaternion_to_rotation([0.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(r, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_quaternion_rejects_near_zero():
    with pytest.raises(ValueError):
        quaternion_to_rotation([0.0, 0.0, 0.0, 1e-13])


def test_apply_transform_gather_semantics():
    x = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]])
    p = np.array([2, 0, 1])
    out = apply_transform(x, np.eye(3), p)
    np.testing.assert_array_equal(out, x[p])


def test_apply_transform_is_an_isometry():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((9, 3))
    r = random_rotation(rng)
    p = random_permutation(rng, 9)
    y = apply_transform(x, r, p)

    d_x = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
    d_y = np.linalg.norm(y[:, None] - y[None, :], axis=-1)
    # Pairwise distances are permuted but preserved as a multiset.
    np.testing.assert_allclose(np.sort(d_x, axis=None), np.sort(d_y, axis=None), rtol=1e-10)


def test_apply_transform_composition():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((7, 3))
    r1, r2 = random_rotation(rng), random_rotation(rng)
    p1, p2 = random_permutation(rng, 7), random_permutation(rng, 7)

    two_step = apply_transform(apply_transform(x, r1, p1), r2, p2)
    one_step = apply_transform(x, r2 @ r1, compose_permutations(p1, p2))
    np.testing.assert_allclose(two_step, one_step, atol=1e-12)


def test_identity_transform_is_a_no_op():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((5, 3))
    out = apply_transform(x, np.eye(3), identity_permutation(5))
    np.testing.assert_array_equal(out, x)


def test_invert_permutation():
    rng = np.random.default_rng(6)
    for n in (1, 2, 5, 11):
        p = random_permutation(rng, n)
        q = invert_permutation(p)
        np.testing.assert_array_equal(p[q], np.arange(n))
        np.testing.assert_array_equal(q[p], np.arange(n))


def test_permutation_validation():
    x = np.zeros((3, 3))
    with pytest.raises(ValueError):
        apply_transform(x, np.eye(3), np.array([0, 0, 1]))
    with pytest.raises(ValueError):
        apply_transform(x, np.eye(3), np.array([0, 1]))


def test_squared_cost_translation():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 3))
    shift = np.array([0.1, -0.2, 0.3])
    expected = 6 * float(shift @ shift)
    assert squared_cost(x, x + shift) == pytest.approx(expected, rel=1e-12)


def test_squared_cost_zero_iff_equal():
    x = np.arange(12, dtype=float).reshape(4, 3)
    assert squared_cost(x, x) == 0.0
    assert squared_cost(x, x + 1e-3) > 0.0


def test_squared_cost_shape_mismatch():
    with pytest.raises(ValueError):
        squared_cost(np.zeros((3, 3)), np.zeros((4, 3)))


def test_as_point_cloud_promotes_dtype():
    out = as_point_cloud([[1, 2, 3]])
    assert out.dtype == np.float64
