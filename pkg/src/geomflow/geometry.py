"""Rigid-motion primitives for centered point clouds.

Conventions used across the package:

* a point cloud is an (N, 3) float64 array, one point per row;
* a rotation is a (3, 3) orthogonal matrix with det +1, applied to row
  vectors as ``x @ R.T`` (row i becomes ``R @ x[i]``);
* a permutation is an (N,) integer mapping with gather semantics,
  ``out[i] = x[p[i]]``.

All inputs are validated eagerly: shape mismatches and non-finite values
raise ValueError at the boundary so the iterative solvers built on top can
skip per-step checks.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "project_zero_com",
    "random_rotation",
    "quaternion_to_rotation",
    "identity_permutation",
    "random_permutation",
    "invert_permutation",
    "compose_permutations",
    "apply_transform",
    "squared_cost",
    "as_point_cloud",
]


def as_point_cloud(x, name: str = "points") -> np.ndarray:
    """Validate and convert ``x`` to an (N, 3) float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise ValueError(f"{name} must have shape (N, 3) with N >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def project_zero_com(x) -> np.ndarray:
    """Translate a point cloud so its center of mass sits at the origin.

    Idempotent: projecting twice equals projecting once. A single point
    maps to the origin exactly.
    """
    arr = as_point_cloud(x)
    return arr - arr.mean(axis=0)


def quaternion_to_rotation(q) -> np.ndarray:
    """Convert a unit quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError("quaternion norm too small to normalize")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Draw a rotation uniformly from SO(3).

    Uses the quaternion construction: four standard normal draws,
    normalized to the unit sphere. Degenerate draws (norm < 1e-12, a
    measure-zero event) are rejected and redrawn.
    """
    while True:
        q = rng.standard_normal(4)
        if np.linalg.norm(q) >= 1e-12:
            return quaternion_to_rotation(q)


def identity_permutation(n: int) -> np.ndarray:
    """The identity mapping on n points."""
    if n < 1:
        raise ValueError(f"permutation size must be >= 1, got {n}")
    return np.arange(n)


def random_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw a uniformly random permutation of n points."""
    if n < 1:
        raise ValueError(f"permutation size must be >= 1, got {n}")
    return rng.permutation(n)


def _check_permutation(p, n: int) -> np.ndarray:
    p = np.asarray(p)
    if p.shape != (n,) or not np.issubdtype(p.dtype, np.integer):
        raise ValueError(f"permutation must be an integer array of shape ({n},)")
    if not np.array_equal(np.sort(p), np.arange(n)):
        raise ValueError("permutation is not a bijection on range(n)")
    return p


def invert_permutation(p) -> np.ndarray:
    """Inverse mapping: q such that q[p[i]] = i."""
    p = _check_permutation(p, len(p))
    q = np.empty_like(p)
    q[p] = np.arange(len(p))
    return q


def compose_permutations(p1, p2) -> np.ndarray:
    """Mapping of "gather by p1, then gather by p2": out[i] = x[p1[p2[i]]].

    Satisfies x[p1][p2] == x[compose_permutations(p1, p2)].
    """
    p1 = _check_permutation(p1, len(p1))
    p2 = _check_permutation(p2, len(p1))
    return p1[p2]


def _check_rotation(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must have shape (3, 3), got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rotation contains non-finite values")
    return r


def apply_transform(x, rotation, permutation) -> np.ndarray:
    """Rotate, then permute: result[i] = rotation @ x[permutation[i]].

    The order is fixed (rotate first); composing two applies therefore
    composes rotations by matrix product and permutations with
    compose_permutations.
    """
    arr = as_point_cloud(x)
    rot = _check_rotation(rotation)
    perm = _check_permutation(permutation, arr.shape[0])
    return (arr @ rot.T)[perm]


def squared_cost(a, b) -> float:
    """Sum of squared distances between paired rows of two clouds."""
    a = as_point_cloud(a, "a")
    b = as_point_cloud(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"paired clouds must match in shape, got {a.shape} vs {b.shape}")
    d = a - b
    return float(np.einsum("ij,ij->", d, d))
