"""Equivariant optimal-transport alignment between point clouds.

Solves, for centered clouds z and y of equal size,

    minimize_{permutation p, rotation R}  sum_i || R z[p[i]] - y[i] ||^2

by alternating an exact linear assignment (permutation given rotation) with
a Kabsch fit (rotation given permutation) until the objective stops
changing. The alternation alone has small basins of attraction, so each
solve also seeds it from the principal-axes alignments of the two clouds
and, at small N, escapes permutation-space local minima with an exhaustive
transposition/3-cycle descent. An exhaustive reference solver over all N!
permutations is provided for oracle tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .geometry import (
    apply_transform,
    as_point_cloud,
    project_zero_com,
    random_rotation,
    squared_cost,
)

__all__ = ["EotPlan", "solve_assignment", "kabsch", "solve_eot", "brute_force_eot"]

# Second singular value below this (relative to the largest) means the
# cross-covariance has rank <= 1 and the optimal rotation is not determined;
# we fall back to the identity and flag the plan.
_RANK_RTOL = 1e-12

# Local permutation descent is what certifies near-optimality at small N.
# Transpositions stay affordable well past benchmark sizes; 3-cycles are
# cubic in N and only needed where optimality is actually asserted.
_SWAP_MAX_N = 64
_CYCLE_MAX_N = 12


@dataclass
class EotPlan:
    """Result of an alignment solve.

    Attributes:
        permutation: (N,) mapping, gather semantics (see geometry module).
        rotation: (3, 3) proper rotation.
        cost: squared alignment cost of (permutation, rotation).
        iterations: alternation rounds spent by the winning start (>= 1),
            summed over its refinement-interleaved passes.
        degenerate: True when a Kabsch step hit a rank-deficient
            cross-covariance and returned the identity.
    """

    permutation: np.ndarray
    rotation: np.ndarray
    cost: float
    iterations: int
    degenerate: bool = field(default=False)


def solve_assignment(cost_matrix) -> np.ndarray:
    """Exact minimum-cost assignment.

    Returns the permutation p minimizing sum_i cost_matrix[i, p[i]].
    Ties resolve deterministically (the underlying shortest-augmenting-path
    solver is deterministic for fixed input).
    """
    c = np.asarray(cost_matrix, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite values")
    _, cols = linear_sum_assignment(c)
    return cols


def kabsch(z, y, return_degenerate: bool = False):
    """Optimal proper rotation R minimizing ||z @ R.T - y||_F^2.

    Points are paired row-by-row; inputs are assumed centered (the solve is
    still well defined otherwise, it just fits rotation only). Rank-2
    cross-covariances are handled by the determinant sign correction;
    rank <= 1 (collinear or coincident clouds) has no unique optimum, so
    the identity is returned and flagged.

    Args:
        z: (N, 3) source cloud.
        y: (N, 3) target cloud.
        return_degenerate: also return the rank-deficiency flag.

    Returns:
        (3, 3) rotation, or (rotation, degenerate) if requested.
    """
    z = as_point_cloud(z, "z")
    y = as_point_cloud(y, "y")
    if z.shape != y.shape:
        raise ValueError(f"clouds must match in shape, got {z.shape} vs {y.shape}")

    h = z.T @ y
    u, s, vt = np.linalg.svd(h)
    degenerate = bool(s[1] <= _RANK_RTOL * max(s[0], 1.0))
    if degenerate:
        rot = np.eye(3)
    else:
        d = np.sign(np.linalg.det(u @ vt))
        rot = (vt.T * np.array([1.0, 1.0, d])) @ u.T
    if return_degenerate:
        return rot, degenerate
    return rot


def solve_eot(
    z,
    y,
    *,
    max_iter: int = 100,
    tol: float = 1e-9,
    restarts: int = 1,
    rng: np.random.Generator | None = None,
) -> EotPlan:
    """Joint permutation/rotation alignment of two centered clouds.

    Runs the assignment/Kabsch alternation from one identity start, the
    four principal-axes alignments (proper sign combinations of the
    per-cloud covariance eigenbases, which solve the exactly-alignable case
    outright), and ``restarts`` uniformly random rotations. Whenever a pass
    converges at small N, an exhaustive transposition (N <= 64) and 3-cycle
    (N <= 12) descent with re-fitted rotations runs; any improvement hands
    back to the alternation. The lowest-cost start wins.

    Args:
        z: (N, 3) source cloud (centered internally).
        y: (N, 3) target cloud (centered internally).
        max_iter: maximum alternation rounds per pass, >= 1.
        tol: absolute convergence threshold on the squared cost.
        restarts: number of random-rotation starts (0 disables them).
        rng: random generator, required when restarts > 0.

    Returns:
        EotPlan for the best start; ``iterations`` counts the winning
        start's alternation rounds.
    """
    z = project_zero_com(z)
    y = project_zero_com(y)
    if z.shape != y.shape:
        raise ValueError(f"clouds must match in shape, got {z.shape} vs {y.shape}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    if restarts < 0:
        raise ValueError(f"restarts must be >= 0, got {restarts}")
    if restarts > 0 and rng is None:
        raise ValueError("rng is required when restarts > 0")

    starts = [np.eye(3)]
    starts += _moment_starts(z, y)
    starts += [random_rotation(rng) for _ in range(restarts)]

    moves = _local_moves(z.shape[0])
    best: EotPlan | None = None
    for rot0 in starts:
        plan = _run_start(z, y, rot0, max_iter, tol, moves)
        if best is None or plan.cost < best.cost:
            best = plan
    return best


def _moment_starts(z, y) -> list[np.ndarray]:
    """Principal-axes alignments: the four proper sign choices of V_y S V_z^T."""
    _, vz = np.linalg.eigh(z.T @ z)
    _, vy = np.linalg.eigh(y.T @ y)
    starts = []
    for signs in itertools.product((1.0, -1.0), repeat=3):
        rot = (vy * signs) @ vz.T
        if np.linalg.det(rot) > 0:
            starts.append(rot)
    return starts


def _run_start(z, y, rot, max_iter, tol, moves) -> EotPlan:
    """Alternation from one initial rotation, interleaved with local descent."""
    perm, rot, tau, rounds, degenerate = _alternate(z, y, rot, max_iter, tol)
    if moves is not None:
        while True:
            perm, refined = _local_refine(z, y, perm, tau, moves)
            if refined >= tau - 1e-12:
                tau = min(tau, refined)
                break
            rot, deg = kabsch(z[perm], y, return_degenerate=True)
            degenerate = degenerate or deg
            perm, rot, tau, extra, deg = _alternate(z, y, rot, max_iter, tol)
            degenerate = degenerate or deg
            rounds += extra
    return EotPlan(
        permutation=perm,
        rotation=rot,
        cost=tau,
        iterations=rounds,
        degenerate=degenerate,
    )


def _alternate(z, y, rot, max_iter, tol):
    """Assignment/Kabsch alternation until the objective settles."""
    perm = np.arange(z.shape[0])
    degenerate = False
    tau_prev = np.inf
    tau = np.inf
    rounds = 0
    for k in range(1, max_iter + 1):
        rounds = k
        cost_matrix = cdist(y, z @ rot.T, "sqeuclidean")
        perm = solve_assignment(cost_matrix)
        rot, deg = kabsch(z[perm], y, return_degenerate=True)
        degenerate = degenerate or deg
        tau = squared_cost(z[perm] @ rot.T, y)
        if abs(tau_prev - tau) < tol:
            break
        tau_prev = tau
    return perm, rot, tau, rounds, degenerate


_MOVE_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray] | None] = {}


def _local_moves(n: int):
    """Cached index arrays for the local permutation moves at size n.

    Returns (swaps, cycle_pos, cycle_img) or None when no moves apply:
    swaps is (Ms, 2); the cycle arrays are (Mc, 3) position/image rows
    describing new[pos] = old[img] with all-distinct entries.
    """
    if n not in _MOVE_CACHE:
        if n < 2 or n > _SWAP_MAX_N:
            _MOVE_CACHE[n] = None
        else:
            swaps = np.array(list(itertools.combinations(range(n), 2)))
            pos, img = [], []
            if n <= _CYCLE_MAX_N:
                for i, j, k in itertools.combinations(range(n), 3):
                    pos.append((i, j, k))
                    img.append((j, k, i))
                    pos.append((i, j, k))
                    img.append((k, i, j))
            cycle_pos = np.array(pos, dtype=int).reshape(-1, 3)
            cycle_img = np.array(img, dtype=int).reshape(-1, 3)
            _MOVE_CACHE[n] = (swaps, cycle_pos, cycle_img)
    return _MOVE_CACHE[n]


def _local_refine(z, y, perm, tau, moves):
    """Steepest-descent over transpositions/3-cycles with re-fitted rotations.

    Each candidate move changes at most three rows of the pairing, so the
    candidate cross-covariance is a low-rank update of the current one
    (rank 1 for a swap) and the re-fitted cost follows from its singular
    values: cost = |z|^2 + |y|^2 - 2 (s1 + s2 + sign(det) s3).
    """
    swaps, cycle_pos, cycle_img = moves
    n_swaps = len(swaps)
    zz = np.einsum("ij,ij->", z, z)
    yy = np.einsum("ij,ij->", y, y)
    while True:
        zp = z[perm]
        h = zp.T @ y
        dz = zp[swaps[:, 1]] - zp[swaps[:, 0]]
        dy = y[swaps[:, 0]] - y[swaps[:, 1]]
        swap_delta = np.einsum("mi,mj->mij", dz, dy)
        cycle_delta = np.einsum(
            "msi,msj->mij", zp[cycle_img] - zp[cycle_pos], y[cycle_pos]
        )
        candidates = h[None] + np.concatenate([swap_delta, cycle_delta])
        u, s, vt = np.linalg.svd(candidates)
        d = np.sign(np.linalg.det(u @ vt))
        costs = zz + yy - 2.0 * (s[:, 0] + s[:, 1] + d * s[:, 2])
        m = int(np.argmin(costs))
        if costs[m] >= tau - 1e-12:
            return perm, tau
        new = perm.copy()
        if m < n_swaps:
            i, j = swaps[m]
            new[i], new[j] = perm[j], perm[i]
        else:
            pos = cycle_pos[m - n_swaps]
            img = cycle_img[m - n_swaps]
            new[pos] = perm[img]
        perm, tau = new, float(costs[m])


def brute_force_eot(z, y, max_n: int = 8) -> EotPlan:
    """Exhaustive reference solver: all N! permutations, Kabsch for each.

    Exact because the rotation subproblem is solved optimally per
    permutation. Intended for oracle tests; refuses N > max_n.
    """
    z = project_zero_com(z)
    y = project_zero_com(y)
    if z.shape != y.shape:
        raise ValueError(f"clouds must match in shape, got {z.shape} vs {y.shape}")
    n = z.shape[0]
    if n > max_n:
        raise ValueError(f"brute force is factorial in N; refusing N={n} > {max_n}")

    perms = np.array(list(itertools.permutations(range(n))))
    z_perm = z[perms]  # (M, N, 3)

    # Batched Kabsch over all permutations. cost = |z|^2 + |y|^2 - 2 tr(R H)
    # and tr(R H) = s1 + s2 + sign(det) * s3 at the optimum.
    h = np.einsum("mni,nj->mij", z_perm, y)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    trace_rh = s[:, 0] + s[:, 1] + d * s[:, 2]
    costs = np.einsum("ij,ij->", z, z) + np.einsum("ij,ij->", y, y) - 2.0 * trace_rh

    m = int(np.argmin(costs))
    v = vt[m].T.copy()
    v[:, 2] *= d[m]
    rot = v @ u[m].T
    return EotPlan(
        permutation=perms[m],
        rotation=rot,
        cost=float(squared_cost(apply_transform(z, rot, perms[m]), y)),
        iterations=1,
    )
