"""Generation by integrating the learned field from the prior back to data.

Time runs from t=1 (standard-normal prior, coordinates centered) down to
t=0, so every step size is negative. Four integrators are available: the
classical fixed-step trio (euler, midpoint, rk4) and an adaptive
Dormand-Prince 5(4) pair with PI step-size control on the error per unit
step, so the end-state error tracks the tolerance. All of them see the
coordinate velocity through a zero-center-of-mass projection at every
evaluation, which keeps trajectories on the centered subspace to rounding
error.

``integrate`` drives a model; ``integrate_field`` is the same machinery
over a bare callable ``field(g, t) -> (vx, vh)`` and exists so test
problems with known solutions can exercise the solvers directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DEFAULT_LAYOUT, FeatureLayout, MoleculeGeometry
from .egnn import forward
from .geometry import project_zero_com

__all__ = [
    "METHODS",
    "N_TIME_BINS",
    "MAX_STORED_STATES",
    "IntegratorSpec",
    "Trajectory",
    "SampleStats",
    "step_euler",
    "step_midpoint",
    "step_rk4",
    "integrate",
    "integrate_field",
    "prior_geometry",
    "discretize_features",
    "sample_batch",
]

METHODS = ("euler", "midpoint", "rk4", "dopri5")
N_TIME_BINS = 20
MAX_STORED_STATES = 64

_DEFAULT_STEPS = {"euler": 100, "midpoint": 100, "rk4": 50}

# Dormand-Prince 5(4) tableau. The last row of _DP_A doubles as the 5th-order
# weights (FSAL: stage 7 is the first stage of the next step); _DP_B4 are the
# embedded 4th-order weights used only for the error estimate.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])

_DOPRI_FIRST_STEP = -1e-2
_DOPRI_SAFETY = 0.9
_DOPRI_MIN_FACTOR = 0.2
_DOPRI_MAX_FACTOR = 5.0


@dataclass(frozen=True)
class IntegratorSpec:
    """Solver choice plus its knobs.

    ``n_steps`` only matters for the fixed-step methods and defaults to
    100 (euler, midpoint) or 50 (rk4), about two hundred field
    evaluations either way. ``rtol``/``atol`` and ``max_nfe`` only matter
    for dopri5. ``store_full`` keeps every accepted state instead of
    decimating the trajectory to MAX_STORED_STATES entries.
    """

    method: str = "dopri5"
    n_steps: int | None = None
    rtol: float = 1e-4
    atol: float = 1e-4
    max_nfe: int = 10_000
    store_full: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_steps is None and self.method != "dopri5":
            object.__setattr__(self, "n_steps", _DEFAULT_STEPS[self.method])
        if self.n_steps is not None and self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.rtol <= 0.0 or self.atol <= 0.0:
            raise ValueError("rtol and atol must be positive")
        if self.max_nfe < 1:
            raise ValueError(f"max_nfe must be >= 1, got {self.max_nfe}")


@dataclass(frozen=True)
class Trajectory:
    """Stored states of one solve, newest last, plus the evaluation counts.

    ``states`` is a tuple of (t, MoleculeGeometry) with t strictly
    decreasing from 1 to 0; ``nfe_by_interval`` buckets every field
    evaluation into N_TIME_BINS uniform t-intervals (bin 0 covers t near
    0, the generation endpoint).
    """

    states: tuple
    nfe_total: int
    nfe_by_interval: np.ndarray

    def __post_init__(self):
        ts = [t for t, _ in self.states]
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory times must be strictly decreasing")
        if int(self.nfe_by_interval.sum()) != self.nfe_total:
            raise ValueError("interval histogram does not add up to nfe_total")

    @property
    def final(self) -> MoleculeGeometry:
        return self.states[-1][1]


@dataclass(frozen=True)
class SampleStats:
    """NFE bookkeeping aggregated over one generated batch."""

    nfe_per_sample: tuple
    nfe_total: int
    nfe_by_interval: np.ndarray


def _model_field(model):
    def field(g: MoleculeGeometry, t: float):
        out = forward(model, g, t)
        return project_zero_com(out.vx), out.vh

    return field


def _geo(x, h, t):
    """Wrap a raw state, aborting loudly if it stopped being finite."""
    _check_finite(x, h, t)
    return MoleculeGeometry(x, h)


def _advance(field, x, h, t, dt, method):
    """One explicit step of the named fixed-step method, on raw arrays."""
    if method == "euler":
        vx, vh = field(_geo(x, h, t), t)
        return x + dt * vx, h + dt * vh
    if method == "midpoint":
        vx1, vh1 = field(_geo(x, h, t), t)
        t_mid = t + 0.5 * dt
        vx2, vh2 = field(_geo(x + 0.5 * dt * vx1, h + 0.5 * dt * vh1, t_mid), t_mid)
        return x + dt * vx2, h + dt * vh2
    t_mid = t + 0.5 * dt
    k1 = field(_geo(x, h, t), t)
    k2 = field(_geo(x + 0.5 * dt * k1[0], h + 0.5 * dt * k1[1], t_mid), t_mid)
    k3 = field(_geo(x + 0.5 * dt * k2[0], h + 0.5 * dt * k2[1], t_mid), t_mid)
    k4 = field(_geo(x + dt * k3[0], h + dt * k3[1], t + dt), t + dt)
    x_new = x + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    h_new = h + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    return x_new, h_new


def _one_step(model, g, t, dt, method):
    if dt > 0.0:
        raise ValueError(f"dt must be <= 0 (time runs from 1 to 0), got {dt}")
    x, h = _advance(_model_field(model), g.coords, g.features, float(t), float(dt), method)
    return MoleculeGeometry(x, h)


def step_euler(model, g: MoleculeGeometry, t, dt) -> MoleculeGeometry:
    """One forward-Euler step; costs one field evaluation."""
    return _one_step(model, g, t, dt, "euler")


def step_midpoint(model, g: MoleculeGeometry, t, dt) -> MoleculeGeometry:
    """One explicit-midpoint step; costs two field evaluations."""
    return _one_step(model, g, t, dt, "midpoint")


def step_rk4(model, g: MoleculeGeometry, t, dt) -> MoleculeGeometry:
    """One classical Runge-Kutta step; costs four field evaluations."""
    return _one_step(model, g, t, dt, "rk4")


def _counted(field, counter):
    def wrapped(g, t):
        counter[0] += 1
        counter[1][min(max(int(t * N_TIME_BINS), 0), N_TIME_BINS - 1)] += 1
        return field(g, t)

    return wrapped


def _check_finite(x, h, t):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(h))):
        raise FloatingPointError(f"non-finite state at t={t:.6g}")


def _decimate(states, store_full):
    if store_full or len(states) <= MAX_STORED_STATES:
        return tuple(states)
    keep = np.unique(np.linspace(0, len(states) - 1, MAX_STORED_STATES).astype(int))
    return tuple(states[i] for i in keep)


def integrate_field(field, g1: MoleculeGeometry, spec: IntegratorSpec) -> Trajectory:
    """Solve dg/dt = field(g, t) from t=1 down to t=0 per the spec'd method.

    The caller's field sees states exactly as produced by the solver; it
    is responsible for centering its coordinate output (``integrate``
    does this for model fields). Raises FloatingPointError when a state
    stops being finite and RuntimeError when dopri5 runs out of its
    evaluation budget or its step size underflows.
    """
    counter = [0, np.zeros(N_TIME_BINS, dtype=int)]
    field = _counted(field, counter)
    if spec.method == "dopri5":
        states = _solve_dopri5(field, g1, spec, counter)
    else:
        states = _solve_fixed(field, g1, spec)
    return Trajectory(
        states=_decimate(states, spec.store_full),
        nfe_total=counter[0],
        nfe_by_interval=counter[1],
    )


def _solve_fixed(field, g1, spec):
    n = spec.n_steps
    ts = np.linspace(1.0, 0.0, n + 1)
    x, h = g1.coords, g1.features
    states = [(1.0, g1)]
    for i in range(n):
        t, t_next = ts[i], ts[i + 1]
        x, h = _advance(field, x, h, t, t_next - t, spec.method)
        _check_finite(x, h, t_next)
        states.append((float(t_next), MoleculeGeometry(x, h)))
    return states


def _error_norm(err_x, err_h, x0, x1, h0, h1, rtol, atol):
    scale_x = atol + rtol * np.maximum(np.abs(x0), np.abs(x1))
    scale_h = atol + rtol * np.maximum(np.abs(h0), np.abs(h1))
    sq = np.concatenate([(err_x / scale_x).ravel(), (err_h / scale_h).ravel()])
    return float(np.sqrt(np.mean(sq * sq)))


def _solve_dopri5(field, g1, spec, counter):
    x, h = g1.coords, g1.features
    t = 1.0
    dt = _DOPRI_FIRST_STEP
    states = [(1.0, g1)]
    k = [None] * 7
    k[0] = field(_geo(x, h, t), t)
    err_prev = 1.0
    while t > 0.0:
        dt = -min(-dt, t)  # land exactly on 0
        if -dt < 1e-13:
            raise RuntimeError(f"step size underflow at t={t:.6g}")
        if counter[0] + 6 > spec.max_nfe:
            raise RuntimeError(f"max_nfe {spec.max_nfe} exceeded at t={t:.6g}")
        for s in range(1, 7):
            xs = x + dt * sum(a * k[j][0] for j, a in enumerate(_DP_A[s]))
            hs = h + dt * sum(a * k[j][1] for j, a in enumerate(_DP_A[s]))
            ts = t + _DP_C[s] * dt
            k[s] = field(_geo(xs, hs, ts), ts)
        x_new = x + dt * sum(b * k[j][0] for j, b in enumerate(_DP_B5) if b)
        h_new = h + dt * sum(b * k[j][1] for j, b in enumerate(_DP_B5) if b)
        db = _DP_B5 - _DP_B4
        err_x = dt * sum(b * k[j][0] for j, b in enumerate(db) if b)
        err_h = dt * sum(b * k[j][1] for j, b in enumerate(db) if b)
        # Error per unit step: judging the estimate against tol*|dt| spreads
        # the tolerance budget over the unit interval, so the accumulated
        # drift at t=0 stays of order rtol instead of n_steps*rtol. The PI
        # exponents 0.14/0.08 and the rejection exponent 1/5 are the
        # standard ones for the resulting order-5 control signal.
        err = _error_norm(err_x, err_h, x, x_new, h, h_new, spec.rtol, spec.atol) / -dt
        if err <= 1.0:
            t = 0.0 if t + dt < 1e-15 else t + dt
            x, h = x_new, h_new
            _check_finite(x, h, t)
            states.append((t, MoleculeGeometry(x, h)))
            k[0] = k[6]  # FSAL
            factor = _DOPRI_SAFETY * max(err, 1e-10) ** -0.14 * err_prev**0.08
            err_prev = max(err, 1e-10)
        else:
            factor = min(1.0, _DOPRI_SAFETY * err**-0.2)
        dt *= min(_DOPRI_MAX_FACTOR, max(_DOPRI_MIN_FACTOR, factor))
    return states


def integrate(model, g1: MoleculeGeometry, spec: IntegratorSpec) -> Trajectory:
    """Generate from one prior draw by solving the model field to t=0."""
    return integrate_field(_model_field(model), g1, spec)


def prior_geometry(rng, n_nodes: int, d: int = DEFAULT_LAYOUT.dim) -> MoleculeGeometry:
    """A standard-normal prior draw with centered coordinates."""
    if n_nodes < 1:
        raise ValueError(f"n_nodes must be >= 1, got {n_nodes}")
    return MoleculeGeometry(
        project_zero_com(rng.standard_normal((n_nodes, 3))),
        rng.standard_normal((n_nodes, d)),
    )


def discretize_features(h0, sigma0: float = 0.25, layout: FeatureLayout = DEFAULT_LAYOUT):
    """Snap continuous features to (atom symbols, integer charges).

    The categorical rule puts all mass on the largest one-hot entry and
    the integer rule on the nearest integer of the charge channel; for a
    Gaussian read-out both are independent of ``sigma0``, which is kept
    only so the smoothing width stays part of the signature.
    """
    h0 = np.asarray(h0, dtype=np.float64)
    if sigma0 <= 0.0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    if h0.ndim != 2 or h0.shape[1] != layout.dim:
        raise ValueError(f"features must be (n, {layout.dim}), got {h0.shape}")
    idx = np.argmax(h0[:, : layout.n_types], axis=1)
    symbols = [layout.atom_types[i] for i in idx]
    charges = np.rint(h0[:, layout.charge_column]).astype(int)
    return symbols, charges


def sample_batch(model, n_samples: int, node_counts, spec: IntegratorSpec, rng):
    """Draw ``n_samples`` priors and integrate each one independently.

    ``node_counts`` gives the size of every sample (the caller typically
    draws them from a dataset's size histogram). Returns the continuous
    final geometries plus aggregate NFE statistics; discretization is a
    separate, explicit step.
    """
    node_counts = [int(n) for n in node_counts]
    if len(node_counts) != n_samples:
        raise ValueError(f"need {n_samples} node counts, got {len(node_counts)}")
    molecules = []
    per_sample = []
    hist = np.zeros(N_TIME_BINS, dtype=int)
    for n in node_counts:
        trajectory = integrate(model, prior_geometry(rng, n), spec)
        molecules.append(trajectory.final)
        per_sample.append(trajectory.nfe_total)
        hist += trajectory.nfe_by_interval
    return molecules, SampleStats(tuple(per_sample), int(sum(per_sample)), hist)
