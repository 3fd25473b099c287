"""Conditional probability paths and the target fields they induce.

Time runs from 1 (the standard-normal prior) to 0 (the data). Throughout,
``x1`` is the prior-side sample and ``x0`` the data-side sample; the same
formulas apply unchanged to feature blocks, so the interpolants below
accept arrays of any matching shape.

Three path families are supported:

* the straight-line (optimal-transport style) interpolant with a floor
  ``sigma_min`` on the terminal width,
* variance-preserving Gaussian paths driven by a NoiseSchedule, where
  ``x_t = alpha(t) * x0 + sqrt(1 - alpha(t)^2) * eps``,
* the aligned variant of the straight-line path for point clouds, which
  first applies an optimal rotation + relabeling of the prior draw
  (see alignment.solve_eot) and then interpolates.

The variance-preserving target field is the time derivative of the map
``t -> alpha(t) x0 + sqrt(1 - alpha(t)^2) eps`` at fixed noise,

    u(x) = alpha'(t) / (1 - alpha(t)^2) * (x0 - alpha(t) x),

which reduces to ``alpha'(t) * x0`` at the prior end and vanishes on the
noiseless ray ``x = x0 / alpha(t)``. Its denominator vanishes at t = 0,
so target evaluations are floored at VP_TIME_FLOOR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alignment import EotPlan, solve_eot
from .data import MoleculeGeometry
from .geometry import project_zero_com

__all__ = [
    "VP_TIME_FLOOR",
    "SCHEDULE_KINDS",
    "PATH_KINDS",
    "NoiseSchedule",
    "ConditionalPath",
    "HybridPath",
    "ot_interpolate",
    "ot_target_field",
    "vp_sample",
    "vp_target_field",
    "eot_training_pair",
    "hybrid_training_sample",
    "path_coefficients",
]

# Below this time the variance-preserving denominator 1 - alpha^2 is too
# close to zero to divide by; training draws t from [VP_TIME_FLOOR, 1].
VP_TIME_FLOOR = 1e-5

SCHEDULE_KINDS = ("linear", "cosine", "polynomial")
PATH_KINDS = ("OT", "VP", "EOT")


def _check_time(t, name: str = "t") -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return t


def _scalar_like(value: np.ndarray, template) -> "float | np.ndarray":
    return float(value) if np.ndim(template) == 0 else value


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal decay alpha(t) for the variance-preserving path.

    ``linear`` integrates a linear noise rate beta(t) between beta_min and
    beta_max, giving alpha = exp(-(beta_min t + (beta_max - beta_min) t^2 / 2) / 2).
    ``cosine`` is the shifted-cosine decay cos((pi/2)(t + s)/(1 + s)),
    normalized to 1 at t = 0. ``polynomial`` is 1 - t^2.

    The cosine and polynomial forms reach 0 at t = 1, so both are passed
    through the affine map a -> (1 - 2 * alpha_floor) a + alpha_floor. That
    keeps alpha inside (0, 1) on the whole closed interval (no downstream
    division ever sees an exact zero) while preserving strict monotonicity
    and an analytic derivative. The linear form stays above exp(-5.025)
    on its own and is left untouched.
    """

    kind: str = "linear"
    beta_min: float = 0.1
    beta_max: float = 20.0
    cosine_offset: float = 0.008
    alpha_floor: float = 1e-5

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; choose from {SCHEDULE_KINDS}")
        if not 0.0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")
        if self.cosine_offset <= 0.0:
            raise ValueError("cosine_offset must be positive")
        if not 0.0 < self.alpha_floor < 1e-2:
            raise ValueError("alpha_floor must lie in (0, 0.01)")

    # -- internals ---------------------------------------------------------

    def _log_alpha_sq_linear(self, t: np.ndarray) -> np.ndarray:
        # -T(t) with T the integral of the linear rate from 0 to t.
        return -(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)

    def _affine(self, raw: np.ndarray) -> np.ndarray:
        return (1.0 - 2.0 * self.alpha_floor) * raw + self.alpha_floor

    # -- public surface ----------------------------------------------------

    def alpha(self, t):
        """Signal coefficient alpha(t); accepts scalars or arrays in [0, 1]."""
        t_arr = _check_time(t)
        if self.kind == "linear":
            out = np.exp(0.5 * self._log_alpha_sq_linear(t_arr))
        elif self.kind == "cosine":
            c = 0.5 * math.pi / (1.0 + self.cosine_offset)
            raw = np.cos(c * (t_arr + self.cosine_offset)) / math.cos(c * self.cosine_offset)
            out = self._affine(raw)
        else:
            out = self._affine(1.0 - t_arr * t_arr)
        return _scalar_like(out, t)

    def alpha_prime(self, t):
        """Analytic time derivative of alpha; negative for t > 0."""
        t_arr = _check_time(t)
        if self.kind == "linear":
            beta = self.beta_min + (self.beta_max - self.beta_min) * t_arr
            out = -0.5 * beta * np.exp(0.5 * self._log_alpha_sq_linear(t_arr))
        elif self.kind == "cosine":
            c = 0.5 * math.pi / (1.0 + self.cosine_offset)
            scale = (1.0 - 2.0 * self.alpha_floor) / math.cos(c * self.cosine_offset)
            out = -c * scale * np.sin(c * (t_arr + self.cosine_offset))
        else:
            out = -2.0 * t_arr * (1.0 - 2.0 * self.alpha_floor)
        return _scalar_like(out, t)

    def one_minus_alpha_sq(self, t):
        """1 - alpha(t)^2, computed without cancellation near t = 0."""
        t_arr = _check_time(t)
        if self.kind == "linear":
            out = -np.expm1(self._log_alpha_sq_linear(t_arr))
        else:
            a = np.asarray(self.alpha(t_arr))
            out = (1.0 - a) * (1.0 + a)
        return _scalar_like(out, t)

    def snr(self, t):
        """Signal-to-noise ratio alpha^2 / (1 - alpha^2); rejects t = 0."""
        t_arr = _check_time(t)
        if np.any(t_arr == 0.0):
            raise ValueError("snr is infinite at t = 0; evaluate at t > 0")
        a = np.asarray(self.alpha(t_arr))
        out = a * a / np.asarray(self.one_minus_alpha_sq(t_arr))
        return _scalar_like(out, t)


@dataclass(frozen=True)
class ConditionalPath:
    """One path family plus its parameters.

    ``sigma_min`` applies to the OT and EOT kinds; the VP kind requires a
    schedule and must not carry one of the other two's parameters silently,
    so a schedule on OT/EOT (or a missing one on VP) is rejected.
    """

    kind: str
    sigma_min: float = 1e-4
    schedule: "NoiseSchedule | None" = None

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ValueError(f"unknown path kind {self.kind!r}; choose from {PATH_KINDS}")
        if not 0.0 < self.sigma_min <= 0.1:
            raise ValueError(f"sigma_min must lie in (0, 0.1], got {self.sigma_min}")
        if self.kind == "VP" and self.schedule is None:
            raise ValueError("VP path requires a NoiseSchedule")
        if self.kind != "VP" and self.schedule is not None:
            raise ValueError(f"{self.kind} path does not take a schedule")


@dataclass(frozen=True)
class HybridPath:
    """Independent coordinate and feature paths composed into one draw.

    Alignment acts on point clouds, so the feature path may be OT or VP
    but not EOT.
    """

    path_x: ConditionalPath
    path_h: ConditionalPath

    def __post_init__(self):
        if self.path_h.kind == "EOT":
            raise ValueError("feature path cannot be EOT; use OT or VP")


def _paired(x1, x0) -> tuple:
    a = np.asarray(x1, dtype=np.float64)
    b = np.asarray(x0, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired arrays must match in shape, got {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("path inputs contain non-finite values")
    return a, b


def ot_interpolate(x1, x0, t: float, sigma_min: float) -> np.ndarray:
    """Straight-line interpolant (sigma_min + (1 - sigma_min) t) x1 + (1 - t) x0."""
    x1, x0 = _paired(x1, x0)
    t = float(_check_time(t))
    return (sigma_min + (1.0 - sigma_min) * t) * x1 + (1.0 - t) * x0


def ot_target_field(x1, x0, sigma_min: float) -> np.ndarray:
    """Velocity of the straight-line interpolant: constant in t."""
    x1, x0 = _paired(x1, x0)
    return (1.0 - sigma_min) * x1 - x0


def vp_sample(x0, t: float, schedule: NoiseSchedule, eps) -> np.ndarray:
    """Draw from the variance-preserving path at time t with given noise."""
    x0, eps = _paired(x0, eps)
    t = float(_check_time(t))
    a = schedule.alpha(t)
    return a * x0 + math.sqrt(schedule.one_minus_alpha_sq(t)) * eps


def vp_target_field(x, x0, t: float, schedule: NoiseSchedule) -> np.ndarray:
    """Variance-preserving target velocity at the noisy point x.

    Rejects t below VP_TIME_FLOOR, where the denominator 1 - alpha^2
    underflows toward zero.
    """
    x, x0 = _paired(x, x0)
    t = float(_check_time(t))
    if t < VP_TIME_FLOOR:
        raise ValueError(f"t={t} is below the variance floor {VP_TIME_FLOOR}")
    a = schedule.alpha(t)
    return schedule.alpha_prime(t) / schedule.one_minus_alpha_sq(t) * (x0 - a * x)


def eot_training_pair(x1, x0, t: float, sigma_min: float, plan: EotPlan) -> tuple:
    """Aligned straight-line pair: interpolant and target for point clouds.

    ``plan`` must have been solved between this prior draw and this data
    cloud (z = x1, y = x0). The prior draw is rotated and relabeled by the
    plan, then the straight-line formulas apply; the target is re-centered
    so it stays in the zero center-of-mass subspace.
    """
    x1, x0 = _paired(x1, x0)
    if x1.ndim != 2 or x1.shape[1] != 3:
        raise ValueError(f"aligned pairs are point clouds of shape (N, 3), got {x1.shape}")
    if plan.permutation.shape[0] != x1.shape[0]:
        raise ValueError(
            f"plan was solved for {plan.permutation.shape[0]} points, clouds have {x1.shape[0]}"
        )
    aligned = (x1 @ plan.rotation.T)[plan.permutation]
    x_t = ot_interpolate(aligned, x0, t, sigma_min)
    u_x = project_zero_com(ot_target_field(aligned, x0, sigma_min))
    return x_t, u_x


def path_coefficients(path: ConditionalPath, t):
    """Data coefficient and noise width of the conditional Gaussian at t.

    For every kind the conditional law of the path given the data point is
    N(a_t x0, s_t^2 I) in the appropriate frame (the aligned frame for
    EOT, whose coefficients match OT). Returns (a_t, s_t).
    """
    t_arr = _check_time(t)
    if path.kind == "VP":
        a = np.asarray(path.schedule.alpha(t_arr))
        s = np.sqrt(np.asarray(path.schedule.one_minus_alpha_sq(t_arr)))
    else:
        a = 1.0 - t_arr
        s = path.sigma_min + (1.0 - path.sigma_min) * t_arr
    return _scalar_like(a, t), _scalar_like(s, t)


def _interpolate_one(path: ConditionalPath, x0, eps, t: float, *, rng, eot_restarts):
    """Dispatch one block (coordinates or features) through its path."""
    if path.kind == "OT":
        x_t = ot_interpolate(eps, x0, t, path.sigma_min)
        u = ot_target_field(eps, x0, path.sigma_min)
        plan = None
    elif path.kind == "VP":
        x_t = vp_sample(x0, t, path.schedule, eps)
        u = vp_target_field(x_t, x0, max(t, VP_TIME_FLOOR), path.schedule)
        plan = None
    else:
        plan = solve_eot(eps, x0, restarts=eot_restarts, rng=rng)
        x_t, u = eot_training_pair(eps, x0, t, path.sigma_min, plan)
    return x_t, u, plan


def hybrid_training_sample(
    g0: MoleculeGeometry,
    t: float,
    hp: HybridPath,
    rng: np.random.Generator,
    *,
    eot_restarts: int = 1,
    noise: "tuple | None" = None,
):
    """One training draw: noisy geometry plus coordinate and feature targets.

    Draws standard-normal noise for both blocks (coordinate noise is
    projected to zero center of mass), pushes each block through its own
    path, and returns ``(g_t, u_x, u_h, plan)`` where ``plan`` is the
    alignment the coordinate block used (None unless its path is EOT; the
    caller can log ``plan.iterations``). The two blocks never mix: the
    coordinate outputs depend only on the coordinate noise and path, the
    feature outputs only on theirs.

    ``noise`` substitutes the pair (eps_x, eps_h) for the internal draws;
    the generator is still consumed by the alignment solver when the
    coordinate path is EOT. Consumption order is fixed: eps_x, then
    eps_h, then alignment restarts.

    Variance-preserving targets at t below VP_TIME_FLOOR are evaluated at
    the floor (the interpolant itself uses the exact t), so the data
    endpoint t = 0 remains usable outside training.
    """
    t = float(_check_time(t))
    if noise is None:
        eps_x = rng.standard_normal((g0.n_nodes, 3))
        eps_h = rng.standard_normal((g0.n_nodes, g0.d))
    else:
        eps_x, eps_h = noise
    eps_x = project_zero_com(eps_x)
    x_t, u_x, plan = _interpolate_one(hp.path_x, g0.coords, eps_x, t, rng=rng, eot_restarts=eot_restarts)
    h_t, u_h, _ = _interpolate_one(hp.path_h, g0.features, np.asarray(eps_h, dtype=np.float64), t, rng=rng, eot_restarts=eot_restarts)
    return MoleculeGeometry(x_t, h_t), u_x, u_h, plan
