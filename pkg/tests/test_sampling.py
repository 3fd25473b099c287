"""Tests for the ODE solvers, NFE accounting, and feature discretization."""

import numpy as np
import pytest

from geomflow.data import MoleculeGeometry, encode
from geomflow.egnn import VectorFieldModel
from geomflow.geometry import project_zero_com, random_rotation
from geomflow.sampling import (
    MAX_STORED_STATES,
    IntegratorSpec,
    Trajectory,
    discretize_features,
    integrate,
    integrate_field,
    prior_geometry,
    sample_batch,
    step_euler,
    step_midpoint,
    step_rk4,
)


def _decay_field(g, t):
    return -g.coords, -g.features


def _random_model(seed=0):
    m = VectorFieldModel(seed=seed)
    rng = np.random.default_rng(seed + 100)
    m.params[:] += rng.uniform(-0.2, 0.2, m.params.size)
    m.mark_updated()
    return m


# ---------------------------------------------------------------------- spec


def test_spec_fills_in_fixed_step_defaults():
    assert IntegratorSpec(method="euler").n_steps == 100
    assert IntegratorSpec(method="midpoint").n_steps == 100
    assert IntegratorSpec(method="rk4").n_steps == 50
    assert IntegratorSpec().n_steps is None  # dopri5 adapts


def test_spec_validation():
    with pytest.raises(ValueError, match="method"):
        IntegratorSpec(method="heun")
    with pytest.raises(ValueError, match="n_steps"):
        IntegratorSpec(method="euler", n_steps=0)
    with pytest.raises(ValueError, match="rtol"):
        IntegratorSpec(rtol=0.0)
    with pytest.raises(ValueError, match="max_nfe"):
        IntegratorSpec(max_nfe=0)


def test_trajectory_validation():
    g = prior_geometry(np.random.default_rng(0), 3)
    with pytest.raises(ValueError, match="decreasing"):
        Trajectory(states=((0.5, g), (0.5, g)), nfe_total=0, nfe_by_interval=np.zeros(20, dtype=int))
    with pytest.raises(ValueError, match="add up"):
        Trajectory(states=((1.0, g),), nfe_total=3, nfe_by_interval=np.zeros(20, dtype=int))


# ------------------------------------------------------------- known fields


def test_constant_field_euler_translates_exactly():
    rng = np.random.default_rng(1)
    g1 = prior_geometry(rng, 4)
    cx = project_zero_com(rng.standard_normal((4, 3)))
    ch = rng.standard_normal((4, 6))
    constant = lambda g, t: (cx, ch)
    tr = integrate_field(constant, g1, IntegratorSpec(method="euler", n_steps=4))
    np.testing.assert_allclose(tr.final.coords, g1.coords - cx, rtol=0, atol=1e-14)
    tr10 = integrate_field(constant, g1, IntegratorSpec(method="euler", n_steps=10))
    np.testing.assert_allclose(tr10.final.features, g1.features - ch, rtol=0, atol=1e-14)


def test_rk4_matches_the_exponential():
    g1 = prior_geometry(np.random.default_rng(2), 5)
    tr = integrate_field(_decay_field, g1, IntegratorSpec(method="rk4", n_steps=100))
    np.testing.assert_allclose(tr.final.coords, np.e * g1.coords, rtol=1e-8)
    np.testing.assert_allclose(tr.final.features, np.e * g1.features, rtol=1e-8)


def test_single_rk4_step_is_the_quartic_taylor_polynomial():
    g1 = prior_geometry(np.random.default_rng(3), 4)
    tr = integrate_field(_decay_field, g1, IntegratorSpec(method="rk4", n_steps=1))
    taylor = 1.0 + 1.0 + 1.0 / 2.0 + 1.0 / 6.0 + 1.0 / 24.0  # e to 4th order at dt=-1
    np.testing.assert_allclose(tr.final.coords, taylor * g1.coords, rtol=1e-14)


def test_euler_error_halves_with_the_step():
    g1 = prior_geometry(np.random.default_rng(4), 5)
    exact = np.e * g1.coords

    def err(n):
        tr = integrate_field(_decay_field, g1, IntegratorSpec(method="euler", n_steps=n))
        return np.linalg.norm(tr.final.coords - exact)

    assert err(100) / err(200) == pytest.approx(2.0, rel=0.1)


def test_convergence_orders():
    g1 = prior_geometry(np.random.default_rng(5), 5)
    exact = np.e * g1.coords
    for method, order, width in (("euler", 1.0, 0.3), ("midpoint", 2.0, 0.3), ("rk4", 4.0, 0.4)):
        ns = np.array([50, 100, 200, 400, 800])
        errs = [
            np.linalg.norm(
                integrate_field(_decay_field, g1, IntegratorSpec(method=method, n_steps=int(n))).final.coords
                - exact
            )
            for n in ns
        ]
        slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
        assert abs(slope - order) < width, f"{method}: slope {slope}"


def test_dopri5_tracks_the_exponential_and_tightens_with_rtol():
    g1 = prior_geometry(np.random.default_rng(6), 5)
    exact = np.e * g1.coords

    def err(rtol):
        spec = IntegratorSpec(rtol=rtol, atol=rtol)
        tr = integrate_field(_decay_field, g1, spec)
        return np.linalg.norm(tr.final.coords - exact) / np.linalg.norm(exact)

    loose, tight = err(1e-4), err(1e-7)
    assert loose < 10 * 1e-4
    assert tight < loose


# ----------------------------------------------------------- failure modes


def test_dopri5_respects_the_evaluation_budget():
    g1 = prior_geometry(np.random.default_rng(7), 4)
    with pytest.raises(RuntimeError, match="max_nfe"):
        integrate_field(_decay_field, g1, IntegratorSpec(max_nfe=10))


def test_non_finite_field_aborts_with_the_time():
    g1 = prior_geometry(np.random.default_rng(8), 4)

    def explodes(g, t):
        if t < 0.5:
            return np.full_like(g.coords, np.inf), -g.features
        return -g.coords, -g.features

    for spec in (IntegratorSpec(method="euler", n_steps=20), IntegratorSpec()):
        with pytest.raises(FloatingPointError, match="t="):
            integrate_field(explodes, g1, spec)


def test_step_functions_reject_forward_time():
    model = VectorFieldModel(seed=0)
    g = prior_geometry(np.random.default_rng(9), 3)
    with pytest.raises(ValueError, match="dt"):
        step_euler(model, g, 0.5, 0.1)


# -------------------------------------------------------------- step bricks


def test_zero_dt_leaves_the_state_alone():
    model = _random_model()
    g = prior_geometry(np.random.default_rng(10), 5)
    for stepper in (step_euler, step_midpoint, step_rk4):
        out = stepper(model, g, 0.8, 0.0)
        np.testing.assert_array_equal(out.coords, g.coords)
        np.testing.assert_array_equal(out.features, g.features)


def test_steppers_agree_with_integrate_on_one_step():
    model = _random_model(seed=3)
    g = prior_geometry(np.random.default_rng(11), 4)
    stepped = step_euler(model, g, 1.0, -1.0 / 8.0)
    tr = integrate(model, g, IntegratorSpec(method="euler", n_steps=8))
    np.testing.assert_array_equal(tr.states[1][1].coords, stepped.coords)


# ----------------------------------------------------------- trajectories


def test_zero_field_model_returns_the_prior():
    model = VectorFieldModel(seed=1)  # heads at zero
    g1 = prior_geometry(np.random.default_rng(12), 6)
    tr = integrate(model, g1, IntegratorSpec(method="euler", n_steps=8))
    np.testing.assert_array_equal(tr.final.coords, g1.coords)
    np.testing.assert_array_equal(tr.final.features, g1.features)


def test_trajectory_bookkeeping_for_fixed_steps():
    model = _random_model()
    g1 = prior_geometry(np.random.default_rng(13), 5)

    tr = integrate(model, g1, IntegratorSpec(method="euler", n_steps=100))
    assert tr.nfe_total == 100
    assert len(tr.states) == MAX_STORED_STATES
    assert tr.states[0][0] == 1.0 and tr.states[-1][0] == 0.0
    assert int(tr.nfe_by_interval.sum()) == 100

    full = integrate(model, g1, IntegratorSpec(method="euler", n_steps=100, store_full=True))
    assert len(full.states) == 101

    assert integrate(model, g1, IntegratorSpec(method="midpoint", n_steps=100)).nfe_total == 200
    assert integrate(model, g1, IntegratorSpec(method="rk4", n_steps=50)).nfe_total == 200


def test_trajectory_states_stay_centered():
    model = _random_model(seed=5)
    g1 = prior_geometry(np.random.default_rng(14), 7)
    tr = integrate(model, g1, IntegratorSpec(method="midpoint", n_steps=20))
    for t, g in tr.states:
        np.testing.assert_allclose(g.coords.mean(axis=0), 0.0, atol=1e-6)


def test_generation_is_rotation_equivariant():
    model = _random_model(seed=6)
    rng = np.random.default_rng(15)
    g1 = prior_geometry(rng, 6)
    rot = random_rotation(rng)
    spec = IntegratorSpec(method="euler", n_steps=20)
    base = integrate(model, g1, spec).final
    rotated = integrate(model, MoleculeGeometry(g1.coords @ rot.T, g1.features), spec).final
    np.testing.assert_allclose(rotated.coords, base.coords @ rot.T, atol=1e-9)
    np.testing.assert_allclose(rotated.features, base.features, atol=1e-9)


# ---------------------------------------------------------------- decoding


def test_prior_geometry_is_centered_and_seeded():
    a = prior_geometry(np.random.default_rng(16), 9)
    b = prior_geometry(np.random.default_rng(16), 9)
    assert a.coords.shape == (9, 3) and a.features.shape == (9, 6)
    np.testing.assert_allclose(a.coords.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_array_equal(a.coords, b.coords)
    with pytest.raises(ValueError, match="n_nodes"):
        prior_geometry(np.random.default_rng(0), 0)


def test_discretize_picks_argmax_and_nearest_integer():
    h0 = np.array(
        [
            [0.1, 0.9, 0.0, 0.0, 0.0, 0.49],
            [0.0, 0.2, 0.1, 0.0, 0.8, 0.51],
        ]
    )
    symbols, charges = discretize_features(h0)
    assert symbols == ["C", "F"]
    np.testing.assert_array_equal(charges, [0, 1])


def test_discretize_round_trips_exact_encodings():
    g = encode(["H", "O", "N"], [0, -1, 1], np.arange(9.0).reshape(3, 3))
    symbols, charges = discretize_features(g.features)
    assert symbols == ["H", "O", "N"]
    np.testing.assert_array_equal(charges, [0, -1, 1])


def test_discretize_validation():
    with pytest.raises(ValueError, match="sigma0"):
        discretize_features(np.zeros((2, 6)), sigma0=0.0)
    with pytest.raises(ValueError, match="features"):
        discretize_features(np.zeros((2, 4)))


# -------------------------------------------------------------- batch runs


def test_sample_batch_empty():
    molecules, stats = sample_batch(VectorFieldModel(seed=0), 0, [], IntegratorSpec(), np.random.default_rng(0))
    assert molecules == []
    assert stats.nfe_total == 0 and stats.nfe_per_sample == ()


def test_sample_batch_sizes_counts_and_determinism():
    model = _random_model(seed=7)
    spec = IntegratorSpec(method="euler", n_steps=10)
    counts = [3, 5, 4]
    mols_a, stats_a = sample_batch(model, 3, counts, spec, np.random.default_rng(20))
    mols_b, stats_b = sample_batch(model, 3, counts, spec, np.random.default_rng(20))
    assert [m.n_nodes for m in mols_a] == counts
    assert stats_a.nfe_per_sample == (10, 10, 10)
    assert stats_a.nfe_total == 30
    assert int(stats_a.nfe_by_interval.sum()) == 30
    for a, b in zip(mols_a, mols_b):
        assert a.coords.tobytes() == b.coords.tobytes()
    assert stats_b.nfe_total == 30


def test_sample_batch_rejects_mismatched_counts():
    with pytest.raises(ValueError, match="node counts"):
        sample_batch(VectorFieldModel(seed=0), 2, [4], IntegratorSpec(), np.random.default_rng(0))
