import copy
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from mfcal.errors import InvalidArgument
from mfcal.gp import SEG_OBS, slot_cov, slot_mean
from mfcal.model import ModelConfig
from mfcal.rlik import StackedData
from mfcal.seqdesign import (
    HighPredictor,
    StepAborted,
    compute_f_min,
    conditional_H,
    ei_pointwise,
    ei_surface,
    expected_improvement,
    initial_state,
    lattice,
    run_loop,
    sequential_step,
)
from mfcal.synthetic import toy_field, toy_problem

CFG = ModelConfig(n_low_eofs=2, n_disc_eofs=1, restarts=2, maxfev=600)


@pytest.fixture(scope="module")
def toy():
    low, high, obs, bounds = toy_problem()
    state = initial_state(low, high, obs, bounds, CFG)
    return state


# ------------------------------------------------------------ pointwise EI


def test_ei_zero_threshold_is_zero():
    assert ei_pointwise(1.0, 0.3, 0.7, 0.0) == pytest.approx(0.0, abs=1e-15)


def test_ei_reference_value():
    # Y = H_hat, sigma = 1, f_min = 1: 2 * pdf(1)
    assert ei_pointwise(0.0, 0.0, 1.0, 1.0) == pytest.approx(2 * norm.pdf(1.0), abs=1e-12)
    assert ei_pointwise(0.0, 0.0, 1.0, 1.0) == pytest.approx(0.483941, abs=1e-6)


@pytest.mark.parametrize("d", [0.0, 0.4, 1.5])
def test_ei_small_sigma_limit(d):
    f = 1.0
    assert ei_pointwise(d, 0.0, 1e-7, f) == pytest.approx(max(f - d * d, 0.0), abs=1e-6)
    assert ei_pointwise(d, 0.0, 0.0, f) == max(f - d * d, 0.0)


def test_ei_rejects_negative_arguments():
    with pytest.raises(InvalidArgument):
        ei_pointwise(0.0, 0.0, -1.0, 1.0)
    with pytest.raises(InvalidArgument):
        ei_pointwise(0.0, 0.0, 1.0, -1.0)


def test_ei_vectorized_shape():
    out = ei_pointwise(np.zeros((3, 4)), np.ones((3, 4)), 0.5, np.full((3, 4), 2.0))
    assert out.shape == (3, 4) and np.all(out >= 0)


@given(
    st.floats(-3, 3),
    st.floats(0.01, 3),
    st.floats(0.01, 4),
)
def test_ei_symmetric_and_nonnegative(d, s, f):
    a = ei_pointwise(d, 0.0, s, f)
    b = ei_pointwise(-d, 0.0, s, f)
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("d,s,f", [(0.0, 1.0, 1.0), (0.8, 0.5, 1.2), (-1.1, 2.0, 0.3), (2.5, 0.7, 4.0)])
def test_ei_matches_monte_carlo(d, s, f):
    rng = np.random.default_rng(11)
    H = rng.normal(0.0, s, 1_000_000)
    g = np.maximum(f - (d - H) ** 2, 0.0)
    se = g.std() / np.sqrt(g.size)
    assert abs(ei_pointwise(d, 0.0, s, f) - g.mean()) < 4 * se + 1e-12


def test_f_min_is_best_run_per_point():
    low, high, obs, _ = toy_problem()
    f = compute_f_min(obs, high)
    rows = obs.locations - 1
    for r in high:
        assert np.all(f <= (obs.values - r.values[rows]) ** 2 + 1e-15)
    assert f.shape == obs.values.shape


# ------------------------------------------------------- conditional law of H


def dense_conditional(model, theta):
    """Textbook GP conditioning on the stacked run data, all dense."""
    layout, params = model.layout, model.params
    keep = [i for i, s in enumerate(layout.segments) if s.kind != SEG_OBS]
    sub = replace(layout, segments=tuple(layout.segments[i] for i in keep))
    z = StackedData(tuple(model.data.blocks[i] for i in keep)).Z
    D = sub.dense_U()
    slots = sub.slots()
    S = slot_cov(params, slots, slots)
    Czz = D @ S @ D.T + np.diag(sub.noise_diag())
    mz = D @ slot_mean(params, slots)
    pred = HighPredictor(model)
    new = pred._new_slots(theta)
    B = np.kron(np.eye(layout.n_t), model.full_basis)
    Chz = B @ slot_cov(params, new, slots) @ D.T
    Chh = B @ slot_cov(params, new, new) @ B.T + model.high_noise_var * np.eye(B.shape[0])
    mean = B @ slot_mean(params, new) + Chz @ np.linalg.solve(Czz, z - mz)
    cov = Chh - Chz @ np.linalg.solve(Czz, Chz.T)
    n_s = model.full_basis.shape[0]
    return mean.reshape(layout.n_t, n_s).T, np.diag(cov).reshape(layout.n_t, n_s).T


@pytest.mark.parametrize("theta", [(0.3, 1.2), (1.7, 4.4), (0.5, 3.0)])
def test_conditional_matches_dense_oracle(toy, theta):
    H, var = HighPredictor(toy.model).predict(theta)
    H_ref, var_ref = dense_conditional(toy.model, theta)
    scale = np.abs(H_ref).max()
    np.testing.assert_allclose(H, H_ref, atol=1e-6 * scale)
    np.testing.assert_allclose(var, var_ref, atol=1e-6 * max(var_ref.max(), 1e-12), rtol=1e-6)


def test_conditional_variance_nonnegative(toy):
    pred = HighPredictor(toy.model)
    rng = np.random.default_rng(3)
    for th in toy.bounds.from_unit(rng.uniform(size=(20, 2))):
        _, var = pred.predict(th)
        assert np.all(var >= 0)


def test_conditional_single_point(toy):
    pred = HighPredictor(toy.model)
    H, var = pred.predict((0.9, 2.2))
    m, v = conditional_H(4, 2, (0.9, 2.2), toy.model, pred)
    assert m == pytest.approx(H[3, 1]) and v == pytest.approx(var[3, 1])


def test_run_settings_reproduce_runs(toy):
    pred = HighPredictor(toy.model)
    for run in toy.high_runs:
        H, var = pred.predict(run.theta)
        np.testing.assert_array_equal(H, run.values)
        assert np.all(var == 0)


def test_ei_vanishes_at_run_settings(toy):
    pred = HighPredictor(toy.model)
    f = toy.f_min
    for run in toy.high_runs:
        assert expected_improvement(pred, toy.obs, f, run.theta) == pytest.approx(0.0, abs=1e-12)


def test_lattice_ei_matches_monte_carlo(toy):
    pred = HighPredictor(toy.model)
    f = toy.f_min
    rows = toy.obs.locations - 1
    rng = np.random.default_rng(5)
    _, grid = lattice(toy.bounds, 10)
    for th in grid[rng.choice(len(grid), 20, replace=False)]:
        H, var = pred.predict(th, rows)
        g = np.concatenate(
            [
                np.maximum(f - (toy.obs.values - H - np.sqrt(var) * rng.standard_normal((50_000, *H.shape))) ** 2, 0.0).sum(axis=(1, 2))
                for _ in range(10)
            ]
        )
        se = g.std() / np.sqrt(g.size)
        assert abs(expected_improvement(pred, toy.obs, f, th) - g.mean()) < 3 * se + 1e-9 * f.sum()


def test_lattice_order_and_surface(toy):
    axes, grid = lattice(toy.bounds, 3)
    assert grid.shape == (9, 2)
    np.testing.assert_array_equal(grid[:3, 0], [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(grid[:3, 1], axes[1])
    surf = ei_surface(toy.model, toy.obs, toy.f_min, 3)
    assert np.array_equal(surf.argmax, grid[int(np.argmax(surf.values))])
    with pytest.raises(InvalidArgument):
        ei_surface(toy.model, toy.obs, toy.f_min, 3, grid=np.zeros((0, 2)))


def test_surface_csv(toy, tmp_path):
    surf = ei_surface(toy.model, toy.obs, toy.f_min, 4)
    surf.write_csv(("a", "b"), tmp_path / "ei.csv")
    lines = (tmp_path / "ei.csv").read_text().splitlines()
    assert lines[0] == "a,b,ei" and len(lines) == 17


# --------------------------------------------------------- sequential loop


def toy_simulator(fid, theta):
    return toy_field(fid, theta)


def test_sequential_steps(toy):
    before = copy.deepcopy(toy.high_runs)
    state, _ = run_loop(toy, toy_simulator, 8, 3)
    assert len(state.low_runs) == len(toy.low_runs) + 3
    assert len(state.high_runs) == len(toy.high_runs) + 3
    assert [r.values.tolist() for r in toy.high_runs] == [r.values.tolist() for r in before]


def test_each_step_improves(toy):
    cur = toy
    for _ in range(3):
        nxt, surf = sequential_step(cur, toy_simulator, 8)
        assert np.all(nxt.f_min <= cur.f_min)
        # once run, the chosen setting has less improvement left
        old = expected_improvement(HighPredictor(cur.model), cur.obs, cur.f_min, surf.argmax)
        new = expected_improvement(HighPredictor(nxt.model), nxt.obs, nxt.f_min, surf.argmax)
        assert new < old
        cur = nxt


def test_failing_simulator_leaves_state(toy):
    n_low, n_high = len(toy.low_runs), len(toy.high_runs)

    def broken(fid, theta):
        if fid == "high":
            raise RuntimeError("blow-up")
        return toy_field(fid, theta)

    with pytest.raises(StepAborted):
        sequential_step(toy, broken, 5)
    assert len(toy.low_runs) == n_low and len(toy.high_runs) == n_high


def test_zero_steps_is_identity(toy):
    state, surfaces = run_loop(toy, toy_simulator, 5, 0)
    assert state is toy and surfaces == []


def test_high_only_loop():
    low, high, obs, bounds = toy_problem()
    state = initial_state(low, high, obs, bounds, replace(CFG, mode="high-only", n_high_eofs=2))
    nxt, surf = sequential_step(state, toy_simulator, 6)
    assert len(nxt.high_runs) == len(high) + 1
    assert nxt.model.config.mode == "high-only"
