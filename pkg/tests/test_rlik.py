import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from mfcal.design import Hyperrectangle
from mfcal.errors import InvalidArgument, NumericalFailure
from mfcal.gp import SEG_HIGH, SEG_LOW, SEG_OBS, CoefficientGP, GpHyperParams, MaternKernel, MeanBasis
from mfcal.rlik import (
    BasisLayout,
    ReducedLikelihood,
    Segment,
    StackedData,
    dense_log_likelihood,
    high_only_layout,
    reduced_log_likelihood,
)
from mfcal.synthetic import random_basis, random_instance

BOX1 = Hyperrectangle(("a",), (0.0,), (1.0,))


def scalar_problem(z, var=1.0, noise=1.0):
    proc = CoefficientGP("v1", MeanBasis((), ("a",)), np.zeros(0), MaternKernel(var, (0.5,)), 1)
    params = GpHyperParams((proc,), (), 0.0, 0.0, 0.0)
    layout = BasisLayout((Segment(SEG_OBS, None, np.ones((1, 1)), np.array([0]), noise),), BOX1, 1)
    return StackedData((np.array([[z]]),)), layout, params


def test_scalar_convolution():
    data, layout, params = scalar_problem(0.7)
    assert reduced_log_likelihood([0.3], data, layout, params) == pytest.approx(norm.logpdf(0.7, 0, math.sqrt(2)))


def test_documented_small_instance():
    data, layout, params, _ = random_instance(0, n_s=5, n_t=2, n_low=3, n_high=2, n_L=2, n_delta=1)
    for th in ([0.4, 2.0], [1.9, 0.1]):
        assert reduced_log_likelihood(th, data, layout, params) == pytest.approx(
            dense_log_likelihood(th, data, layout, params), abs=1e-6
        )


@given(
    seed=st.integers(0, 10_000),
    n_s=st.integers(2, 6),
    n_t=st.integers(1, 3),
    n_low=st.integers(1, 4),
    high_only=st.booleans(),
    a=st.floats(0, 2),
    b=st.floats(0, 5),
)
def test_reduced_matches_dense(seed, n_s, n_t, n_low, high_only, a, b):
    n_high = 1 + seed % n_low
    n_L = 1 + seed % min(2, n_s - 1)
    # the observation block must identify every coefficient it carries
    n_o = n_L + (0 if high_only else 1) + (seed // 7) % (n_s - n_L)
    n_o = min(n_o, n_s)
    data, layout, params, _ = random_instance(
        seed, n_s=n_s, n_t=n_t, n_low=n_low, n_high=n_high, n_L=n_L, n_delta=1, n_o=n_o, high_only=high_only
    )
    dense = dense_log_likelihood([a, b], data, layout, params)
    assert reduced_log_likelihood([a, b], data, layout, params) == pytest.approx(dense, abs=1e-6)
    assert ReducedLikelihood(data, layout, params)([a, b]) == pytest.approx(dense, abs=1e-6)


def test_lfm_scale_shapes():
    rng = np.random.default_rng(0)
    n_s, n_o, n_t, n_L, n_d = 1656, 170, 18, 3, 4
    both = np.zeros((n_s, n_L + n_d))
    low = np.zeros((n_s, n_L))
    box = Hyperrectangle(("alpha", "beta", "R"), (0, 0, 0), (0.5, 2.5, 0.1))
    procs = np.arange(n_L + n_d)
    segs = [Segment(SEG_OBS, None, both[:n_o], procs, 1.0)]
    segs += [Segment(SEG_HIGH, rng.uniform(size=3) * 0.1, both, procs, 1.0) for _ in range(5)]
    segs += [Segment(SEG_LOW, rng.uniform(size=3) * 0.1, low, np.arange(n_L), 1.0) for _ in range(20)]
    layout = BasisLayout(tuple(segs), box, n_t)
    assert len(layout.segments) == 1 + 5 + 20
    assert layout.n_coef == 1836
    assert layout.n_data == 748_260
    assert layout.block_shapes()[0] == (n_t * n_o, n_t * (n_L + n_d))
    assert layout.block_shapes()[-1] == (n_t * n_s, n_t * n_L)


def test_zero_prior_variance_is_independent_noise():
    data, layout, params, _ = random_instance(3, n_s=4, n_t=2)
    tiny = tuple(replace(p, kernel=replace(p.kernel, variance=1e-14)) for p in params.processes)
    params = replace(params, low=tiny[: len(params.low)], disc=tiny[len(params.low) :])
    th = np.array([1.0, 2.0])
    from mfcal.gp import slot_mean

    mean = layout.dense_U() @ slot_mean(params, layout.slots(th))
    expected = multivariate_normal(mean, np.diag(layout.noise_diag())).logpdf(data.Z)
    assert reduced_log_likelihood(th, data, layout, params) == pytest.approx(expected, abs=1e-6)


def test_zero_residual_term_scales_out():
    data, layout, params = scalar_problem(0.0)
    # Z equals U E x = 0, so only the log-determinants remain
    assert reduced_log_likelihood([0.5], data, layout, params) == pytest.approx(-0.5 * math.log(2 * math.pi * 2))


def test_low_runs_can_be_reordered():
    data, layout, params, _ = random_instance(5, n_low=4, n_high=2)
    first_low = [i for i, s in enumerate(layout.segments) if s.kind == SEG_LOW][0]
    order = list(range(first_low)) + list(range(first_low, len(layout.segments)))[::-1]
    layout2 = replace(layout, segments=tuple(layout.segments[i] for i in order))
    data2 = StackedData(tuple(data.blocks[i] for i in order))
    th = [0.7, 1.1]
    assert reduced_log_likelihood(th, data2, layout2, params) == pytest.approx(
        reduced_log_likelihood(th, data, layout, params), abs=1e-9
    )


def test_finite_over_the_box():
    data, layout, params, box = random_instance(9)
    lik = ReducedLikelihood(data, layout, params)
    for a in np.linspace(0, 2, 7):
        for b in np.linspace(0, 5, 7):
            assert np.isfinite(lik([a, b]))


def test_theta_outside_box():
    data, layout, params, _ = random_instance(1)
    with pytest.raises(InvalidArgument):
        reduced_log_likelihood([3.0, 1.0], data, layout, params)
    with pytest.raises(InvalidArgument):
        ReducedLikelihood(data, layout, params)([-0.1, 1.0])


def test_singular_gram_reported():
    data, layout, params = scalar_problem(1.0)
    seg = replace(layout.segments[0], basis=np.zeros((1, 1)))
    with pytest.raises(NumericalFailure, match="condition"):
        reduced_log_likelihood([0.5], data, replace(layout, segments=(seg,)), params)


def test_too_few_observed_locations():
    data, layout, params, _ = random_instance(0, n_s=3, n_t=2, n_low=1, n_high=1, n_L=1, n_delta=1, n_o=1)
    with pytest.raises(NumericalFailure):
        reduced_log_likelihood([0.5, 0.5], data, layout, params)


def test_dense_oracle_size_cap():
    data, layout, params, _ = random_instance(2, n_s=40, n_t=10, n_low=5, n_high=1)
    with pytest.raises(InvalidArgument):
        dense_log_likelihood([1.0, 1.0], data, layout, params)


def test_noise_variances_must_be_positive():
    data, layout, params = scalar_problem(1.0)
    with pytest.raises(InvalidArgument):
        replace(layout, segments=(replace(layout.segments[0], noise_var=0.0),))


def test_high_only_layout_structure():
    rng = np.random.default_rng(4)
    from mfcal.l96 import FieldRun, ObservationSet

    box = Hyperrectangle(("a", "b"), (0, 0), (2, 5))
    basis = random_basis(rng, 6, 2, 0.1)
    high = [FieldRun("high", rng.uniform(size=2), rng.normal(size=(6, 2))) for _ in range(3)]
    obs = ObservationSet(rng.normal(size=(4, 2)), np.arange(1, 5), 0.2)
    layout, data = high_only_layout(basis, obs, high, box, 0.04)
    assert len(layout.segments) == 4
    assert layout.segments[0].noise_var == pytest.approx(0.04 + 0.1)
    assert layout.segments[1].noise_var == pytest.approx(0.1)
    with pytest.raises(InvalidArgument):
        high_only_layout(basis, obs, [], box, 0.04)
