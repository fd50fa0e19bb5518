from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lbgm.data import Individual, OutcomeSeries
from lbgm.model import (
    CrossParams,
    ModelSpec,
    OutcomeModelSpec,
    OutcomeParams,
    ParameterSet,
    build_loading_matrix,
    implied_moments,
    interval_structure,
    rescale_parameters,
)

GAMMAS = (1.0, 0.8, 0.6, 0.4, 0.2)


def cumulative_oracle(times, gammas):
    """Exact cumulative sum of rate x interval length on a complete grid."""
    t = [Fraction(str(x)) for x in times]
    g = [Fraction(str(x)) for x in gammas]
    out = [Fraction(0)]
    for k in range(1, len(t)):
        out.append(out[-1] + g[k - 1] * (t[k] - t[k - 1]))
    return out


def person(times, waves=None, label="y", J=None, values=None, other=None):
    waves = tuple(waves or range(1, len(times) + 1))
    J = J or max(waves)
    values = values or tuple(0.0 for _ in times)
    series = [OutcomeSeries(label, waves, tuple(times), tuple(values), J)]
    if other is not None:
        series.append(other)
    return Individual("a", tuple(series))


def uni_params(mu=(50.0, 4.0), psi=(25.0, 1.5, 1.0), gammas=GAMMAS, theta=1.0):
    return ParameterSet((OutcomeParams(*mu, *psi, gamma=gammas, theta_eps=theta),))


def test_complete_grid_loadings_match_cumulative_sum():
    lam = build_loading_matrix(range(6), GAMMAS)
    assert np.all(lam[:, 0] == 1.0)
    assert [Fraction(x).limit_denominator(1000) for x in lam[:, 1]] == cumulative_oracle(range(6), GAMMAS)
    assert cumulative_oracle(range(6), GAMMAS) == [Fraction(x) for x in ("0", "1", "1.8", "2.4", "2.8", "3")]
    np.testing.assert_allclose(lam[:, 1], [0, 1.0, 1.8, 2.4, 2.8, 3.0], rtol=0, atol=1e-15)
    traj = lam @ np.array([20.0, 1.0])
    np.testing.assert_allclose(traj, [20, 21, 21.8, 22.4, 22.8, 23.0], rtol=0, atol=1e-13)
    assert traj[2] - traj[1] == pytest.approx(0.8, abs=1e-13)


def test_unit_rates_give_linear_loading():
    np.testing.assert_array_equal(build_loading_matrix([0.0, 1.0, 2.0], [1.0, 1.0])[:, 1], [0, 1, 2])


def test_skipped_wave_matches_full_grid_then_row_deletion():
    full = build_loading_matrix(range(6), GAMMAS)
    kept = [0, 1, 2, 3, 5]
    skipped = build_loading_matrix([0.0, 1.0, 2.0, 3.0, 5.0], GAMMAS, observed_waves=[1, 2, 3, 4, 6])
    np.testing.assert_array_equal(skipped, full[kept])
    np.testing.assert_allclose(skipped[:, 1], [0, 1.0, 1.8, 2.4, 3.0], atol=1e-15)


def test_merged_interval_rate_when_a_wave_is_never_measured():
    # t=5 is never measured, so the last interval runs from t=4 to t=6
    times = [0.0, 1.0, 2.0, 3.0, 4.0, 6.0]
    gammas = [1.0, 0.8, 0.6, 0.4, 0.4]
    L = build_loading_matrix(times, gammas)[:, 1]
    exact = cumulative_oracle(times, gammas)
    assert exact[-1] == Fraction(36, 10)
    np.testing.assert_array_max_ulp(L, np.array([float(x) for x in exact]), maxulp=2)
    assert (L[2] - L[1]) / (2.0 - 1.0) == pytest.approx(0.8, abs=1e-15)
    assert (L[5] - L[4]) / (6.0 - 4.0) == pytest.approx(0.4, abs=1e-15)
    # a per-step view would call both changes 0.8
    assert L[5] - L[4] == pytest.approx(L[2] - L[1], abs=1e-15)


def test_loading_errors():
    with pytest.raises(ValueError):
        build_loading_matrix([], GAMMAS)
    with pytest.raises(ValueError):
        build_loading_matrix([0.0, 2.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        build_loading_matrix([0.0, 1.0, 2.0], [1.0, np.nan])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 3.0), min_size=3, max_size=9), st.data())
def test_loading_additivity(gaps, data):
    J = len(gaps) + 1
    gammas = data.draw(st.lists(st.floats(-2, 2), min_size=J - 1, max_size=J - 1))
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    L = build_loading_matrix(times, gammas)[:, 1]
    np.testing.assert_allclose(np.diff(L), np.asarray(gammas) * np.diff(times), atol=1e-12)


def test_implied_means_and_first_wave_variance():
    m = implied_moments(ModelSpec((OutcomeModelSpec("y", 6),)), uni_params(), person(range(6)))
    np.testing.assert_allclose(m.mean, [50, 54, 57.2, 59.6, 61.2, 62.0], atol=1e-12)
    assert m.covariance[0, 0] == pytest.approx(26.0, abs=1e-12)
    assert m.entry_index == tuple(("y", w) for w in range(1, 7))


def parallel_spec(J=6, fixed=(1, 1)):
    return ModelSpec((OutcomeModelSpec("y", J, fixed[0]), OutcomeModelSpec("z", J, fixed[1])))


def parallel_person(ty, tz, wy=None, wz=None, J=6):
    z = OutcomeSeries("z", tuple(wz or range(1, len(tz) + 1)), tuple(tz), tuple(0.0 for _ in tz), J)
    return person(ty, wy, J=J, other=z)


def test_zero_growth_covariance_gives_diagonal_residuals():
    params = ParameterSet((
        OutcomeParams(1.0, 1.0, 0.0, 0.0, 0.0, GAMMAS, 2.0),
        OutcomeParams(1.0, 1.0, 0.0, 0.0, 0.0, GAMMAS, 3.0),
    ), CrossParams())
    m = implied_moments(parallel_spec(), params, parallel_person(range(6), range(6)))
    np.testing.assert_array_equal(m.covariance, np.diag([2.0] * 6 + [3.0] * 6))


def test_residual_cross_covariance_pairs_by_wave():
    params = ParameterSet((
        OutcomeParams(0, 0, 0, 0, 0, (1.0, 1.0), 1.0),
        OutcomeParams(0, 0, 0, 0, 0, (1.0, 1.0), 1.0),
    ), CrossParams(theta_eps=0.5))
    ind = parallel_person([0.0, 1.0, 2.0], [0.3, 2.1], wz=[1, 3], J=3)
    m = implied_moments(parallel_spec(J=3), params, ind)
    expected = np.eye(5)
    expected[0, 3] = expected[3, 0] = 0.5  # y wave 1 with z wave 1
    expected[2, 4] = expected[4, 2] = 0.5  # y wave 3 with z wave 3
    np.testing.assert_array_equal(m.covariance, expected)


def test_rescale_first_to_last():
    spec = ModelSpec((OutcomeModelSpec("y", 6, 1),))
    params = uni_params()
    out = rescale_parameters(params, spec, spec.with_fixed_intervals("last"))
    p = out.outcomes[0]
    np.testing.assert_allclose(p.gamma, (5, 4, 3, 2, 1), rtol=1e-15)
    assert p.mu_eta1 == pytest.approx(4.0 * 0.2, rel=1e-15)
    assert p.psi11 == pytest.approx(0.04, rel=1e-15)


def test_rescale_to_zero_rate_is_rejected():
    spec = ModelSpec((OutcomeModelSpec("y", 4, 1),))
    with pytest.raises(ValueError):
        rescale_parameters(uni_params(gammas=(1.0, 0.0, 0.5)), spec, spec.with_fixed_intervals(2))


def random_params(rng, J=6, fixed=(1, 1)):
    A = rng.normal(size=(4, 4))
    psi = A @ A.T + 0.1 * np.eye(4)
    th_y, th_z = rng.uniform(0.5, 2.0, size=2)
    outs = []
    for u, f in enumerate(fixed):
        g = rng.uniform(0.2, 1.5, size=J - 1)
        g[f - 1] = 1.0
        a = 2 * u
        outs.append(OutcomeParams(*rng.normal(size=2), psi[a, a], psi[a, a + 1], psi[a + 1, a + 1],
                                  tuple(g), (th_y, th_z)[u]))
    cross = CrossParams(psi[0, 2], psi[0, 3], psi[1, 2], psi[1, 3], 0.4 * np.sqrt(th_y * th_z))
    return ParameterSet(tuple(outs), cross)


def jittered_person(rng, J=6, wy=None, wz=None):
    t = np.arange(J) + rng.uniform(-0.25, 0.25, size=(2, J))
    wy = wy or list(range(1, J + 1))
    wz = wz or list(range(1, J + 1))
    return parallel_person(t[0][np.array(wy) - 1], t[1][np.array(wz) - 1], wy, wz, J)


@pytest.mark.parametrize("seed", range(10))
def test_implied_moments_invariant_under_rescaling(seed):
    rng = np.random.default_rng(seed)
    spec = parallel_spec()
    params = random_params(rng)
    target = spec.with_fixed_intervals(int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    ind = jittered_person(rng, wz=[1, 2, 4, 5, 6])
    a = implied_moments(spec, params, ind)
    b = implied_moments(target, rescale_parameters(params, spec, target), ind)
    np.testing.assert_allclose(b.mean, a.mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b.covariance, a.covariance, rtol=1e-12, atol=1e-12 * np.abs(a.covariance).max())
    back = rescale_parameters(rescale_parameters(params, spec, target), target, spec)
    for p, q in zip(back.outcomes, params.outcomes):
        np.testing.assert_allclose(
            [p.mu_eta1, p.psi01, p.psi11, *p.gamma], [q.mu_eta1, q.psi01, q.psi11, *q.gamma], rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sets(st.integers(2, 6), max_size=3), st.sets(st.integers(2, 6), max_size=3))
def test_row_deletion_consistency(seed, drop_y, drop_z):
    # integer, evenly spaced times so interpolated boundaries coincide with the deleted ones
    rng = np.random.default_rng(seed)
    spec = parallel_spec()
    params = random_params(rng)
    full = implied_moments(spec, params, parallel_person(range(6), range(6)))
    wy = [w for w in range(1, 7) if w not in drop_y]
    wz = [w for w in range(1, 7) if w not in drop_z]
    part = implied_moments(spec, params, parallel_person(
        [float(w - 1) for w in wy], [float(w - 1) for w in wz], wy, wz))
    keep = [full.entry_index.index(e) for e in part.entry_index]
    np.testing.assert_array_equal(part.mean, full.mean[keep])
    np.testing.assert_array_equal(part.covariance, full.covariance[np.ix_(keep, keep)])


@pytest.mark.parametrize("seed", range(20))
def test_implied_covariance_is_positive_definite(seed):
    rng = np.random.default_rng(100 + seed)
    m = implied_moments(parallel_spec(), random_params(rng), jittered_person(rng, wy=[1, 3, 4, 6]))
    np.testing.assert_array_equal(m.covariance, m.covariance.T)
    assert np.linalg.eigvalsh(m.covariance).min() > 0


def test_parameter_set_violations():
    bad = uni_params(psi=(1.0, 2.0, 1.0))
    assert bad.violations()
    assert not uni_params().violations()


def test_spec_validation_and_json_round_trip(tmp_path):
    with pytest.raises(ValueError):
        OutcomeModelSpec("y", 2)
    with pytest.raises(ValueError):
        OutcomeModelSpec("y", 5, fixed_interval=5)
    spec = parallel_spec(fixed=(2, 5))
    spec.save(tmp_path / "s.json")
    assert ModelSpec.load(tmp_path / "s.json") == spec
    assert spec.parallel and not ModelSpec((OutcomeModelSpec("y", 3),)).parallel


def test_interval_structure_ties_never_measured_waves():
    st_ = interval_structure(OutcomeModelSpec("z", 9, 8), {2, 4, 6, 7, 8, 9})
    assert st_.groups == ((2, 3), (4, 5), (6,), (7,), (8,))
    assert st_.expand([1.5, 1.2, 1.1, 0.9]) == (np.nan,) * 0 + st_.expand([1.5, 1.2, 1.1, 0.9])
    g = st_.expand([1.5, 1.2, 1.1, 0.9])
    assert np.isnan(g[0]) and g[1:] == (1.5, 1.5, 1.2, 1.2, 1.1, 0.9, 1.0)
    with pytest.raises(ValueError, match="not spanned"):
        interval_structure(OutcomeModelSpec("z", 9, 1), {2, 4, 6})
