import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predsens.synthetic import (HiringData, UndefinedDerivative, diff_quotient, gen_hiring, gen_threshold,
                                lipschitz_sweep, pooled_diff_quotient, run_parity_cases, save_sweep, sweep_to_tsv,
                                unconstrained_slope)


@pytest.fixture(scope="module")
def hiring():
    return HiringData.from_records(gen_hiring(10000, seed=0))


@pytest.fixture(scope="module")
def small_hiring():
    return HiringData.from_records(gen_hiring(1500, seed=3))


# -- hiring data -----------------------------------------------------------------

def test_hair_gap_and_education_balance(hiring):
    women, men = hiring.x3 == 1, hiring.x3 == 0
    assert hiring.x2[women].mean() - hiring.x2[men].mean() == pytest.approx(8.0, abs=0.5)
    assert hiring.x1[women].mean() - hiring.x1[men].mean() == pytest.approx(0.0, abs=0.3)
    assert hiring.x2[men].var() == pytest.approx(10.0, rel=0.1)
    assert set(np.unique(hiring.x3)) == {0.0, 1.0}
    assert np.all((hiring.x1 >= 0) & (hiring.x1 <= 10))


def test_hiring_is_seeded():
    assert gen_hiring(50, seed=1) == gen_hiring(50, seed=1)
    assert gen_hiring(50, seed=1) != gen_hiring(50, seed=2)
    with pytest.raises(ValueError):
        gen_hiring(1)


# -- difference quotients ----------------------------------------------------------

def test_identical_features_give_one(rng):
    a = rng.normal(size=30)
    assert diff_quotient(a, a, 4) == pytest.approx(1.0, abs=1e-15)


def test_constant_numerator_gives_zero(rng):
    assert diff_quotient(np.full(30, 2.5), rng.normal(size=30), 7) == 0.0


def test_constant_denominator_is_undefined():
    with pytest.raises(UndefinedDerivative):
        diff_quotient([1.0, 2.0, 3.0], [4.0, 4.0, 4.0], 0)
    with pytest.raises(UndefinedDerivative):
        pooled_diff_quotient([1.0, 2.0, 3.0], [4.0, 4.0, 4.0])


def _brute_quotient(a, b, m):
    vals = [(a[m] - a[n]) / (b[m] - b[n]) for n in range(len(a)) if n != m and b[n] != b[m]]
    return sum(vals) / len(vals)


@pytest.mark.parametrize("m", [0, 5, 19])
def test_quotient_matches_pairwise_loop(m):
    rng = np.random.default_rng(m)
    a, b = rng.normal(size=20), rng.integers(0, 3, 20).astype(float)
    assert diff_quotient(a, b, m) == pytest.approx(_brute_quotient(a, b, m), rel=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
def test_quotient_is_linear_in_the_numerator(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=25), rng.normal(size=25)
    m = int(rng.integers(0, 25))
    assert diff_quotient(c * a, b, m) == pytest.approx(c * diff_quotient(a, b, m), rel=1e-9, abs=1e-9)
    assert pooled_diff_quotient(c * a, b) == pytest.approx(c * pooled_diff_quotient(a, b), rel=1e-9, abs=1e-9)


def test_pooled_quotient_on_binary_feature_is_the_group_gap(small_hiring):
    d = small_hiring
    gap = d.x2[d.x3 == 1].mean() - d.x2[d.x3 == 0].mean()
    assert pooled_diff_quotient(d.x2, d.x3) == pytest.approx(gap, rel=1e-10)
    # both weightings coincide when every nonzero denominator is +-1
    assert pooled_diff_quotient(d.x2, d.x3, weighting="squared") == pytest.approx(gap, rel=1e-10)


def test_squared_weighting_is_the_regression_slope(small_hiring):
    d = small_hiring
    slope = np.cov(d.x1, d.x2, bias=True)[0, 1] / d.x2.var()
    assert pooled_diff_quotient(d.x1, d.x2, weighting="squared") == pytest.approx(slope, rel=1e-9)


def test_pooled_quotient_is_the_pair_weighted_average_of_point_quotients(rng):
    a, b = rng.normal(size=40), rng.integers(0, 2, 40).astype(float)
    counts = np.array([np.sum(b != b[m]) for m in range(40)])
    point = np.array([diff_quotient(a, b, m) for m in range(40)])
    assert pooled_diff_quotient(a, b, chunk=7) == pytest.approx(float(point @ counts / counts.sum()), rel=1e-12)


def test_sampled_partners_are_seeded_and_close(small_hiring):
    d = small_hiring
    q = pooled_diff_quotient(d.x2, d.x3, max_pairs=300, seed=1)
    assert q == pooled_diff_quotient(d.x2, d.x3, max_pairs=300, seed=1)
    assert q == pytest.approx(pooled_diff_quotient(d.x2, d.x3), abs=0.2)


def test_gender_quotients_on_hiring_data(hiring):
    assert pooled_diff_quotient(hiring.x2, hiring.x3) == pytest.approx(8.0, abs=0.5)
    assert abs(pooled_diff_quotient(hiring.x1, hiring.x3)) < 0.3
    m = int(np.argmax(hiring.x3))
    assert diff_quotient(hiring.x2, hiring.x3, m) == pytest.approx(8.0, abs=1.0)


# -- parity cases ----------------------------------------------------------------

def _sigmoid_slope(z):
    s = 1 / (1 + np.exp(-z))
    return s * (1 - s)


def test_parity_cases_match_closed_form(small_hiring):
    d = small_hiring
    res = run_parity_cases(d)
    q23 = d.x2[d.x3 == 1].mean() - d.x2[d.x3 == 0].mean()
    q13 = d.x1[d.x3 == 1].mean() - d.x1[d.x3 == 0].mean()
    q12 = np.cov(d.x1, d.x2, bias=True)[0, 1] / d.x2.var()
    case1 = np.mean(_sigmoid_slope(d.x1 + d.x2 - 11) * abs(q23))
    case2 = np.mean(_sigmoid_slope(d.x1 - 5) * (abs(q12) + abs(q13)) / 2)
    assert res.p_case1 == pytest.approx(case1, rel=1e-9)
    assert res.p_case2 == pytest.approx(case2, rel=1e-9)
    assert sum(res.v_case1) == 1.0 and sum(res.v_case2) == 1.0
    assert all(isinstance(v, float) for v in res.v_case1 + res.v_case2)


def test_parity_is_deterministic(small_hiring):
    assert run_parity_cases(small_hiring) == run_parity_cases(small_hiring)


# -- threshold task and sweep ----------------------------------------------------

def test_threshold_data():
    data = gen_threshold(10000, seed=0)
    x = np.array([ex.features[0] for ex in data])
    y = np.array([ex.label for ex in data])
    assert np.all(y[x < 5] == 0) and np.all(y[x >= 5] == 1)
    assert y.mean() == pytest.approx(0.5, abs=0.05)
    assert gen_threshold(20, seed=3) == gen_threshold(20, seed=3)


@pytest.fixture(scope="module")
def sweep():
    data = gen_threshold(1000, seed=0)
    return data, lipschitz_sweep(np.linspace(0.01, 0.2, 20), data)


def test_sweep_tracks_the_bound_then_plateaus(sweep):
    data, points = sweep
    star = unconstrained_slope(data)
    for p in points:
        assert p.P <= p.L + 1e-9
        assert p.P == pytest.approx(min(p.L, star), abs=1e-9)
    ps = [p.P for p in points]
    assert all(b >= a - 1e-12 for a, b in zip(ps, ps[1:]))
    assert max(ps) - ps[-1] <= 1e-9


def test_sweep_rejects_non_positive_bounds():
    with pytest.raises(ValueError):
        lipschitz_sweep([0.1, 0.0], gen_threshold(10))


def test_sweep_table(tmp_path, sweep):
    _, points = sweep
    text = sweep_to_tsv(points[:2])
    rows = text.splitlines()
    assert rows[0] == "L\tP" and len(rows) == 3
    assert float(rows[1].split("\t")[1]) == points[0].P
    save_sweep(points, tmp_path / "s.tsv")
    assert (tmp_path / "s.tsv").read_text() == sweep_to_tsv(points)
