import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evgrid.bounds import (
    SOCDistribution,
    StationLayout,
    Tail,
    expected_buyers_per_station,
    expected_sellers_per_station,
    lognormal_tail,
    optimal_station_count,
    supply_demand_upper_bounds,
    truncated_poisson_mean,
    write_bounds_csv,
)
from evgrid.ev_model import SOCState
from evgrid.optimizer import GridParams


class TestTail:
    def test_median(self):
        dist = SOCDistribution(math.log(7.0), 0.8)
        assert lognormal_tail(dist, 7.0, Tail.ABOVE_MAX) == pytest.approx(0.5)

    def test_tiny_threshold(self):
        assert lognormal_tail(SOCDistribution(0.0, 1.0), 1e-300, Tail.ABOVE_MAX) == pytest.approx(1.0)

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        dist = SOCDistribution(math.log(10), 0.5)
        x = rng.lognormal(dist.mu_log, dist.sigma_log, 1_000_000)
        assert lognormal_tail(dist, 15.0, Tail.ABOVE_MAX) == pytest.approx((x >= 15).mean(), abs=0.005)

    def test_literal_scale_coincides_at_unit_sigma(self):
        dist = SOCDistribution(1.0, 1.0)
        assert lognormal_tail(dist, 4.0, Tail.BELOW_MIN, literal_scale=True) == \
            pytest.approx(lognormal_tail(dist, 4.0, Tail.BELOW_MIN))

    @settings(max_examples=300)
    @given(st.floats(-5, 15), st.floats(0.01, 3), st.floats(1e-6, 1e7))
    def test_complementary(self, mu, sigma, t):
        dist = SOCDistribution(mu, sigma)
        total = lognormal_tail(dist, t, Tail.ABOVE_MAX) + lognormal_tail(dist, t, Tail.BELOW_MIN)
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            SOCDistribution(0.0, 0.0)
        with pytest.raises(ValueError):
            lognormal_tail(SOCDistribution(0.0, 1.0), 0.0, Tail.ABOVE_MAX)


class TestDistributionConstructors:
    def test_from_median(self):
        dist = SOCDistribution.from_median(5000.0, 0.1)
        assert dist.median == pytest.approx(5000.0)
        assert "median" in dist.source_note

    def test_tail_matching(self):
        dist = SOCDistribution.from_tail_probabilities(0.1, 0.3, 32e3, 8e3)
        assert lognormal_tail(dist, 32e3, Tail.ABOVE_MAX) == pytest.approx(0.1)
        assert lognormal_tail(dist, 8e3, Tail.BELOW_MIN) == pytest.approx(0.3)

    def test_fit(self):
        x = np.random.default_rng(1).lognormal(3.0, 0.7, 200_000)
        dist = SOCDistribution.fit(x)
        assert dist.mu_log == pytest.approx(3.0, abs=0.01)
        assert dist.sigma_log == pytest.approx(0.7, abs=0.01)


class TestUpperBounds:
    soc = SOCState(20e3, 8e3, 32e3, 0.2)
    dist = SOCDistribution.from_median(20e3, 0.6)

    def test_zero_probability(self):
        assert supply_demand_upper_bounds(500, 0.0, self.dist, self.soc) == (0.0, 0.0)

    def test_degenerate_tail(self):
        soc = SOCState(0.0, 0.0, 1e-200, 1.0)
        s_ub, _ = supply_demand_upper_bounds(300, 0.4, self.dist, soc)
        assert s_ub == pytest.approx(300 * 0.4 * self.dist.mean)

    def test_formula(self):
        s_ub, d_ub = supply_demand_upper_bounds(100, 0.5, self.dist, self.soc)
        p_max = lognormal_tail(self.dist, 32e3, Tail.ABOVE_MAX)
        p_min = lognormal_tail(self.dist, 8e3, Tail.BELOW_MIN)
        assert s_ub == pytest.approx(100 * 0.5 * p_max * 0.2 * self.dist.mean)
        assert d_ub == pytest.approx(100 * 0.5 * p_min * 12e3)

    def test_literal_demand_tail(self):
        _, d_ub = supply_demand_upper_bounds(100, 0.5, self.dist, self.soc, literal_demand_tail=True)
        p_max = lognormal_tail(self.dist, 32e3, Tail.ABOVE_MAX)
        assert d_ub == pytest.approx(100 * 0.5 * p_max * 12e3)

    @settings(max_examples=200)
    @given(st.integers(0, 5000), st.integers(0, 5000), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, n1, n2, p1, p2):
        lo_n, hi_n = sorted((n1, n2))
        lo_p, hi_p = sorted((p1, p2))
        a = supply_demand_upper_bounds(lo_n, lo_p, self.dist, self.soc)
        b = supply_demand_upper_bounds(hi_n, hi_p, self.dist, self.soc)
        assert b[0] >= a[0] and b[1] >= a[1]


class TestStations:
    def test_default_count(self):
        assert StationLayout(20_000.0, 6_000.0).n_stations == 3

    def test_no_sellers(self):
        assert expected_sellers_per_station(StationLayout(n_stations=4, lambda_supp=0.0)) == 0.0

    def test_untruncated_limit(self):
        layout = StationLayout(n_stations=40, lambda_supp=80.0)
        assert expected_sellers_per_station(layout) == pytest.approx(2.0, abs=1e-9)

    def test_extended_sum_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n_cs = int(rng.integers(20, 60))
            lam = float(rng.uniform(0, n_cs * n_cs / 10))
            rate = lam / n_cs
            pmf, extended = math.exp(-rate), 0.0
            for k in range(1, 200):
                pmf *= rate / k
                extended += k * pmf
            value = expected_sellers_per_station(StationLayout(n_stations=n_cs, lambda_supp=lam))
            assert value == pytest.approx(extended, abs=1e-9)

    def test_truncation_only_removes_mass(self):
        for n_cs in range(1, 30):
            for lam in (0.5, 5.0, 50.0, 500.0):
                layout = StationLayout(n_stations=n_cs, lambda_supp=lam)
                assert expected_sellers_per_station(layout) <= lam / n_cs + 1e-12

    def test_buyers(self):
        assert expected_buyers_per_station(StationLayout(n_stations=4, lambda_dem=0.0)) == 0.0
        assert expected_buyers_per_station(StationLayout(n_stations=4, lambda_dem=100.0)) == 25.0
        assert expected_buyers_per_station(StationLayout(n_stations=2, lambda_dem=100.0)) == 50.0

    def test_poisson_edge_cases(self):
        assert truncated_poisson_mean(3.0, 0) == 0.0
        with pytest.raises(ValueError):
            truncated_poisson_mean(-1.0, 3)
        with pytest.raises(ValueError):
            StationLayout(n_stations=0)


class TestOptimalStations:
    def test_all_negative(self):
        grid = GridParams(p_EV=0.0, beta=0.0)
        choice = optimal_station_count(20_000.0, grid, [5000.0] * 50, range(3, 30))
        assert choice.n_stations == 3 and choice.score == 0.0

    def test_interior_maximum_and_scan(self):
        grid = GridParams(p_EV=6.0)
        offers = list(np.random.default_rng(4).uniform(5e3, 60e3, 120))
        choice = optimal_station_count(20_000.0, grid, offers, range(1, 41), delta=5.0)
        assert 1 < choice.n_stations < 40
        best = max(range(1, 41), key=lambda n: (choice.scores[n], -n))
        assert best == choice.n_stations

    def test_bad_candidates(self):
        with pytest.raises(ValueError):
            optimal_station_count(20_000.0, GridParams(), [1.0], [])


def test_bounds_csv(tmp_path):
    rows = [{"class": "car", "S_UB_Wh": 1.0, "D_UB_Wh": 2.0, "sim_supply_Wh": 0.5, "sim_demand_Wh": 1.5}]
    path = write_bounds_csv(rows, tmp_path / "b.csv")
    got = list(csv.DictReader(path.open()))
    assert got[0]["class"] == "car" and float(got[0]["D_UB_Wh"]) == 2.0
