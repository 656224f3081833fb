import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evgrid.game import (
    Action,
    ActionProfile,
    GameConfig,
    Player,
    best_response,
    conspiracy_threshold,
    expected_conspiracy_gain,
    participation_mask,
    payoff,
    simulate_tournament,
)

C, N = Action.COOP, Action.NONCOOP


def config(utilities, rc=150.0, n_th=3, surplus=None):
    return GameConfig.from_utilities(utilities, rc, n_th, surplus)


class TestPayoff:
    def test_shared_charge_above_threshold(self):
        cfg = config([5, 6, 7, 8], n_th=3)
        for actions in ((C, C, C, N), (C, C, C, C)):
            profile = ActionProfile(actions)
            for i in range(4):
                assert payoff(cfg, profile, i) == pytest.approx(-150 / profile.n_coop)

    def test_below_threshold(self):
        cfg = config([5, 6, 7, 8], n_th=3)
        profile = ActionProfile((C, N, N, N))
        assert payoff(cfg, profile, 0) == 5
        assert payoff(cfg, profile, 1) == -150

    def test_free_road(self):
        cfg = config([5, -2, 7], rc=0.0, n_th=2)
        for actions in itertools.product((C, N), repeat=3):
            profile = ActionProfile(actions)
            for i in range(3):
                assert payoff(cfg, profile, i) in (5, -2, 7, 0)

    def test_index_and_consistency_errors(self):
        cfg = config([1.0, 2.0], surplus=[True, False])
        with pytest.raises(IndexError):
            payoff(cfg, ActionProfile((N, N)), 2)
        with pytest.raises(ValueError):
            payoff(cfg, ActionProfile((N, C)), 0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 7))
            cfg = config(rng.normal(0, 100, n), n_th=int(rng.integers(1, n + 1)))
            actions = [(C, N)[k] for k in rng.integers(0, 2, n)]
            base = payoff(cfg, ActionProfile(tuple(actions)), 0)
            others = actions[1:]
            rng.shuffle(others)
            assert payoff(cfg, ActionProfile(tuple([actions[0]] + others)), 0) == base

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GameConfig(-1.0, 2, (Player(1.0),))
        with pytest.raises(ValueError):
            GameConfig(1.0, 0, (Player(1.0),))
        with pytest.raises(ValueError):
            GameConfig(1.0, 1, ())


class TestBestResponse:
    def test_zero_utility_cooperates(self):
        cfg = config([0.0, 1.0, 1.0], n_th=2)
        for others in itertools.product((C, N), repeat=2):
            assert best_response(cfg, 0, others) is C

    def test_very_negative_utility_defects(self):
        cfg = config([-200.0, 1.0, 1.0], n_th=3)
        assert best_response(cfg, 0, (N, N)) is N

    def test_exhaustive_n5(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            cfg = config(list(rng.uniform(0, 300, 5)), rc=float(rng.uniform(0, 300)),
                         n_th=int(rng.integers(1, 6)))
            for i in range(5):
                for others in itertools.product((C, N), repeat=4):
                    full_c = list(others[:i]) + [C] + list(others[i:])
                    full_n = list(others[:i]) + [N] + list(others[i:])
                    assert payoff(cfg, ActionProfile(tuple(full_c)), i) >= \
                        payoff(cfg, ActionProfile(tuple(full_n)), i)
                    assert best_response(cfg, i, others) is C

    def test_requires_surplus(self):
        cfg = config([1.0, 1.0], surplus=[False, True])
        with pytest.raises(ValueError):
            best_response(cfg, 0, (N,))


class TestConspiracy:
    def test_single_cooperator(self):
        assert conspiracy_threshold(150, 1) == 0

    def test_arithmetic(self):
        assert conspiracy_threshold(150, 3) == pytest.approx(100)

    def test_monotone_and_bounded(self):
        values = [conspiracy_threshold(150, n) for n in range(1, 500)]
        assert all(b > a for a, b in zip(values, values[1:]))
        assert max(values) < 150

    def test_invalid(self):
        with pytest.raises(ValueError):
            conspiracy_threshold(150, 0)
        with pytest.raises(ValueError):
            expected_conspiracy_gain(1.5, 0.5, 3, 1, 1, 1)

    def test_no_surplus_probability(self):
        assert expected_conspiracy_gain(0.0, 0.7, 4, -50, 150, 3) == 0.0

    def test_boundary(self):
        assert expected_conspiracy_gain(0.6, 0.7, 4, 100.0, 150, 3) == pytest.approx(0.0, abs=1e-12)

    def test_above_threshold_never_gains(self):
        grid = np.linspace(0, 1, 100)
        for q in grid:
            for qp in grid:
                assert expected_conspiracy_gain(q, qp, 5, 120.0, 150, 3) <= 0

    @settings(max_examples=300)
    @given(st.floats(0.01, 1), st.floats(0.01, 1), st.integers(1, 20), st.floats(-500, 500),
           st.floats(0, 500), st.integers(1, 50), st.booleans())
    def test_sign_matches_threshold(self, q, qp, n_th, u, rc, n_coop, use_qp):
        gain = expected_conspiracy_gain(q, qp, n_th, u, rc, n_coop, use_qp)
        margin = u - conspiracy_threshold(rc, n_coop)
        if abs(margin) > 1e-9 * max(1.0, rc) and (qp if use_qp else q) ** n_th > 0:
            assert (gain <= 0) == (margin >= 0)

    def test_participation_mask(self):
        # three non-negative holders -> threshold 100
        mask = participation_mask([50.0, 120.0, 300.0, -10.0], 150.0)
        assert mask.tolist() == [False, True, True, False]
        assert not participation_mask([-1.0], 150.0).any()


class TestTournament:
    def test_all_positive_converges(self):
        cfg = config(list(np.linspace(0, 50, 8)), n_th=20)
        result = simulate_tournament(cfg, 10, rng_seed=3)
        assert result.n_coop[-1] == 8
        assert result.final_profile.actions == (C,) * 8

    def test_no_surplus(self):
        cfg = config([5.0, 6.0], surplus=[False, False])
        result = simulate_tournament(cfg, 5, rng_seed=0)
        assert np.all(result.n_coop == 0)

    def test_mixed_signs(self):
        utilities = [10.0, -200.0, 30.0, -300.0, 0.0]
        cfg = config(utilities, n_th=10)
        result = simulate_tournament(cfg, 6, rng_seed=4)
        expected = tuple(C if u >= 0 else N for u in utilities)
        assert result.final_profile.actions == expected

    def test_deterministic_and_csv(self, tmp_path):
        cfg = config(list(np.random.default_rng(2).normal(0, 200, 12)), n_th=4)
        a = simulate_tournament(cfg, 20, rng_seed=9)
        b = simulate_tournament(cfg, 20, rng_seed=9)
        assert np.array_equal(a.n_coop, b.n_coop)
        assert np.array_equal(a.cumulative_payoff, b.cumulative_payoff)
        rows = list(csv.DictReader(a.write_csv(tmp_path / "t.csv").open()))
        assert len(rows) == 20 and list(rows[0]) == ["round", "n_coop", "mean_payoff"]

    def test_rounds_validation(self):
        with pytest.raises(ValueError):
            simulate_tournament(config([1.0]), 0)
