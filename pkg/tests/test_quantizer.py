import numpy as np
import pytest

from qatkit.quantizer import (
    DegenerateGroupError,
    QuantizerSpec,
    StepSolverConfig,
    WeightGroup,
    exhaustive_search_step,
    optimize_step,
    points_for_bits,
    quant_mse,
    quantize,
)

from oracles import grid_search_mse, grid_search_mse_slow, quant_mse_direct, scalar_quantize


class TestPointsForBits:
    @pytest.mark.parametrize("bits,expected", [(2, 3), (3, 7), (4, 15), (6, 63)])
    def test_table_values(self, bits, expected):
        assert points_for_bits(bits) == expected

    def test_rejects_one_bit(self):
        with pytest.raises(ValueError):
            points_for_bits(1)

    def test_rejects_non_integer(self):
        with pytest.raises(ValueError):
            points_for_bits(2.5)


class TestQuantize:
    def test_zero_maps_to_zero(self):
        spec = QuantizerSpec.from_bits(4, 0.37)
        assert quantize(0.0, spec) == 0.0

    def test_hand_values_m3(self):
        spec = QuantizerSpec.from_bits(2, 1.0)
        out = quantize(np.array([0.4, 0.6, -2.3]), spec)
        np.testing.assert_array_equal(out, [0.0, 1.0, -1.0])

    def test_clipping_m7(self):
        spec = QuantizerSpec.from_bits(3, 0.5)
        assert quantize(2.0, spec) == 1.5

    def test_matches_scalar_oracle_exactly(self):
        rng = np.random.default_rng(7)
        w = rng.normal(0, 1, size=1000)
        for bits in (2, 3, 4, 6):
            spec = QuantizerSpec.from_bits(bits, 0.173)
            got = quantize(w, spec)
            want = np.array([scalar_quantize(v, spec.step, spec.points) for v in w])
            np.testing.assert_array_equal(got, want)

    def test_rejects_non_finite(self):
        spec = QuantizerSpec.from_bits(2, 1.0)
        with pytest.raises(ValueError):
            quantize(np.array([1.0, np.nan]), spec)

    def test_scalar_in_scalar_out(self):
        spec = QuantizerSpec.from_bits(2, 1.0)
        assert isinstance(quantize(0.7, spec), float)


class TestQuantizerSpec:
    def test_points_must_match_bits(self):
        with pytest.raises(ValueError):
            QuantizerSpec(bits=2, points=4, step=1.0)

    @pytest.mark.parametrize("step", [0.0, -1.0, float("inf"), float("nan")])
    def test_step_positive_finite(self, step):
        with pytest.raises(ValueError):
            QuantizerSpec(bits=2, points=3, step=step)


class TestQuantMse:
    def test_on_grid_is_zero(self):
        g = WeightGroup(np.array([1.0]), "g")
        assert quant_mse(g, QuantizerSpec.from_bits(2, 1.0)) == 0.0

    def test_half_weight(self):
        g = WeightGroup(np.array([0.5]), "g")
        # 0.5 rounds up to 1.0; (1/2)(0.5)^2
        assert quant_mse(g, QuantizerSpec.from_bits(2, 1.0)) == pytest.approx(0.125)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(11)
        vals = rng.normal(0, 2, size=500)
        g = WeightGroup(vals, "g")
        for bits, step in [(2, 0.8), (3, 0.21), (6, 0.05)]:
            spec = QuantizerSpec.from_bits(bits, step)
            assert quant_mse(g, spec) == pytest.approx(
                quant_mse_direct(vals, step, spec.points), abs=1e-12
            )


class TestOptimizeStep:
    def test_constant_group_m3(self):
        g = WeightGroup(np.full(17, 0.42), "g")
        step, mse = optimize_step(g, 3)
        assert step == pytest.approx(0.42, rel=1e-10)
        assert mse == pytest.approx(0.0, abs=1e-20)

    def test_symmetric_pair(self):
        step, mse = optimize_step(WeightGroup(np.array([-1.0, 1.0]), "g"), 3)
        assert step == pytest.approx(1.0, rel=1e-10)
        assert mse == pytest.approx(0.0, abs=1e-20)

    def test_near_global_minimum_vs_grid(self):
        rng = np.random.default_rng(3)
        w = rng.normal(0, 1, size=1000)
        step, mse = optimize_step(WeightGroup(w, "g"), 3)
        wmax = np.abs(w).max()
        candidates = np.linspace(2 * wmax / 1e5, 2 * wmax, 100000)
        _, grid_mse = grid_search_mse(w, 3, candidates)
        assert mse <= (1 + 1e-6) * grid_mse

    def test_all_zero_raises(self):
        with pytest.raises(DegenerateGroupError):
            optimize_step(WeightGroup(np.zeros(5), "g"), 3)

    def test_even_or_small_m_rejected(self):
        g = WeightGroup(np.array([1.0, 2.0]), "g")
        with pytest.raises(ValueError):
            optimize_step(g, 4)
        with pytest.raises(ValueError):
            optimize_step(g, 1)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        w = rng.normal(0, 1, size=200)
        cfg = StepSolverConfig()
        assert optimize_step(WeightGroup(w, "g"), 7, cfg) == optimize_step(
            WeightGroup(w, "g"), 7, cfg
        )

    def test_stationarity_fixed_point(self):
        # at the returned step, step == sum(n*w)/sum(n^2) for its own levels
        rng = np.random.default_rng(9)
        for m in (3, 7, 15, 63):
            w = rng.laplace(0, 1, size=500)
            step, _ = optimize_step(WeightGroup(w, "g"), m)
            k = (m - 1) // 2
            n = np.sign(w) * np.minimum(np.floor(np.abs(w) / step + 0.5), k)
            assert step == pytest.approx(np.dot(n, w) / np.dot(n, n), rel=1e-6)

    def test_precision_monotonicity(self):
        rng = np.random.default_rng(13)
        w = rng.normal(0, 1, size=800)
        g = WeightGroup(w, "g")
        mses = [optimize_step(g, m)[1] for m in (3, 7, 15, 63)]
        for lo, hi in zip(mses[1:], mses[:-1]):
            assert lo <= hi * (1 + 1e-9)


class TestGridOracleSelfCheck:
    def test_fast_oracle_matches_slow(self):
        rng = np.random.default_rng(21)
        w = rng.normal(0, 1, size=60)
        candidates = np.linspace(0.01, 2.5, 400)
        for m in (3, 7, 15):
            fast = grid_search_mse(w, m, candidates)
            slow = grid_search_mse_slow(w, m, candidates)
            assert fast[0] == pytest.approx(slow[0])
            assert fast[1] == pytest.approx(slow[1], abs=1e-9)


class TestExhaustiveSearch:
    def test_finds_candidate_nearest_truth(self):
        w = np.array([-1.0, 1.0, 1.0, -1.0])
        g = WeightGroup(w, "g")

        def score(step):
            return quant_mse(g, QuantizerSpec.from_bits(2, step))

        best = exhaustive_search_step(g, 3, 1.0, score, 33)
        candidates = np.geomspace(0.5, 2.0, 33)
        assert best == pytest.approx(candidates[np.argmin(np.abs(candidates - 1.0))])

    def test_constant_score_ties_to_smallest(self):
        g = WeightGroup(np.array([1.0]), "g")
        best = exhaustive_search_step(g, 3, 0.8, lambda s: 1.0, 9)
        assert best == pytest.approx(0.4)

    def test_agrees_with_restricted_grid(self):
        rng = np.random.default_rng(31)
        w = rng.normal(0, 1, size=300)
        g = WeightGroup(w, "g")
        init = 0.9

        def score(step):
            return quant_mse(g, QuantizerSpec.from_bits(3, step))

        best = exhaustive_search_step(g, 7, init, score, 64)
        candidates = np.geomspace(init / 2, 2 * init, 64)
        grid_best, _ = grid_search_mse(w, 7, candidates)
        spacing = candidates[1] / candidates[0]
        assert grid_best / spacing <= best <= grid_best * spacing

    def test_input_validation(self):
        g = WeightGroup(np.array([1.0]), "g")
        with pytest.raises(ValueError):
            exhaustive_search_step(g, 3, -1.0, lambda s: 0.0, 8)
        with pytest.raises(ValueError):
            exhaustive_search_step(g, 3, 1.0, lambda s: 0.0, 1)


class TestSolverConfigValidation:
    def test_bad_configs(self):
        with pytest.raises(ValueError):
            StepSolverConfig(max_iterations=0)
        with pytest.raises(ValueError):
            StepSolverConfig(convergence_tol=0)
        with pytest.raises(ValueError):
            StepSolverConfig(multistart_factors=())
        with pytest.raises(ValueError):
            StepSolverConfig(multistart_factors=(1.0, -0.5))

    def test_group_validation(self):
        with pytest.raises(ValueError):
            WeightGroup(np.array([]), "g")
        with pytest.raises(ValueError):
            WeightGroup(np.array([1.0, np.inf]), "g")
