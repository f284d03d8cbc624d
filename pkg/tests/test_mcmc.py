import numpy as np
import pytest
from conftest import random_scene, toy_camera

from betasplat import mcmc
from betasplat import rasterizer as rz
from betasplat.kernel import gaussian_reference
from betasplat.primitive import logit
from betasplat.training import AdamState


def scene_with_opacities(rng, opacities):
    prims = random_scene(rng, len(opacities))
    prims.opacity_raw[:] = logit(np.asarray(opacities))
    return prims


class TestFindDead:
    def test_none_dead(self):
        prims = scene_with_opacities(np.random.default_rng(0), [0.5] * 6)
        assert mcmc.find_dead(prims, 0.005).size == 0

    def test_single_dead(self):
        prims = scene_with_opacities(np.random.default_rng(1), [0.5, 0.001, 0.5])
        np.testing.assert_array_equal(mcmc.find_dead(prims), [1])

    def test_threshold_near_one_kills_all(self):
        prims = scene_with_opacities(np.random.default_rng(2), [0.5, 0.9, 0.3])
        assert mcmc.find_dead(prims, 1.0 - 1e-9).size == 3

    def test_threshold_domain(self):
        prims = scene_with_opacities(np.random.default_rng(3), [0.5])
        with pytest.raises(ValueError):
            mcmc.find_dead(prims, 0.0)


class TestPlanRelocation:
    def test_single_live_target(self):
        rng = np.random.default_rng(4)
        prims = scene_with_opacities(rng, [0.5, 1e-4, 1e-4, 1e-4])
        plan = mcmc.plan_relocation(prims, mcmc.find_dead(prims), rng)
        np.testing.assert_array_equal(plan.targets, [0, 0, 0])
        assert plan.multiplicity == {0: 4}

    def test_no_dead_empty_plan(self):
        rng = np.random.default_rng(5)
        prims = scene_with_opacities(rng, [0.5, 0.5])
        plan = mcmc.plan_relocation(prims, np.zeros(0, dtype=np.int64), rng)
        assert plan.dead.size == 0 and plan.multiplicity == {}

    def test_sampling_frequencies_match_opacities(self):
        rng = np.random.default_rng(6)
        prims = scene_with_opacities(rng, [0.2, 0.01, 1e-4])
        draws = 100_000
        hits = 0
        for _ in range(20):
            dead = np.full(draws // 20, 2, dtype=np.int64)
            plan = mcmc.plan_relocation(prims, dead, rng)
            hits += int(np.sum(plan.targets == 1))
        p = 0.01 / 0.21
        sigma = np.sqrt(draws * p * (1 - p))
        assert abs(hits - draws * p) <= 3 * sigma

    def test_all_dead_raises(self):
        rng = np.random.default_rng(7)
        prims = scene_with_opacities(rng, [1e-4, 1e-4])
        with pytest.raises(mcmc.AllDeadError):
            mcmc.plan_relocation(prims, np.array([0, 1]), rng)

    def test_deterministic_under_seed(self):
        prims = scene_with_opacities(np.random.default_rng(8), [0.3, 0.2, 1e-4, 1e-4])
        dead = np.array([2, 3])
        p1 = mcmc.plan_relocation(prims, dead, np.random.default_rng(42))
        p2 = mcmc.plan_relocation(prims, dead, np.random.default_rng(42))
        np.testing.assert_array_equal(p1.targets, p2.targets)


class TestNewOpacity:
    def test_identity_for_single_copy(self):
        assert mcmc.new_opacity(0.37, 1) == pytest.approx(0.37, abs=1e-15)

    def test_two_way_split_closed_form(self):
        assert mcmc.new_opacity(0.1, 2) == pytest.approx(1 - np.sqrt(0.9), abs=1e-12)
        assert mcmc.new_opacity(0.1, 2) == pytest.approx(0.0513167, abs=1e-7)

    def test_small_opacity_taylor_bound(self):
        for o in np.linspace(0.005, 0.1, 40):
            for n in [2, 3, 4, 8]:
                assert abs(mcmc.new_opacity(o, n) - o / n) <= o**2


class TestApplyRelocation:
    def test_two_way_example(self):
        rng = np.random.default_rng(9)
        prims = scene_with_opacities(rng, [0.1, 1e-4])
        plan = mcmc.plan_relocation(prims, np.array([1]), rng)
        state = AdamState.zeros_for(prims)
        state.exp_avg["positions"] += 1.0
        mcmc.apply_relocation(prims, plan, state)
        expected = 1 - np.sqrt(0.9)
        np.testing.assert_allclose(prims.opacities, [expected, expected], rtol=1e-9)
        np.testing.assert_array_equal(prims.positions[1], prims.positions[0])
        np.testing.assert_array_equal(state.exp_avg["positions"], 0.0)

    def test_empty_plan_is_identity(self):
        rng = np.random.default_rng(10)
        prims = scene_with_opacities(rng, [0.4, 0.5])
        before = prims.copy()
        plan = mcmc.plan_relocation(prims, np.zeros(0, dtype=np.int64), rng)
        mcmc.apply_relocation(prims, plan)
        np.testing.assert_array_equal(prims.opacity_raw, before.opacity_raw)
        np.testing.assert_array_equal(prims.positions, before.positions)

    def test_opacity_never_increases(self):
        rng = np.random.default_rng(11)
        opac = np.concatenate([np.full(10, 0.3), np.full(5, 1e-4)])
        prims = scene_with_opacities(rng, opac)
        pre_max = prims.opacities.max()
        plan = mcmc.plan_relocation(prims, mcmc.find_dead(prims), rng)
        mcmc.apply_relocation(prims, plan)
        assert prims.opacities.max() <= pre_max + 1e-12

    def test_count_conserved(self):
        rng = np.random.default_rng(12)
        prims = scene_with_opacities(rng, [0.3, 0.4, 1e-4, 1e-4, 1e-4])
        plan = mcmc.plan_relocation(prims, mcmc.find_dead(prims), rng)
        mcmc.apply_relocation(prims, plan)
        assert len(prims) == 5

    def test_render_level_preservation(self):
        # splitting one small-opacity primitive in two changes its footprint
        # by at most O(o^2) per pixel (evaluated where the kernel clears the
        # 1/255 sample cutoff for both opacities, the proof's regime)
        from betasplat.primitive import project_arrays

        rng = np.random.default_rng(13)
        prims = random_scene(rng, 2, spread=0.0, scale_range=(0.3, 0.4),
                             lobe_color_scale=0.0)
        o = 0.05
        prims.opacity_raw[0] = logit(o)
        prims.opacity_raw[1] = logit(1e-4)
        prims.positions[1] = [5.0, 5.0, 0.0]  # dead, far away
        cam = toy_camera(width=48, height=48)
        before = rz.render_tiled(prims, cam, np.zeros(3))
        plan = mcmc.plan_relocation(prims, np.array([1]), rng)
        mcmc.apply_relocation(prims, plan)
        after = rz.render_tiled(prims, cam, np.zeros(3))

        batch = project_arrays(prims.positions, prims.rotations, prims.scales, cam)
        k = int(np.nonzero(batch.indices == 0)[0][0])
        ys, xs = np.mgrid[0:48, 0:48]
        d = np.stack([xs, ys], axis=-1).astype(float) - batch.means2d[k]
        a, b, c = batch.conics[k]
        r2 = a * d[..., 0] ** 2 + 2 * b * d[..., 0] * d[..., 1] + c * d[..., 1] ** 2
        core = (np.minimum(r2, 1.0) < 0.5)  # kernel well above the cutoff
        assert core.sum() > 20
        diff = np.abs(after.color - before.color)[core]
        assert diff.max() <= 2.5 * o**2


class TestGrow:
    def grown(self, rng, n, budget):
        prims = scene_with_opacities(rng, np.full(n, 0.3))
        return mcmc.grow(prims, budget, rng)

    def test_noop_at_budget(self):
        rng = np.random.default_rng(14)
        prims = scene_with_opacities(rng, np.full(10, 0.3))
        grown = mcmc.grow(prims, 10, rng)
        assert len(grown) == 10

    def test_five_percent_rule(self):
        assert len(self.grown(np.random.default_rng(15), 100, 1000)) == 105

    def test_budget_clamps_growth(self):
        assert len(self.grown(np.random.default_rng(16), 100, 102)) == 102

    def test_budget_below_count_rejected(self):
        rng = np.random.default_rng(17)
        prims = scene_with_opacities(rng, np.full(10, 0.3))
        with pytest.raises(ValueError):
            mcmc.grow(prims, 5, rng)

    def test_never_exceeds_budget_over_schedule(self):
        rng = np.random.default_rng(18)
        prims = scene_with_opacities(rng, np.full(50, 0.3))
        state = AdamState.zeros_for(prims)
        for _ in range(30):
            prims = mcmc.grow(prims, 120, rng, state)
            assert len(prims) <= 120
        assert len(prims) == 120
        assert state.exp_avg["positions"].shape[0] == 120

    def test_source_opacity_adjusted(self):
        rng = np.random.default_rng(19)
        prims = scene_with_opacities(rng, np.full(40, 0.3))
        grown = mcmc.grow(prims, 100, rng)
        # every added primitive pairs with its source at the adjusted opacity
        assert len(grown) == 42
        assert grown.opacities.max() <= 0.3 + 1e-12
        assert grown.opacities.min() >= mcmc.new_opacity(0.3, 3) - 1e-12


class TestPreservationError:
    def test_zero_for_single_copy(self):
        assert mcmc.preservation_error(0.0, 0.3, 1) == 0.0

    def test_zero_at_kernel_peak(self):
        for b in [-2.0, 0.0, 2.0]:
            for n in [2, 4, 8]:
                o = 0.1
                o_new = mcmc.new_opacity(o, n)
                peak = abs(o * 1.0 - (1 - (1 - o_new * 1.0) ** n))
                assert peak <= 1e-12

    def test_reference_case(self):
        err = mcmc.preservation_error(0.0, 0.1, 2)
        assert err == pytest.approx(6.6e-4, abs=5e-5)

    def test_quadratic_envelope(self):
        for b in [-2.0, 0.0, 2.0]:
            for n in [2, 4, 8]:
                for o in [0.02, 0.05, 0.1]:
                    assert mcmc.preservation_error(b, o, n) <= 2 * o**2

    def test_monotone_vanishing_in_opacity(self):
        for b in [-2.0, 0.0, 2.0]:
            errs = [mcmc.preservation_error(b, o, 4) for o in [0.2, 0.1, 0.05, 0.01]]
            assert all(a > b_ for a, b_ in zip(errs, errs[1:]))

    def test_kernel_agnostic_gaussian_reference(self):
        for o in [0.02, 0.05, 0.1]:
            for n in [2, 4, 8]:
                err = mcmc.preservation_error(
                    None, o, n, kernel=gaussian_reference
                )
                assert err <= 2 * o**2
