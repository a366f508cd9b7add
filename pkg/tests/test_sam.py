import numpy as np
import pytest

import samo
from samo.core import ConfigError, LayeredParams, axpy, norm, scale, substream
from samo.problems import QuadraticProblem, ToyProblem, make_mlp_problem
from samo.sam import (
    SamConfig,
    global_normalize,
    joint_perturbation,
    layerwise_normalize,
    sam_perturbation,
    samo_gradients,
    spsa_estimate,
)


def lp(*layers):
    return LayeredParams([np.asarray(l, dtype=float) for l in layers])


def random_quadratic(k, dim, seed, structure=None):
    rng = np.random.default_rng(seed)
    mats, offs = [], []
    for _ in range(k):
        a = rng.standard_normal((dim, dim))
        mats.append(a @ a.T / dim + np.eye(dim))
        offs.append(rng.standard_normal(dim))
    return QuadraticProblem(mats, offsets=offs, structure=structure)


class TestSamConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(mode="sideways"),
        dict(rho=0.0),
        dict(rho=-1.0),
        dict(alpha=1.3),
        dict(alpha=-0.1),
        dict(mu=0.0),
        dict(estimator="autodiff"),
        dict(normalization="batch"),
        dict(spsa_samples=0),
    ])
    def test_invalid_fields_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            SamConfig(**kwargs)

    def test_defaults_valid(self):
        cfg = SamConfig()
        assert cfg.rho == 0.001 and cfg.alpha == 0.5 and cfg.mu == 0.01


class TestSamPerturbation:
    def test_unit_normalized(self):
        vec, degenerate = sam_perturbation(lp([3.0, 4.0]), rho=1.0)
        assert np.allclose(vec.to_flat(), [0.6, 0.8], atol=1e-15)
        assert not degenerate

    def test_zero_gradient_degenerates(self):
        vec, degenerate = sam_perturbation(lp([0.0, 0.0]), rho=2.0)
        assert norm(vec) == 0.0
        assert degenerate

    def test_scale_invariance(self):
        for c in (1e-3, 1.0, 1e3):
            vec, _ = sam_perturbation(lp([c * 3.0, c * 4.0]), rho=1.0)
            assert np.allclose(vec.to_flat(), [0.6, 0.8], atol=1e-12)

    def test_norm_equals_rho(self):
        rng = np.random.default_rng(0)
        for rho in (1e-3, 0.5, 7.0):
            vec, _ = sam_perturbation(
                LayeredParams([rng.standard_normal(4), rng.standard_normal(3)]), rho)
            assert abs(norm(vec) - rho) <= 1e-10 * rho

    def test_rho_must_be_positive(self):
        with pytest.raises(ConfigError):
            sam_perturbation(lp([1.0]), rho=0.0)


class TestSpsaEstimate:
    def test_affine_loss_is_exact(self):
        c = np.array([1.0, -2.0, 0.5, 3.0])
        prob = QuadraticProblem([np.zeros((4, 4))], offsets=[c])
        theta = prob.initial_params().replace_flat(np.array([0.1, 0.2, -0.3, 0.4]))
        est = spsa_estimate(prob, 0, theta, mu=0.01, rng=substream(7, "spsa", 0, 0))
        z = substream(7, "spsa", 0, 0).standard_normal(4)
        expected = (c @ z) * z
        assert np.allclose(est.to_flat(), expected, atol=1e-10)

    def test_constant_loss_gives_zero(self):
        prob = QuadraticProblem([np.zeros((3, 3))], constants=[5.0])
        theta = prob.initial_params()
        est = spsa_estimate(prob, 0, theta, mu=0.5, rng=substream(0, "spsa", 0, 0))
        assert norm(est) == 0.0

    def test_quadratic_at_symmetric_minimum(self):
        prob = QuadraticProblem([np.eye(5)])
        theta = prob.initial_params()  # the origin
        est = spsa_estimate(prob, 0, theta, mu=0.1, rng=substream(1, "spsa", 0, 0))
        assert norm(est) == 0.0

    def test_two_forwards_no_backwards(self):
        prob = QuadraticProblem([np.eye(3)])
        theta = prob.initial_params().replace_flat(np.ones(3))
        before = prob.counters.snapshot()
        spsa_estimate(prob, 0, theta, mu=0.01, rng=substream(0, "spsa", 0, 0))
        after = prob.counters.snapshot()
        assert (after[0] - before[0], after[1] - before[1]) == (2, 0)

    def test_unbiased_at_scale(self):
        rng_a = np.random.default_rng(11)
        a = rng_a.standard_normal((6, 6))
        prob = QuadraticProblem([a @ a.T + np.eye(6)])
        theta = prob.initial_params().replace_flat(rng_a.standard_normal(6))
        true_grad = prob.grad(0, theta).to_flat()
        total = np.zeros(6)
        for i in range(2000):
            total += spsa_estimate(prob, 0, theta, mu=0.01,
                                   rng=substream(3, "spsa", i, 0)).to_flat()
        mean = total / 2000
        cos = mean @ true_grad / (np.linalg.norm(mean) * np.linalg.norm(true_grad))
        assert cos >= 0.95

    def test_mu_must_be_positive(self):
        prob = QuadraticProblem([np.eye(2)])
        with pytest.raises(ConfigError):
            spsa_estimate(prob, 0, prob.initial_params(), mu=0.0,
                          rng=substream(0, "x", 0))


class TestLayerwiseNormalize:
    def test_scales_to_reference_ratio(self):
        est = lp([2.0, 0.0])
        ref = lp([0.0, 4.0])
        out = layerwise_normalize(est, ref)
        assert np.allclose(out.to_flat(), [4.0, 0.0], atol=1e-15)

    def test_identity_when_equal(self):
        x = lp([1.0, 2.0], [3.0])
        assert layerwise_normalize(x, x).allclose(x, rtol=1e-15)

    def test_two_layer_norms_match_reference(self):
        est = lp([1.0, 0.0], [10.0, 0.0])
        ref = lp([3.0, 4.0], [0.0, 5.0])
        out = layerwise_normalize(est, ref)
        assert abs(norm(out, layer=0) - 5.0) <= 1e-10
        assert abs(norm(out, layer=1) - 5.0) <= 1e-10
        assert np.allclose(out.layers[0], [5.0, 0.0])
        assert np.allclose(out.layers[1], [5.0, 0.0])

    def test_vanishing_layer_becomes_zeros(self):
        est = lp([0.0, 0.0], [1.0])
        ref = lp([3.0, 4.0], [2.0])
        out = layerwise_normalize(est, ref)
        assert np.array_equal(out.layers[0], [0.0, 0.0])
        assert np.allclose(out.layers[1], [2.0])

    def test_structure_mismatch(self):
        with pytest.raises(samo.StructureError):
            layerwise_normalize(lp([1.0]), lp([1.0], [2.0]))


class TestGlobalNormalize:
    def test_scalar_ratio(self):
        est = lp([2.0, 0.0])
        ref = lp([0.0, 4.0])
        out, degenerate = global_normalize(est, ref)
        assert np.allclose(out.to_flat(), [4.0, 0.0])
        assert not degenerate

    def test_identity(self):
        x = lp([1.0, 2.0])
        out, _ = global_normalize(x, x)
        assert out.allclose(x, rtol=1e-15)

    def test_zero_estimate_degenerates(self):
        out, degenerate = global_normalize(lp([0.0, 0.0]), lp([1.0, 1.0]))
        assert degenerate and norm(out) == 0.0

    def test_differs_from_layerwise_on_uneven_layers(self):
        est = lp([1.0, 0.0], [10.0, 0.0])
        ref = lp([3.0, 4.0], [0.0, 5.0])
        out, _ = global_normalize(est, ref)
        assert abs(norm(out) - norm(ref)) <= 1e-10
        assert abs(norm(out, layer=0) - norm(ref, layer=0)) > 0.1
        assert abs(norm(out, layer=1) - norm(ref, layer=1)) > 0.1


class TestJointPerturbation:
    def test_alpha_one_reduces_to_global(self):
        g0, gi = lp([3.0, 4.0]), lp([1.0, 7.0])
        joint = joint_perturbation(g0, gi, rho=0.7, alpha=1.0)
        pure = sam_perturbation(g0, rho=0.7)
        assert joint.vector.bit_equal(pure.vector)

    def test_alpha_zero_reduces_to_local(self):
        g0, gi = lp([3.0, 4.0]), lp([1.0, 7.0])
        joint = joint_perturbation(g0, gi, rho=0.7, alpha=0.0)
        pure = sam_perturbation(gi, rho=0.7)
        assert joint.vector.bit_equal(pure.vector)

    def test_balanced_blend(self):
        vec, _ = joint_perturbation(lp([1.0, 0.0]), lp([0.0, 1.0]), rho=1.0, alpha=0.5)
        assert np.allclose(vec.to_flat(), [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-12)

    def test_cancellation_degenerates(self):
        g = lp([1.0, 0.0])
        vec, degenerate = joint_perturbation(g, scale(-1.0, g), rho=1.0, alpha=0.5)
        assert degenerate and norm(vec) == 0.0

    def test_alpha_domain(self):
        with pytest.raises(ConfigError):
            joint_perturbation(lp([1.0]), lp([1.0]), rho=1.0, alpha=1.5)


class TestSamoGradients:
    def test_mode_off_rejected(self):
        prob = random_quadratic(2, 4, 0)
        with pytest.raises(ConfigError):
            samo_gradients(prob, prob.initial_params(), SamConfig(mode="off"))

    def test_global_mode_shares_one_perturbation(self):
        prob = random_quadratic(3, 5, 1)
        theta = prob.initial_params().replace_flat(np.arange(1.0, 6.0))
        res = samo_gradients(prob, theta, SamConfig(mode="global", rho=0.3))
        assert all(p is res.perturbations[0] for p in res.perturbations)
        g0 = prob.avg_grad(theta)
        expected_pert, _ = sam_perturbation(g0, 0.3)
        assert res.perturbations[0].bit_equal(expected_pert)
        theta_p = axpy(1.0, expected_pert, theta)
        for i in range(3):
            assert res.gradients.per_task[i].bit_equal(prob.grad(i, theta_p))
        assert res.gradients.average.bit_equal(g0)

    def test_small_rho_approaches_exact_gradients(self):
        prob = ToyProblem()
        theta = prob.initial_params()
        res = samo_gradients(prob, theta, SamConfig(mode="global", rho=1e-8))
        for i in range(2):
            exact = prob.grad(i, theta)
            diff = norm(axpy(-1.0, exact, res.gradients.per_task[i]))
            assert diff <= 1e-5 * max(norm(exact), 1.0)

    def test_joint_spsa_pass_budget(self):
        prob = random_quadratic(5, 6, 2)
        theta = prob.initial_params().replace_flat(np.ones(6))
        before = prob.counters.snapshot()
        samo_gradients(prob, theta, SamConfig(mode="joint"), seed=0, iteration=0)
        after = prob.counters.snapshot()
        assert after[0] - before[0] == 10  # 2K forwards
        assert after[1] - before[1] == 6   # K+1 backwards

    def test_global_mode_pass_budget(self):
        prob = random_quadratic(5, 6, 3)
        theta = prob.initial_params().replace_flat(np.ones(6))
        before = prob.counters.snapshot()
        samo_gradients(prob, theta, SamConfig(mode="global"))
        after = prob.counters.snapshot()
        assert after[0] - before[0] == 0
        assert after[1] - before[1] == 6

    def test_local_exact_pass_budget_and_average(self):
        prob = random_quadratic(4, 5, 4)
        theta = prob.initial_params().replace_flat(np.ones(5))
        before = prob.counters.snapshot()
        res = samo_gradients(prob, theta,
                             SamConfig(mode="local", estimator="exact"))
        after = prob.counters.snapshot()
        assert after[0] - before[0] == 0
        assert after[1] - before[1] == 8  # 2K, no dedicated average pass
        mean = samo.mean_params([prob.grad(i, theta) for i in range(4)])
        assert res.gradients.average.bit_equal(mean)

    def test_spsa_samples_multiply_forwards(self):
        prob = random_quadratic(3, 4, 5)
        theta = prob.initial_params().replace_flat(np.ones(4))
        before = prob.counters.snapshot()
        samo_gradients(prob, theta, SamConfig(mode="joint", spsa_samples=3))
        after = prob.counters.snapshot()
        assert after[0] - before[0] == 18  # 2 * K * samples

    def test_perturbation_norm_equals_rho_all_modes(self):
        rho = 0.37
        for seed in range(10):
            prob = random_quadratic(3, 6, seed, structure=(2, 2, 2))
            theta = prob.initial_params().replace_flat(
                np.random.default_rng(seed).standard_normal(6) + 2.0)
            for mode in ("global", "local", "joint"):
                for normalization in ("layerwise", "global", "none"):
                    res = samo_gradients(
                        prob, theta,
                        SamConfig(mode=mode, rho=rho, normalization=normalization),
                        seed=seed)
                    for pert, degenerate in zip(res.perturbations, res.degenerate):
                        if not degenerate:
                            assert abs(norm(pert) - rho) <= 1e-10

    def test_reduction_identity_global(self):
        for seed in range(5):
            prob_a = random_quadratic(3, 5, seed)
            prob_b = random_quadratic(3, 5, seed)
            theta = prob_a.initial_params().replace_flat(
                np.random.default_rng(seed + 50).standard_normal(5))
            res_joint = samo_gradients(prob_a, theta,
                                       SamConfig(mode="joint", alpha=1.0),
                                       seed=seed)
            res_global = samo_gradients(prob_b, theta, SamConfig(mode="global"),
                                        seed=seed)
            for a, b in zip(res_joint.gradients.per_task,
                            res_global.gradients.per_task):
                assert a.bit_equal(b)
            assert res_joint.gradients.average.bit_equal(res_global.gradients.average)

    def test_reduction_identity_local(self):
        for seed in range(5):
            prob_a = random_quadratic(3, 5, seed)
            prob_b = random_quadratic(3, 5, seed)
            theta = prob_a.initial_params().replace_flat(
                np.random.default_rng(seed + 80).standard_normal(5))
            res_joint = samo_gradients(
                prob_a, theta, SamConfig(mode="joint", alpha=0.0, estimator="exact"),
                seed=seed)
            res_local = samo_gradients(
                prob_b, theta, SamConfig(mode="local", estimator="exact"), seed=seed)
            for a, b in zip(res_joint.gradients.per_task,
                            res_local.gradients.per_task):
                assert a.bit_equal(b)
            assert res_joint.gradients.average.bit_equal(res_local.gradients.average)

    def test_parallel_matches_sequential(self):
        prob_a = make_mlp_problem(0, 3, (8, 8, 4), 32, 120.0)
        prob_b = make_mlp_problem(0, 3, (8, 8, 4), 32, 120.0)
        theta = prob_a.initial_params()
        cfg_seq = SamConfig(mode="joint", parallel=False)
        cfg_par = SamConfig(mode="joint", parallel=True)
        res_seq = samo_gradients(prob_a, theta, cfg_seq, seed=3, iteration=5)
        res_par = samo_gradients(prob_b, theta, cfg_par, seed=3, iteration=5)
        for a, b in zip(res_seq.gradients.per_task, res_par.gradients.per_task):
            assert a.bit_equal(b)
        assert prob_a.counters.snapshot() == prob_b.counters.snapshot()

    def test_perturb_layers_scope(self):
        prob = random_quadratic(2, 6, 9, structure=(3, 3))
        theta = prob.initial_params().replace_flat(np.ones(6))
        res = samo_gradients(prob, theta, SamConfig(mode="joint", rho=0.5),
                             seed=0, perturb_layers=[0])
        for pert in res.perturbations:
            assert norm(pert, layer=1) == 0.0
            assert abs(norm(pert, layer=0) - 0.5) <= 1e-10

    def test_iteration_changes_spsa_draws(self):
        prob_a = random_quadratic(2, 4, 10)
        prob_b = random_quadratic(2, 4, 10)
        theta = prob_a.initial_params().replace_flat(np.ones(4))
        res0 = samo_gradients(prob_a, theta, SamConfig(mode="joint"), seed=0,
                              iteration=0)
        res1 = samo_gradients(prob_b, theta, SamConfig(mode="joint"), seed=0,
                              iteration=1)
        assert not res0.gradients.per_task[0].bit_equal(res1.gradients.per_task[0])
