import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import samo
from samo.core import (
    GradientSet,
    LayeredParams,
    NumericError,
    StructureError,
    axpy,
    check_gradients,
    mean_params,
    norm,
    restrict,
    scale,
    substream,
)
from samo.problems import QuadraticProblem, ToyProblem


def lp(*layers):
    return LayeredParams([np.asarray(l, dtype=float) for l in layers])


structures = st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4)


def random_params(structure, seed):
    rng = np.random.default_rng(seed)
    return LayeredParams([rng.standard_normal(s) for s in structure])


class TestLayeredParams:
    def test_requires_positive_dimension(self):
        with pytest.raises(StructureError):
            LayeredParams([])

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            lp([1.0, np.inf])
        with pytest.raises(NumericError):
            lp([0.0], [np.nan])

    def test_layers_are_read_only(self):
        x = lp([1.0, 2.0])
        with pytest.raises(ValueError):
            x.layers[0][0] = 3.0

    def test_flat_round_trip(self):
        x = lp([1.0, 2.0], [3.0])
        assert np.array_equal(x.to_flat(), [1.0, 2.0, 3.0])
        y = x.replace_flat(np.array([4.0, 5.0, 6.0]))
        assert y.structure == x.structure
        assert np.array_equal(y.layers[1], [6.0])

    def test_replace_flat_size_mismatch(self):
        with pytest.raises(StructureError):
            lp([1.0, 2.0]).replace_flat(np.zeros(3))

    def test_layer_index_out_of_range(self):
        with pytest.raises(StructureError):
            lp([1.0]).layer(1)


class TestAxpy:
    def test_zero_coefficient_is_identity(self):
        y = lp([1.5, -2.0], [0.25])
        out = axpy(0.0, lp([9.0, 9.0], [9.0]), y)
        assert out.bit_equal(y)

    def test_componentwise_add(self):
        out = axpy(1.0, lp([1.0, 2.0]), lp([3.0, 4.0]))
        assert np.array_equal(out.layers[0], [4.0, 6.0])

    def test_self_cancellation(self):
        x = lp([1.0, -2.0], [3.0])
        out = axpy(-1.0, x, x)
        assert norm(out) == 0.0

    def test_structure_mismatch(self):
        with pytest.raises(StructureError):
            axpy(1.0, lp([1.0]), lp([1.0, 2.0]))


class TestNorm:
    def test_three_four_five(self):
        assert norm(lp([3.0, 4.0])) == 5.0

    def test_layer_scope(self):
        x = lp([1.0, 0.0], [0.0, 1.0])
        assert norm(x, layer=0) == 1.0
        assert norm(x, layer=1) == 1.0

    def test_zero_vector(self):
        assert norm(lp([0.0, 0.0])) == 0.0

    def test_invalid_layer(self):
        with pytest.raises(StructureError):
            norm(lp([1.0]), layer=2)


@settings(max_examples=50, deadline=None)
@given(structure=structures, a=st.floats(-10, 10), seed=st.integers(0, 2**31))
def test_arithmetic_preserves_structure(structure, a, seed):
    x = random_params(structure, seed)
    y = random_params(structure, seed + 1)
    assert axpy(a, x, y).structure == x.structure
    assert scale(a, x).structure == x.structure
    assert mean_params([x, y]).structure == x.structure
    assert restrict(x, [0]).structure == x.structure


@settings(max_examples=30, deadline=None)
@given(structure=structures, a=st.floats(-10, 10), seed=st.integers(0, 2**31))
def test_axpy_on_zeros_matches_scale(structure, a, seed):
    x = random_params(structure, seed)
    assert axpy(a, x, x.zeros_like()).bit_equal(scale(a, x))


def test_restrict_zeroes_other_layers():
    x = lp([1.0, 2.0], [3.0], [4.0])
    out = restrict(x, [1])
    assert np.array_equal(out.to_flat(), [0.0, 0.0, 3.0, 0.0])
    assert restrict(x, None) is x
    with pytest.raises(StructureError):
        restrict(x, [3])


class TestGradientSet:
    def test_structure_must_match(self):
        with pytest.raises(StructureError):
            GradientSet(per_task=(lp([1.0]),), average=lp([1.0, 2.0]))

    def test_from_exact_average_is_mean(self):
        rng = np.random.default_rng(0)
        grads = [LayeredParams([rng.standard_normal(3), rng.standard_normal(2)])
                 for _ in range(4)]
        gs = GradientSet.from_exact(grads)
        stacked = np.mean([g.to_flat() for g in grads], axis=0)
        assert np.allclose(gs.average.to_flat(), stacked, rtol=1e-12)


class TestCounters:
    def test_each_call_counts_once(self):
        prob = ToyProblem()
        theta = prob.initial_params()
        assert prob.counters.snapshot() == (0, 0)
        prob.loss(0, theta)
        prob.loss(1, theta)
        assert prob.counters.snapshot() == (2, 0)
        prob.losses(theta)
        assert prob.counters.snapshot() == (3, 0)
        prob.grad(0, theta)
        assert prob.counters.snapshot() == (3, 1)
        prob.avg_grad(theta)
        assert prob.counters.snapshot() == (3, 2)

    def test_concurrent_increments(self):
        prob = ToyProblem()
        theta = prob.initial_params()

        def worker():
            for _ in range(100):
                prob.loss(0, theta)

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert prob.counters.forwards == 400

    def test_task_index_checked(self):
        prob = ToyProblem()
        with pytest.raises(StructureError):
            prob.loss(2, prob.initial_params())


class TestAvgGradMatchesMean:
    def test_toy(self):
        prob = ToyProblem()
        theta = LayeredParams([np.array([-2.5, 1.3])])
        mean = mean_params([prob.grad(i, theta) for i in range(prob.K)])
        avg = prob.avg_grad(theta)
        diff = norm(axpy(-1.0, mean, avg))
        assert diff <= 1e-12 * max(norm(mean), 1.0)

    def test_random_quadratics(self):
        rng = np.random.default_rng(7)
        mats = [(lambda m: m + m.T)(rng.standard_normal((6, 6))) for _ in range(3)]
        offs = [rng.standard_normal(6) for _ in range(3)]
        prob = QuadraticProblem(mats, offsets=offs)
        theta = prob.initial_params().replace_flat(rng.standard_normal(6))
        mean = mean_params([prob.grad(i, theta) for i in range(3)])
        avg = prob.avg_grad(theta)
        assert norm(axpy(-1.0, mean, avg)) <= 1e-12 * norm(mean)


class TestCheckGradients:
    def test_isotropic_quadratic(self):
        prob = QuadraticProblem([np.eye(4)])
        theta = prob.initial_params().replace_flat(np.array([0.3, -1.2, 0.7, 2.0]))
        report = check_gradients(prob, theta, n_dirs=10, h=1e-5)
        assert report.worst <= 1e-6

    def test_affine_is_exact(self):
        c = np.array([1.0, -2.0, 0.5])
        prob = QuadraticProblem([np.zeros((3, 3))], offsets=[c])
        theta = prob.initial_params().replace_flat(np.array([0.1, 0.2, 0.3]))
        report = check_gradients(prob, theta, n_dirs=10, h=1e-5)
        assert report.worst <= 1e-10

    def test_toy_at_start(self):
        prob = ToyProblem()
        theta = LayeredParams([np.array([-6.0, 1.0])])
        report = check_gradients(prob, theta, n_dirs=20, h=1e-5)
        assert report.worst <= 1e-5

    def test_invalid_step(self):
        prob = ToyProblem()
        with pytest.raises(samo.ConfigError):
            check_gradients(prob, prob.initial_params(), h=0.0)


class TestSubstream:
    def test_deterministic(self):
        a = substream(42, "spsa", 3, 1).standard_normal(5)
        b = substream(42, "spsa", 3, 1).standard_normal(5)
        assert np.array_equal(a, b)

    def test_purpose_and_index_separate_streams(self):
        base = substream(42, "spsa", 0, 0).standard_normal(5)
        assert not np.array_equal(base, substream(42, "spsa", 0, 1).standard_normal(5))
        assert not np.array_equal(base, substream(42, "init", 0, 0).standard_normal(5))
        assert not np.array_equal(base, substream(43, "spsa", 0, 0).standard_normal(5))
