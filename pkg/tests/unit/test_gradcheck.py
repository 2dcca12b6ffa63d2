"""
Unit tests for gradcheck module
Tests the finite-difference checker and runs the gradient suite
"""

import inspect
import pytest
import numpy as np
import os

# Import the modules to test
import sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from gradcheck import CASES, MAX_DIM, TOLERANCE, GradcheckResult, check_case, gradcheck, relative_error, run_suite
from numerics import TensorNode, make_node, mul, sum_


@pytest.mark.unit
class TestChecker:
    """Test the checker itself"""

    def test_relative_error(self):
        """Test identical vectors and opposite vectors"""
        assert relative_error(np.ones(3), np.ones(3)) == 0.0
        assert relative_error(np.ones(3), -np.ones(3)) == pytest.approx(1.0)
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_result_passed(self):
        """Test the pass criterion"""
        assert GradcheckResult("x", 0, 1e-6).passed
        assert not GradcheckResult("x", 0, 1e-3).passed
        assert not GradcheckResult("x", 0, float("nan")).passed
        assert GradcheckResult("x", 0, 1e-6).tolerance == TOLERANCE

    def test_correct_gradient_passes(self):
        """Test a product of leaves"""
        a = TensorNode(np.array([0.5, -1.0, 2.0]), requires_grad=True)
        b = TensorNode(np.array([1.5, 0.3, -0.7]), requires_grad=True)

        assert gradcheck(lambda: sum_(mul(mul(a, b), a)), [a, b], samples=None) < 1e-8

    def test_wrong_gradient_is_caught(self):
        """Test a deliberately broken backward rule"""
        a = TensorNode(np.array([0.5, -1.0, 2.0]), requires_grad=True)

        def broken():
            return sum_(make_node(a.values ** 2, (a,), lambda g: (g * a.values,)))

        assert gradcheck(broken, [a], samples=None) > TOLERANCE

    def test_leaf_values_restored(self):
        """Test the perturbations leave the leaves unchanged"""
        a = TensorNode(np.array([0.25, 0.75]), requires_grad=True)
        before = a.values.copy()

        gradcheck(lambda: sum_(mul(a, a)), [a])

        np.testing.assert_array_equal(a.values, before)

    def test_default_step_and_trials(self):
        """Test central differences use a 1e-5 step and the suite a hundred trials"""
        assert inspect.signature(gradcheck).parameters["eps"].default == 1e-5
        assert inspect.signature(run_suite).parameters["trials"].default == 100

    def test_trials_draw_small_shapes(self):
        """Test each trial picks its own input shapes, at most 8 per axis"""
        shapes = set()
        for trial in range(12):
            _, leaves = CASES["matmul"](np.random.default_rng(trial), trial)
            assert all(max(leaf.shape) <= MAX_DIM for leaf in leaves)
            assert leaves[0].shape[1] == leaves[1].shape[0]
            shapes.add(leaves[0].shape + leaves[1].shape)

        assert MAX_DIM == 8
        assert len(shapes) > 1


@pytest.mark.unit
@pytest.mark.gradcheck
class TestSuite:
    """Test every registered case"""

    @pytest.mark.parametrize("name", list(CASES))
    def test_case_first_trial(self, name):
        """Test one trial per case"""
        result = check_case(name, trial=0, seed=0)

        assert result.passed, f"{name}: {result.rel_error:.2e}"

    def test_suite_subset(self):
        """Test run_suite restricted to a few cases"""
        results = run_suite(trials=2, seed=1, cases=["matmul", "topo_head"])

        assert len(results) == 4
        assert all(r.passed for r in results)

    @pytest.mark.slow
    def test_full_suite(self):
        """Test a hundred trials of every case"""
        results = run_suite(trials=100, seed=0)

        assert len(results) == 100 * len(CASES)
        assert all(r.passed for r in results), [r for r in results if not r.passed]
