"""
Unit tests for optimizer module
Tests the AdamW update, decoupled weight decay and gradient validation
"""

import pytest
import numpy as np
import os
from unittest.mock import patch

# Import the modules to test
import sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from errors import ConfigurationError, NumericError
from numerics import ParamStore, backward, mul, sub, sum_
from optimizer import AdamW


@pytest.mark.unit
class TestAdamW:
    """Test AdamW steps"""

    def setup_method(self):
        """Set up test fixtures"""
        self.params = ParamStore(0, "float64")
        self.vector = self.params.register("bias", np.array([1.0, 2.0]))
        self.matrix = self.params.register("weight", np.ones((2, 2)))

    def test_first_step_moves_by_learning_rate(self):
        """Test the bias-corrected first step is lr times the gradient sign"""
        optimizer = AdamW(self.params, lr=0.01, weight_decay=0.0)
        self.vector.grad = np.array([0.5, -3.0])

        optimizer.step()

        np.testing.assert_allclose(self.vector.values, [0.99, 2.01], atol=1e-7)
        np.testing.assert_array_equal(self.matrix.values, np.ones((2, 2)))

    def test_decay_applies_to_matrices_only(self):
        """Test decoupled decay with a zero gradient"""
        optimizer = AdamW(self.params, lr=0.1, weight_decay=0.5)
        self.vector.grad = np.zeros(2)
        self.matrix.grad = np.zeros((2, 2))

        optimizer.step()

        np.testing.assert_allclose(self.matrix.values, np.full((2, 2), 0.95))
        np.testing.assert_allclose(self.vector.values, [1.0, 2.0])
        assert optimizer.decays("weight")
        assert not optimizer.decays("bias")

    def test_step_follows_decay_rule(self):
        """Test step decays exactly the parameters the decay rule selects"""
        optimizer = AdamW(self.params, lr=0.1, weight_decay=0.5)
        self.vector.grad = np.zeros(2)
        self.matrix.grad = np.zeros((2, 2))

        with patch.object(AdamW, "decays", side_effect=lambda name: name == "bias") as mock_decays:
            optimizer.step()

        np.testing.assert_allclose(self.vector.values, [0.95, 1.9])
        np.testing.assert_allclose(self.matrix.values, np.ones((2, 2)))
        assert {call.args[0] for call in mock_decays.call_args_list} == {"bias", "weight"}

    def test_parameters_without_gradient_are_skipped(self):
        """Test None gradients leave values untouched"""
        optimizer = AdamW(self.params, lr=0.1)

        optimizer.step()

        np.testing.assert_array_equal(self.matrix.values, np.ones((2, 2)))
        assert optimizer.t == 1

    def test_non_finite_gradient(self):
        """Test NaN gradients raise"""
        optimizer = AdamW(self.params)
        self.vector.grad = np.array([np.nan, 0.0])

        with pytest.raises(NumericError, match="bias"):
            optimizer.step()

    def test_invalid_settings(self):
        """Test learning rate and betas validation"""
        with pytest.raises(ConfigurationError):
            AdamW(self.params, lr=0.0)
        with pytest.raises(ConfigurationError):
            AdamW(self.params, betas=(0.9, 1.0))

    def test_state_size(self):
        """Test two moment buffers per parameter"""
        assert AdamW(self.params).state_size == 2 * self.params.count()

    def test_zero_grad(self):
        """Test gradients are cleared through the store"""
        optimizer = AdamW(self.params)
        self.vector.grad = np.ones(2)

        optimizer.zero_grad()

        assert self.vector.grad is None

    def test_float32_parameters_stay_float32(self):
        """Test updates keep the parameter dtype"""
        params = ParamStore(0, "float32")
        w = params.register("w", np.ones((3, 3)))
        optimizer = AdamW(params, lr=0.01)
        w.grad = np.ones((3, 3), dtype=np.float32)

        optimizer.step()

        assert w.values.dtype == np.float32

    def test_minimizes_quadratic(self):
        """Test repeated steps approach the minimum"""
        params = ParamStore(0, "float64")
        w = params.register("w", np.zeros(3))
        optimizer = AdamW(params, lr=0.1, weight_decay=0.0)

        for _ in range(300):
            optimizer.zero_grad()
            diff = sub(w, 3.0)
            backward(sum_(mul(diff, diff)))
            optimizer.step()

        np.testing.assert_allclose(w.values, 3.0, atol=0.5)
