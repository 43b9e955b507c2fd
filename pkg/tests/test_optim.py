"""Optimizer behavior: Adam closed forms, convergence, NaN diagnostics."""

import numpy as np
import pytest

from ctxunet.autodiff import Variable
from ctxunet.errors import ConfigError, NumericalError
from ctxunet.optim import Optimizer, OptimizerConfig
from ctxunet.tensor import seeded_rng


def _params(values):
    return {name: Variable(np.asarray(v, dtype=np.float64))
            for name, v in values.items()}


class TestAdam:
    def test_first_step_is_signed_lr(self):
        # With bias correction, step 1 moves by ~lr*sign(g) (eps-limited).
        lr = 0.01
        params = _params({"w": [1.0, -2.0, 3.0]})
        params["w"].grad = np.array([0.5, -0.25, 1.0])
        opt = Optimizer(params, OptimizerConfig(learning_rate=lr))
        before = params["w"].value.copy()
        opt.step()
        delta = params["w"].value - before
        assert np.allclose(delta, -lr * np.sign(params["w"].grad), rtol=1e-6)

    def test_zero_gradient_never_moves(self):
        params = _params({"w": [1.0, 2.0]})
        opt = Optimizer(params, OptimizerConfig())
        for _ in range(20):
            params["w"].grad = np.zeros(2)
            opt.step()
        assert np.array_equal(params["w"].value, np.array([1.0, 2.0]))

    def test_missing_gradient_skipped(self):
        params = _params({"w": [1.0]})
        opt = Optimizer(params, OptimizerConfig())
        opt.step()
        assert params["w"].value[0] == 1.0

    def test_quadratic_converges(self):
        # f(x) = x^2 from x=1 reaches |x| < 1e-3 within 500 steps at lr=0.1.
        params = _params({"x": [1.0]})
        opt = Optimizer(params, OptimizerConfig(learning_rate=0.1))
        for step in range(500):
            params["x"].grad = 2.0 * params["x"].value
            opt.step()
            if abs(params["x"].value[0]) < 1e-3:
                break
        assert abs(params["x"].value[0]) < 1e-3

    def test_nan_gradient_names_parameter(self):
        params = _params({"enc0.conv1.weight": [1.0]})
        params["enc0.conv1.weight"].grad = np.array([np.nan])
        opt = Optimizer(params, OptimizerConfig())
        with pytest.raises(NumericalError, match="enc0.conv1.weight"):
            opt.step()

    def test_weight_decay_pulls_to_zero(self):
        params = _params({"w": [10.0]})
        opt = Optimizer(params, OptimizerConfig(learning_rate=0.5, weight_decay=0.1))
        for _ in range(200):
            params["w"].grad = np.zeros(1)
            opt.step()
        assert abs(params["w"].value[0]) < 10.0


class TestSgdMomentum:
    def test_quadratic_converges(self):
        params = _params({"x": [1.0]})
        opt = Optimizer(params, OptimizerConfig(kind="sgd-momentum",
                                                learning_rate=0.05, momentum=0.9))
        for _ in range(500):
            params["x"].grad = 2.0 * params["x"].value
            opt.step()
        assert abs(params["x"].value[0]) < 1e-3

    def test_first_step_is_lr_times_grad(self):
        params = _params({"x": [1.0]})
        opt = Optimizer(params, OptimizerConfig(kind="sgd-momentum", learning_rate=0.1))
        params["x"].grad = np.array([2.0])
        opt.step()
        assert np.isclose(params["x"].value[0], 1.0 - 0.1 * 2.0)


class TestConfigValidation:
    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(kind="adagrad").validate()

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(learning_rate=0.0).validate()

    def test_bad_beta(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(beta1=1.0).validate()

    def test_dict_round_trip(self):
        cfg = OptimizerConfig(kind="sgd-momentum", learning_rate=0.02,
                              momentum=0.8, weight_decay=1e-4)
        again = OptimizerConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_determinism(self):
        def run():
            rng = seeded_rng(3)
            params = _params({"w": rng.normal(size=8)})
            opt = Optimizer(params, OptimizerConfig(learning_rate=0.01))
            for _ in range(50):
                params["w"].grad = params["w"].value * 2.0 + 1.0
                opt.step()
            return params["w"].value.copy()

        assert np.array_equal(run(), run())
