"""Optimizers: Adam (default) and SGD with momentum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass
class OptimizerConfig:
    kind: str = "adam"                  # "adam" or "sgd-momentum"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0

    def validate(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2", "momentum"):
            b = getattr(self, name)
            if not (0.0 <= b < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1), got {b}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def to_dict(self):
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, d):
        cfg = cls(
            kind=d.get("kind", "adam"),
            learning_rate=float(d.get("learning_rate", 1e-3)),
            beta1=float(d.get("beta1", 0.9)),
            beta2=float(d.get("beta2", 0.999)),
            eps=float(d.get("eps", 1e-8)),
            momentum=float(d.get("momentum", 0.9)),
            weight_decay=float(d.get("weight_decay", 0.0)),
        )
        cfg.validate()
        return cfg


class Optimizer:
    """Updates a parameter registry in place from accumulated gradients.

    One state slot per parameter, keyed by name. Parameters whose grad is
    None (not reached by backward) are left untouched.
    """

    def __init__(self, params, config):
        config.validate()
        self.params = params
        self.config = config
        self.step_count = 0
        self._m = {name: np.zeros_like(v.value) for name, v in params.items()}
        self._v = ({name: np.zeros_like(v.value) for name, v in params.items()}
                   if config.kind == "adam" else None)

    def zero_grad(self):
        for var in self.params.values():
            var.zero_grad()

    def step(self):
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        for name, var in self.params.items():
            g = var.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r} "
                                     f"at step {t}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * var.value
            if cfg.kind == "adam":
                m = self._m[name]
                v = self._v[name]
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * (g * g)
                m_hat = m / (1.0 - cfg.beta1 ** t)
                v_hat = v / (1.0 - cfg.beta2 ** t)
                var.value -= (cfg.learning_rate * m_hat /
                              (np.sqrt(v_hat) + cfg.eps)).astype(var.value.dtype)
            else:
                m = self._m[name]
                m *= cfg.momentum
                m += g
                var.value -= (cfg.learning_rate * m).astype(var.value.dtype)
