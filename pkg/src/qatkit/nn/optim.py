"""Optimizers and the patience-based learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LrScheduleConfig:
    initial_lr: float = 2e-3
    final_lr: float = 3.90625e-6
    decay_factor: float = 2.0
    patience_evals: int = 4

    def __post_init__(self):
        if not (self.initial_lr >= self.final_lr > 0):
            raise ValueError("need initial_lr >= final_lr > 0")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must be > 1")
        if self.patience_evals < 1:
            raise ValueError("patience_evals must be >= 1")


class LrSchedule:
    """Halve-on-plateau: divide lr by decay_factor when the dev metric shows
    no improvement for patience_evals consecutive evaluations (lower = better),
    flooring at final_lr."""

    def __init__(self, cfg: LrScheduleConfig):
        self.cfg = cfg
        self.lr = cfg.initial_lr
        self.best = float("inf")
        self.bad_count = 0

    def step(self, dev_metric: float) -> float:
        if dev_metric < self.best:
            self.best = dev_metric
            self.bad_count = 0
        else:
            self.bad_count += 1
            if self.bad_count >= self.cfg.patience_evals:
                self.lr = max(self.lr / self.cfg.decay_factor, self.cfg.final_lr)
                self.bad_count = 0
        return self.lr

    @property
    def at_floor(self) -> bool:
        return self.lr <= self.cfg.final_lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_count": self.bad_count}

    def load_state(self, s: dict):
        self.lr, self.best, self.bad_count = s["lr"], s["best"], s["bad_count"]


@dataclass
class OptimizerConfig:
    kind: str = "sgd_nesterov"  # or "adadelta"
    learning_rate: float = 2e-3
    momentum: float = 0.9
    rho: float = 0.95  # AdaDelta decay
    eps: float = 1e-6
    lr_schedule: LrScheduleConfig = field(default_factory=LrScheduleConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must be in [0, 1)")
        if isinstance(self.lr_schedule, dict):
            self.lr_schedule = LrScheduleConfig(**self.lr_schedule)


class SGDNesterov:
    """SGD with Nesterov momentum:
        v <- mu*v + g;  w <- w - lr*(g + mu*v)
    With momentum 0 this is plain SGD."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: dict, grads: dict, lr: float):
        mu = self.momentum
        for k, w in params.items():
            g = grads[k].astype(np.float64)
            if mu == 0.0:
                w -= (lr * g).astype(w.dtype)
                continue
            v = self.v.get(k)
            if v is None:
                v = np.zeros_like(g)
            v = mu * v + g
            self.v[k] = v
            w -= (lr * (g + mu * v)).astype(w.dtype)

    def state(self):
        return {"v": self.v}

    def load_state(self, s):
        self.v = s.get("v", {})


class AdaDelta:
    """AdaDelta with a learning-rate multiplier on the adaptive step."""

    def __init__(self, rho=0.95, eps=1e-6):
        self.rho, self.eps = rho, eps
        self.eg: dict[str, np.ndarray] = {}
        self.ex: dict[str, np.ndarray] = {}

    def update(self, params: dict, grads: dict, lr: float):
        for k, w in params.items():
            g = grads[k].astype(np.float64)
            eg = self.eg.get(k, np.zeros_like(g))
            ex = self.ex.get(k, np.zeros_like(g))
            eg = self.rho * eg + (1 - self.rho) * g * g
            dx = -np.sqrt(ex + self.eps) / np.sqrt(eg + self.eps) * g
            ex = self.rho * ex + (1 - self.rho) * dx * dx
            self.eg[k], self.ex[k] = eg, ex
            w += (lr * dx).astype(w.dtype)

    def state(self):
        return {"eg": self.eg, "ex": self.ex}

    def load_state(self, s):
        self.eg = s.get("eg", {})
        self.ex = s.get("ex", {})


def make_optimizer(cfg: OptimizerConfig):
    if cfg.kind == "sgd_nesterov":
        return SGDNesterov(momentum=cfg.momentum)
    if cfg.kind == "adadelta":
        return AdaDelta(rho=cfg.rho, eps=cfg.eps)
    raise ValueError(f"unknown optimizer kind {cfg.kind!r}")
