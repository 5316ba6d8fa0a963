"""Split conformal prediction with RAPS scores and a performance-driven penalty.

Labels are ranked by descending probability with ties going to the lower
class index. For label ``y`` with probability ``pi``, rank ``o`` (1-based) and
``rho`` the mass ranked before it, the score is::

    rho + pi * u + penalty * max(o - kappa_reg, 0)

The threshold ``tau`` is fitted once with ``penalty = lambda``. At prediction
time the penalty comes from :func:`g_calibration`, so a drop in validation
accuracy makes the rank penalty steeper and the sets smaller.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .losses import softmax
from .nn import DenseNet, forward_logits

log = logging.getLogger(__name__)

G_VARIANTS = ("g1", "g2", "g3", "g4")
U_POLICIES = ("random", "fixed")


@dataclass(frozen=True)
class ConformalConfig:
    theta: float = 0.1
    lam: float = 0.5
    kappa_reg: int = 5
    u_policy: str = "random"
    u_value: float = 1.0
    g_variant: str = "g1"

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0, 1), got {self.theta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if int(self.kappa_reg) != self.kappa_reg or self.kappa_reg < 1:
            raise ValueError(f"kappa_reg must be a positive integer, got {self.kappa_reg}")
        if self.u_policy not in U_POLICIES:
            raise ValueError(f"u_policy must be one of {U_POLICIES}, got {self.u_policy!r}")
        if not 0.0 <= self.u_value <= 1.0:
            raise ValueError(f"u_value must be in [0, 1], got {self.u_value}")
        if self.g_variant not in G_VARIANTS:
            raise ValueError(f"g_variant must be one of {G_VARIANTS}, got {self.g_variant!r}")


@dataclass(frozen=True)
class ConformalModel:
    temperature: float
    tau: float
    config: ConformalConfig

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if math.isnan(self.tau):
            raise ValueError("tau must not be NaN")


@dataclass(frozen=True)
class PredictionSet:
    """Sorted tuple of class labels."""

    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(sorted({int(k) for k in self.labels})))

    @classmethod
    def from_mask(cls, mask) -> "PredictionSet":
        return cls(tuple(np.flatnonzero(mask)))

    def to_mask(self, n_classes: int) -> np.ndarray:
        mask = np.zeros(n_classes, dtype=np.bool_)
        mask[list(self.labels)] = True
        return mask

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, k):
        return k in self.labels

    def __and__(self, other):
        return PredictionSet(set(self.labels) & set(other))

    def __or__(self, other):
        return PredictionSet(set(self.labels) | set(other))

    def issubset(self, other) -> bool:
        return set(self.labels) <= set(other)


def temperature_scale(val_logits, val_labels, lr: float = 0.01, max_iter: int = 10) -> float:
    """Gradient descent on the temperature of mean CE, starting from T = 1."""
    z = np.atleast_2d(np.asarray(val_logits, dtype=np.float64))
    y = np.asarray(val_labels, dtype=np.int64).ravel()
    if z.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("temperature scaling needs at least one validation pair")
    if z.shape[0] != y.shape[0]:
        raise ValueError("one label per logit row required")
    rows = np.arange(len(y))
    T = 1.0
    for _ in range(int(max_iter)):
        p = softmax(z / T)
        # d/dT mean CE(z/T, y) = mean(z_y - E_p[z]) / T^2
        g = float(np.mean(z[rows, y] - (p * z).sum(axis=1))) / (T * T)
        T = max(T - lr * g, 1e-3)
    return T


def raps_score(probs, y: int, u: float, penalty: float, kappa_reg: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= y < probs.shape[0]:
        raise ValueError(f"label {y} out of range for {probs.shape[0]} classes")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    return float(
        _kernels.raps_label_scores(
            probs[None, :], np.array([y], dtype=np.int64), np.array([float(u)]), float(penalty), int(kappa_reg)
        )[0]
    )


def quantile_tau(scores, theta: float) -> float:
    """k-th smallest score with k = ceil((1 - theta)(n + 1)); +inf when k > n."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = s.shape[0]
    if n == 0:
        raise ValueError("quantile of an empty score list")
    k = math.ceil((1.0 - theta) * (n + 1))
    if k > n:
        return math.inf
    return float(np.partition(s, k - 1)[k - 1])


def g_calibration(delta: float, lam: float, variant: str = "g1") -> float:
    """Penalty multiplier for a validation-accuracy change ``delta``."""
    if variant not in G_VARIANTS:
        raise ValueError(f"unknown calibration variant {variant!r}")
    if not -1.0 <= delta <= 1.0:
        log.warning("delta %.4f outside [-1, 1]; clamping", delta)
        delta = min(1.0, max(-1.0, delta))
    if delta >= 0 or variant == "g2":
        return lam
    if variant == "g1":
        return lam * delta - delta + lam
    if variant == "g3":
        return lam * delta * delta + lam
    return -lam * delta * delta - delta + lam


def performance_delta(acc_now: float, acc_prev: float | None) -> float:
    if acc_prev is None:
        return 0.0
    return float(acc_now) - float(acc_prev)


def draw_u(config: ConformalConfig, n: int, rng: np.random.Generator | None) -> np.ndarray:
    if config.u_policy == "fixed":
        return np.full(n, config.u_value)
    if rng is None:
        raise ValueError("random u policy needs an rng")
    return rng.uniform(0.0, 1.0, size=n)


def fit_cmodel_from_logits(
    logits, labels, config: ConformalConfig, rng: np.random.Generator | None,
    platt_lr: float = 0.01, platt_max_iter: int = 10,
) -> ConformalModel:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] == 0:
        raise ValueError("conformal calibration needs a nonempty validation set")
    T = temperature_scale(z, y, platt_lr, platt_max_iter)
    probs = softmax(z / T)
    u = draw_u(config, len(y), rng)
    scores = _kernels.raps_label_scores(
        np.ascontiguousarray(probs), y, u, float(config.lam), int(config.kappa_reg)
    )
    return ConformalModel(temperature=T, tau=quantile_tau(scores, config.theta), config=config)


def fit_cmodel(
    net: DenseNet, val_X, val_y, config: ConformalConfig, rng: np.random.Generator | None,
    platt_lr: float = 0.01, platt_max_iter: int = 10,
) -> ConformalModel:
    val_X = np.atleast_2d(np.asarray(val_X, dtype=np.float64))
    if len(val_X) == 0:
        raise ValueError("conformal calibration needs a nonempty validation set")
    return fit_cmodel_from_logits(forward_logits(net, val_X), val_y, config, rng, platt_lr, platt_max_iter)


def predict_masks(cmodel: ConformalModel, logits, delta: float, rng: np.random.Generator | None) -> np.ndarray:
    """Boolean ``(n, C)`` membership masks for a batch of logits."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    cfg = cmodel.config
    penalty = g_calibration(delta, cfg.lam, cfg.g_variant)
    u = draw_u(cfg, z.shape[0], rng)
    if math.isinf(cmodel.tau) and cmodel.tau > 0:
        return np.ones(z.shape, dtype=np.bool_)
    probs = np.ascontiguousarray(softmax(z / cmodel.temperature))
    return _kernels.raps_set_mask(probs, u, float(penalty), int(cfg.kappa_reg), float(cmodel.tau))


def predict_set(cmodel: ConformalModel, logits, delta: float, rng: np.random.Generator | None) -> PredictionSet:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("predict_set takes one logit vector; use predict_masks for batches")
    return PredictionSet.from_mask(predict_masks(cmodel, z, delta, rng)[0])
