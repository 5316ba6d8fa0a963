"""Local training of one client: private and proxy models teach each other.

Each epoch recalibrates conformal models for both networks on the client's
held-out conformal split, then for every training sample predicts a proxy
set ``S`` and a private set ``L``. Their overlap (the consensus weight)
scales how strongly the private model is pulled towards ``S``; the proxy is
distilled from the private model in the usual way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable

import numpy as np

from . import conformal
from .conformal import ConformalConfig, PredictionSet
from .losses import MODES, fedprox_term, objective_from_logits
from .nn import AdamState, adam_step, backward, forward_activations, forward_logits, unflatten

if TYPE_CHECKING:
    from .federation import ClientState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UarlConfig:
    local_epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-4
    mode: str = "full"
    topk: int = 3
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    # False: the shuffled data is cut into local_epochs parts, one per epoch
    full_pass_epochs: bool = False
    # "S" as printed in the final consensus formula; "L" is the rebuttal variant
    eta_denominator: str = "S"
    fedprox_mu: float = 0.0
    platt_lr: float = 0.01
    platt_max_iter: int = 10

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if self.eta_denominator not in ("S", "L"):
            raise ValueError("eta_denominator must be 'S' or 'L'")
        if self.fedprox_mu < 0:
            raise ValueError("fedprox_mu must be >= 0")


@dataclass
class EpochStats:
    mean_eta: float
    mean_set_size_proxy: float
    mean_set_size_private: float
    train_loss: float
    val_acc_proxy: float
    val_acc_private: float
    delta: float
    n_samples: int


def consensus_weight(S: Iterable[int], L: Iterable[int], denominator: str = "S") -> float:
    S, L = set(S), set(L)
    if not S:
        return 0.0
    inter = len(S & L)
    if len(S) >= len(L):
        return inter / len(S | L)
    return inter / (len(S) if denominator == "S" else len(L))


def consensus_weights(S: np.ndarray, L: np.ndarray, denominator: str = "S") -> np.ndarray:
    """Row-wise consensus weight for boolean set masks of shape ``(n, C)``."""
    s = S.sum(axis=1)
    l = L.sum(axis=1)
    inter = (S & L).sum(axis=1).astype(np.float64)
    union = (S | L).sum(axis=1)
    small = s if denominator == "S" else l
    denom = np.where(s >= l, union, small).astype(np.float64)
    return np.divide(inter, denom, out=np.zeros_like(inter), where=(s > 0) & (denom > 0))


def topk_set(logits, K: int) -> PredictionSet:
    z = np.asarray(logits, dtype=np.float64)
    return PredictionSet.from_mask(topk_masks(z, K)[0])


def topk_masks(logits, K: int) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not 1 <= K <= z.shape[1]:
        raise ValueError(f"K={K} outside [1, {z.shape[1]}]")
    order = np.argsort(-z, axis=1, kind="stable")[:, :K]
    mask = np.zeros(z.shape, dtype=np.bool_)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lower index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _effective_conformal(cfg: UarlConfig) -> ConformalConfig:
    if cfg.mode == "g05":
        return replace(cfg.conformal, g_variant="g2", lam=0.5)
    return cfg.conformal


def _epoch_parts(n: int, cfg: UarlConfig, rng: np.random.Generator) -> list[np.ndarray]:
    if cfg.full_pass_epochs:
        return [rng.permutation(n) for _ in range(cfg.local_epochs)]
    return np.array_split(rng.permutation(n), cfg.local_epochs)


def uarl_local_train(client: "ClientState", global_proxy: np.ndarray, cfg: UarlConfig,
                     rng: np.random.Generator) -> tuple["ClientState", list[EpochStats]]:
    """Run ``cfg.local_epochs`` epochs of reciprocal training on ``client`` in place."""
    if len(client.y_train) == 0 or len(client.y_val) == 0:
        raise ValueError(f"client {client.cid}: empty train or conformal split")
    proxy = unflatten(client.proxy_net.layer_dims, global_proxy)
    client.proxy_net = proxy
    private = client.private_net
    proxy_opt = AdamState.zeros(proxy.n_params)
    if client.private_opt is None:
        client.private_opt = AdamState.zeros(private.n_params)
    private_opt = client.private_opt
    ccfg = _effective_conformal(cfg)
    ref = np.array(global_proxy, dtype=np.float64, copy=True)
    C = proxy.n_classes

    stats: list[EpochStats] = []
    for part in _epoch_parts(len(client.y_train), cfg, rng):
        zp_val = forward_logits(proxy, client.X_val)
        zw_val = forward_logits(private, client.X_val)
        acc_p = accuracy_from_logits(zp_val, client.y_val)
        acc_w = accuracy_from_logits(zw_val, client.y_val)
        prev = client.acc_history[-1] if client.acc_history else None
        delta = max(-1.0, min(1.0, conformal.performance_delta(acc_p, prev)))
        client.acc_history.append(acc_p)
        cp = conformal.fit_cmodel_from_logits(zp_val, client.y_val, ccfg, rng, cfg.platt_lr, cfg.platt_max_iter)
        cw = conformal.fit_cmodel_from_logits(zw_val, client.y_val, ccfg, rng, cfg.platt_lr, cfg.platt_max_iter)

        eta_sum = size_p = size_w = loss_sum = 0.0
        for start in range(0, len(part), cfg.batch_size):
            idx = part[start : start + cfg.batch_size]
            Xb = client.X_train[idx]
            yb = client.y_train[idx]
            acts_w = forward_activations(private, Xb)
            acts_p = forward_activations(proxy, Xb)
            zw = acts_w[:, -C:]
            zp = acts_p[:, -C:]
            if cfg.mode == "topk":
                S = topk_masks(zp, cfg.topk)
                L = topk_masks(zw, cfg.topk)
            else:
                S = conformal.predict_masks(cp, zp, delta, rng)
                L = conformal.predict_masks(cw, zw, delta, rng)
            eta = consensus_weights(S, L, cfg.eta_denominator)
            if cfg.mode == "eta1":
                eta = np.ones_like(eta)
            obj = objective_from_logits(zw, zp, yb, S, eta, cfg.mode)
            g_w = backward(private, Xb, obj.private.grad, acts_w)
            g_p = backward(proxy, Xb, obj.proxy.grad, acts_p)
            batch_loss = obj.loss
            if cfg.fedprox_mu > 0:
                prox = fedprox_term(proxy.params, ref, cfg.fedprox_mu)
                g_p += prox.grad
                batch_loss += prox.loss
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"client {client.cid}: non-finite training loss")
            adam_step(private, g_w, private_opt, cfg.lr)
            adam_step(proxy, g_p, proxy_opt, cfg.lr)

            nb = len(idx)
            eta_sum += float(eta.sum())
            size_p += float(S.sum())
            size_w += float(L.sum())
            loss_sum += batch_loss * nb

        n = len(part)
        stats.append(EpochStats(
            mean_eta=eta_sum / n if n else 0.0,
            mean_set_size_proxy=size_p / n if n else 0.0,
            mean_set_size_private=size_w / n if n else 0.0,
            train_loss=loss_sum / n if n else 0.0,
            val_acc_proxy=acc_p,
            val_acc_private=acc_w,
            delta=delta,
            n_samples=n,
        ))
        log.debug("client %s epoch %d: %s", client.cid, len(stats), stats[-1])

    client.acc_history.append(accuracy_from_logits(forward_logits(proxy, client.X_val), client.y_val))
    return client, stats
