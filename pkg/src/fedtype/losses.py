"""Training objectives on logits.

Every loss accepts either one logit vector or a ``(n, C)`` batch. For a batch
the returned loss is the mean over rows and the gradient rows are already
divided by ``n``, so they are the gradient of that mean.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

MODES = ("full", "sym", "topk", "eta1", "g05")

# instrumentation: how often each term was evaluated
call_counts: Counter = Counter()


@dataclass
class LossGrad:
    loss: float
    grad: np.ndarray


@dataclass
class ClientObjective:
    """Per-model objectives of one local step; gradients are w.r.t. logits."""

    private: LossGrad
    proxy: LossGrad

    @property
    def loss(self) -> float:
        return self.private.loss + self.proxy.loss


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _batch(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim != 2:
        raise ValueError(f"logits must be 1-D or 2-D, got shape {z.shape}")
    return z, False


def _finish(per_row: np.ndarray, grad: np.ndarray, single: bool) -> LossGrad:
    n = per_row.shape[0]
    if single:
        return LossGrad(float(per_row[0]), grad[0])
    return LossGrad(float(per_row.mean()), grad / n)


def cross_entropy(logits, label) -> LossGrad:
    z, single = _batch(logits)
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    C = z.shape[1]
    if y.shape[0] != z.shape[0]:
        raise ValueError("one label per logit row required")
    if np.any((y < 0) | (y >= C)):
        raise ValueError(f"label out of range for {C} classes")
    ls = log_softmax(z)
    rows = np.arange(z.shape[0])
    per_row = -ls[rows, y]
    grad = np.exp(ls)
    grad[rows, y] -= 1.0
    return _finish(per_row, grad, single)


def forward_kd(teacher_logits, student_logits) -> LossGrad:
    """KL(softmax(teacher) || softmax(student)); gradient w.r.t. the student only."""
    t, single = _batch(teacher_logits)
    s, _ = _batch(student_logits)
    if t.shape != s.shape:
        raise ValueError(f"teacher {t.shape} and student {s.shape} logits differ in shape")
    call_counts["fkd"] += 1
    lq = log_softmax(t)
    ls = log_softmax(s)
    q = np.exp(lq)
    per_row = (q * (lq - ls)).sum(axis=1)
    # clamp the -1e-17 style rounding residue; KL is non-negative
    per_row = np.maximum(per_row, 0.0)
    return _finish(per_row, np.exp(ls) - q, single)


def bkd_loss(private_logits, S, eta) -> LossGrad:
    """Ranking-based behaviour imitation: raise the private logits of labels in ``S``.

    ``S`` is a boolean mask (same shape as the logits) or, for a single
    sample, any iterable of label indices. The term is
    ``-eta * sum_{k in S} log softmax(z)[k]``; an empty ``S`` contributes 0.
    """
    z, single = _batch(private_logits)
    n, C = z.shape
    mask = _as_mask(S, n, C)
    eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), (n,))
    if np.any((eta < 0.0) | (eta > 1.0)) or not np.all(np.isfinite(eta)):
        raise ValueError("eta must lie in [0, 1]")
    call_counts["bkd"] += 1
    ls = log_softmax(z)
    m = mask.astype(np.float64)
    per_row = -eta * (m * ls).sum(axis=1)
    size = m.sum(axis=1)
    grad = -eta[:, None] * (m - size[:, None] * np.exp(ls))
    return _finish(per_row, grad, single)


def _as_mask(S, n: int, C: int) -> np.ndarray:
    if isinstance(S, np.ndarray) and S.dtype == np.bool_:
        mask = S.reshape(n, C) if S.size == n * C else None
        if mask is None:
            raise ValueError(f"set mask of shape {S.shape} does not match logits ({n}, {C})")
        return mask
    if n != 1:
        raise ValueError("batched bkd_loss needs a boolean mask for S")
    labels = list(S)
    if any(k < 0 or k >= C for k in labels):
        raise ValueError(f"prediction set {sorted(labels)} is not within {C} classes")
    mask = np.zeros((1, C), dtype=np.bool_)
    mask[0, labels] = True
    return mask


def fedprox_term(local, global_ref, mu: float) -> LossGrad:
    """(mu/2)·||local - global_ref||² and its parameter gradient."""
    local = np.asarray(local, dtype=np.float64)
    global_ref = np.asarray(global_ref, dtype=np.float64)
    if local.shape != global_ref.shape:
        raise ValueError(f"length mismatch: {local.shape} vs {global_ref.shape}")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    diff = local - global_ref
    return LossGrad(0.5 * mu * float(diff @ diff), mu * diff)


def objective_from_logits(private_logits, proxy_logits, y, S, eta, mode: str = "full") -> ClientObjective:
    """Both client objectives from precomputed logits.

    private: CE + BKD (or, in ``sym`` mode, KL from the detached proxy).
    proxy:   CE + KL from the detached private model.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    ce_w = cross_entropy(private_logits, y)
    ce_p = cross_entropy(proxy_logits, y)
    fkd = forward_kd(private_logits, proxy_logits)
    if mode == "sym":
        back = forward_kd(proxy_logits, private_logits)
    else:
        back = bkd_loss(private_logits, S, eta)
    return ClientObjective(
        private=LossGrad(ce_w.loss + back.loss, ce_w.grad + back.grad),
        proxy=LossGrad(ce_p.loss + fkd.loss, ce_p.grad + fkd.grad),
    )


def composite_client_loss(x, y, private_net, proxy_net, S, L, eta, mode: str = "full") -> ClientObjective:
    """Forward both networks on ``x`` and build the per-model objectives.

    When ``eta`` is None it is derived from ``S`` and ``L`` (single sample only).
    """
    from .nn import forward_logits

    zw = forward_logits(private_net, x)
    zp = forward_logits(proxy_net, x)
    if eta is None:
        from .reciprocity import consensus_weight

        eta = consensus_weight(S, L)
    return objective_from_logits(zw, zp, y, S, eta, mode)
