"""Training objectives: cross-entropy, the prototype contrastive term, and
the squared-distance prototype regularizer used by the FedProto-style
baseline.

The contrastive term pulls a feature toward the global prototype of its
own class and away from every other class's prototype:

    loss(z) = -log( sum_{g in positives} exp(cos(z, g) / tau)
                    / sum_{g in all} exp(cos(z, g) / tau) )

averaged over the samples whose class has a global prototype.  Prototypes
enter as constants; gradients flow through the features only.  Everything
is built from tape primitives, with per-row maxima detached before the
exponentials for stability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (BadLabel, BadTemperature, EmptyGlobals, ShapeMismatch)
from .prototypes import PrototypeSet

logger = logging.getLogger(__name__)

_NORM_GUARD = 1e-30  # added to squared norms; far below every stated tolerance
_COS_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    apc_enabled: bool = True
    baseline_mode: str = "none"  # "none" or "fedproto"
    fedproto_weight: float = 1.0
    apc_on_mean_features: bool = False

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise BadTemperature(f"temperature must be positive, got {self.temperature}")
        if self.baseline_mode not in ("none", "fedproto"):
            raise ValueError(f"unknown baseline_mode: {self.baseline_mode}")
        if self.fedproto_weight < 0.0:
            raise ValueError("fedproto_weight must be non-negative")


@dataclass(frozen=True)
class LossReport:
    """Scalar loss values for one training batch."""
    ce: float
    apc: float
    total: float
    batch_size: int
    apc_active: bool = True
    apc_skipped: int = 0
    aux: float = 0.0  # FedProto-style regularizer, zero otherwise


def _check_labels(labels, num_classes: int) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise BadLabel(f"labels must lie in [0, {num_classes})")
    return arr


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be 2-D, got {logits.shape}")
    batch, m = logits.shape
    y = _check_labels(labels, m)
    if y.size != batch:
        raise ShapeMismatch(f"{batch} logit rows vs {y.size} labels")

    row_max = logits.data.max(axis=1, keepdims=True)  # detached
    shifted = ad.sub(logits, Tensor(np.broadcast_to(row_max, logits.shape)))
    row_sum = ad.matmul(ad.exp(shifted), Tensor(np.ones((m, 1))))
    lse = ad.add(ad.log(row_sum), Tensor(row_max))
    onehot = np.zeros((batch, m))
    onehot[np.arange(batch), y] = 1.0
    picked = ad.sum(ad.mul(logits, Tensor(onehot)))
    return ad.scale(ad.sub(ad.sum(lse), picked), 1.0 / batch)


def cosine_sim(a: Tensor, b) -> Tensor:
    """cos(a, b) as a differentiable scalar; near-zero norms are guarded."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    dot = ad.sum(ad.mul(a, b))
    norms = ad.mul(ad.l2_norm(a), ad.l2_norm(b))
    if float(norms.data) < _COS_EPS:
        logger.warning("cosine_sim: degenerate vector (norm product %.3e), "
                       "guarding denominator", float(norms.data))
        norms = ad.add(norms, Tensor(_COS_EPS))
    inv = ad.exp(ad.scale(ad.log(norms), -1.0))
    return ad.mul(dot, inv)


def _prototype_matrix(globals_: PrototypeSet) -> tuple[list[int], np.ndarray]:
    """Unit-normalized prototype rows in ascending class order (constants)."""
    classes = globals_.classes
    mat = np.stack([np.asarray(globals_.vectors[c], dtype=np.float64)
                    for c in classes])
    norms = np.sqrt(np.sum(mat * mat, axis=1, keepdims=True))
    tiny = norms < _COS_EPS
    if np.any(tiny):
        logger.warning("apc_loss: %d global prototypes have near-zero norm",
                       int(tiny.sum()))
        norms = np.where(tiny, _COS_EPS, norms)
    return classes, mat / norms


def _row_normalized(features: Tensor) -> Tensor:
    """Rows scaled to unit length, differentiably, via 1/sqrt(|z|^2 + guard)."""
    b, d = features.shape
    sq = ad.matmul(ad.mul(features, features), Tensor(np.ones((d, 1))))
    if np.any(np.all(features.data == 0.0, axis=1)):
        logger.warning("apc_loss: zero feature row, cosine degenerates")
    inv = ad.exp(ad.scale(ad.log(ad.add(sq, Tensor(np.full((b, 1), _NORM_GUARD)))),
                          -0.5))
    return ad.mul(features, ad.matmul(inv, Tensor(np.ones((1, d)))))


def _row_lse(scores: Tensor, mask: np.ndarray, row_max: np.ndarray) -> Tensor:
    """log sum_j mask_ij * exp(scores_ij), with a detached per-row max."""
    shifted = ad.sub(scores, Tensor(np.broadcast_to(row_max, scores.shape)))
    e = ad.exp(shifted)
    masked = e if mask is None else ad.mul(e, Tensor(mask))
    cols = scores.shape[1]
    return ad.add(ad.log(ad.matmul(masked, Tensor(np.ones((cols, 1))))),
                  Tensor(row_max))


def apc_skip_count(labels, globals_: PrototypeSet) -> int:
    """How many samples the contrastive loss would skip for this batch."""
    have = set(globals_.classes)
    return sum(1 for y in np.asarray(labels).reshape(-1) if int(y) not in have)


def apc_loss(features: Tensor, labels, globals_: PrototypeSet,
             tau: float) -> Tensor:
    """Prototype contrastive loss over the batch, prototypes held constant."""
    if tau <= 0.0:
        raise BadTemperature(f"temperature must be positive, got {tau}")
    if globals_.is_empty():
        raise EmptyGlobals("no global prototypes to contrast against")
    if features.ndim != 2:
        raise ShapeMismatch(f"features must be 2-D, got {features.shape}")

    classes, proto = _prototype_matrix(globals_)
    if proto.shape[1] != features.shape[1]:
        raise ShapeMismatch(
            f"feature dim {features.shape[1]} vs prototype dim {proto.shape[1]}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != features.shape[0]:
        raise ShapeMismatch(f"{features.shape[0]} feature rows vs {y.size} labels")

    class_pos = {c: i for i, c in enumerate(classes)}
    keep = [i for i, lab in enumerate(y) if int(lab) in class_pos]
    if not keep:
        return Tensor(0.0)

    select = np.zeros((len(keep), features.shape[0]))
    select[np.arange(len(keep)), keep] = 1.0
    z = _row_normalized(ad.matmul(Tensor(select), features))
    scores = ad.scale(ad.matmul(z, Tensor(proto.T)), 1.0 / tau)

    pos_mask = np.zeros((len(keep), len(classes)))
    for r, i in enumerate(keep):
        pos_mask[r, class_pos[int(y[i])]] = 1.0
    row_max = scores.data.max(axis=1, keepdims=True)
    log_den = _row_lse(scores, None, row_max)
    log_num = _row_lse(scores, pos_mask, row_max)
    return ad.mean(ad.sub(log_den, log_num))


def total_loss(ce: Tensor, apc: Tensor) -> Tensor:
    """Unweighted sum of the two objectives."""
    if ce.size != 1 or apc.size != 1:
        raise ShapeMismatch("total_loss expects scalar terms")
    return ad.add(ce, apc)


def fedproto_reg(mean_features: Tensor, labels, globals_: PrototypeSet,
                 weight: float) -> Tensor:
    """Squared-distance pull of mean features toward own-class prototypes."""
    if globals_.is_empty():
        raise EmptyGlobals("no global prototypes to regularize against")
    if mean_features.ndim != 2:
        raise ShapeMismatch(f"mean features must be 2-D, got {mean_features.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != mean_features.shape[0]:
        raise ShapeMismatch(
            f"{mean_features.shape[0]} feature rows vs {y.size} labels")

    have = set(globals_.classes)
    keep = [i for i, lab in enumerate(y) if int(lab) in have]
    if not keep:
        return Tensor(0.0)
    select = np.zeros((len(keep), mean_features.shape[0]))
    select[np.arange(len(keep)), keep] = 1.0
    targets = np.stack([np.asarray(globals_.vectors[int(y[i])]) for i in keep])
    diff = ad.sub(ad.matmul(Tensor(select), mean_features), Tensor(targets))
    return ad.scale(ad.sum(ad.mul(diff, diff)), weight / len(keep))
