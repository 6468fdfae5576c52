"""Training objectives: capsule margin loss, source cross-entropy, and the
margin disparity discrepancy (MDD) used for corpus adaptation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ContractError, Tensor, as_tensor

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class MarginHyper:
    m_plus: float = 0.9
    m_minus: float = 0.1
    rho: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.m_minus < self.m_plus <= 1.0:
            raise ContractError(f"need 0 <= m_minus < m_plus <= 1, got {self.m_minus}, {self.m_plus}")
        if self.rho <= 0:
            raise ContractError(f"rho must be positive, got {self.rho}")


@dataclass(frozen=True)
class MddHyper:
    gamma: float = 1.5  # margin factor
    eta: float = 1.0  # trade-off between cross-entropy and discrepancy
    reduction: str = "mean"  # batch reduction of both disparities: "mean" | "sum"

    def __post_init__(self):
        if self.reduction not in ("mean", "sum"):
            raise ContractError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.gamma <= 1.0:
            raise ContractError(f"margin factor gamma must exceed 1, got {self.gamma}")
        if self.eta < 0:
            raise ContractError(f"trade-off eta must be nonnegative, got {self.eta}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    raise ContractError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def margin_loss(digit_caps, labels, hyper: MarginHyper = MarginHyper(), reduction: str = "mean") -> Tensor:
    """Hinge-squared loss on class-capsule lengths.

    ``digit_caps`` is either ``(batch, K, dim)`` capsules or ``(batch, K)``
    precomputed lengths.  Per sample the loss sums over classes; ``"sum"``
    then adds samples, ``"mean"`` divides that total by the batch size.
    At a margin boundary the hinge contributes a zero subgradient.
    """
    caps = as_tensor(digit_caps)
    lengths = ops.vector_norm(caps, axis=-1) if caps.ndim == 3 else caps
    if lengths.ndim != 2:
        raise ContractError(f"expected (batch, K) lengths, got shape {lengths.shape}")
    n, k = lengths.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.size != n:
        raise ContractError(f"{labels.size} labels for a batch of {n}")
    t = one_hot(labels, k)
    present = ops.relu(hyper.m_plus - lengths) ** 2
    absent = ops.relu(lengths - hyper.m_minus) ** 2
    per_sample = (present * t + absent * (hyper.rho * (1.0 - t))).sum(axis=1)
    return _reduce(per_sample, reduction)


def _true_class_prob(probs: Tensor, labels) -> Tensor:
    t = one_hot(labels, probs.shape[1])
    return (probs * t).sum(axis=1)


def cross_entropy_source(probs, labels, domain: str = "source") -> Tensor:
    """Mean negative log-probability of the true class, source samples only."""
    if domain != "source":
        raise ContractError("cross-entropy is defined on labelled source-corpus samples only")
    probs = as_tensor(probs)
    labels = np.asarray(labels).reshape(-1)
    if labels.size != probs.shape[0]:
        raise ContractError(f"{labels.size} labels for a batch of {probs.shape[0]}")
    p = ops.clamp_min(_true_class_prob(probs, labels), PROB_FLOOR)
    return -ops.log(p).mean()


def _check_simplex(name: str, probs: np.ndarray) -> None:
    if probs.ndim != 2:
        raise ContractError(f"{name} must be (batch, K), got shape {probs.shape}")
    if (probs < -SIMPLEX_TOL).any() or np.abs(probs.sum(axis=1) - 1.0).max() > SIMPLEX_TOL:
        raise ContractError(f"{name} rows are not probability vectors")


def pseudo_labels(main_probs) -> np.ndarray:
    """Main-head predictions; they carry no gradient."""
    return np.argmax(as_tensor(main_probs).data, axis=1)


def mdd_disparity(main_probs, adv_probs, domain: str, reduction: str = "mean") -> Tensor:
    """Disagreement term of the adversarial head with the main head's argmax.

    Source: ``-log p`` where ``p`` is the adversarial probability of the main
    head's label, i.e. cross-entropy against that pseudo-label (>= 0).
    Target: the modified term ``log(1 - p)`` (<= 0).  The discrepancy
    ``target - gamma * source`` is then largest when the adversarial head
    agrees with the main head on the source corpus and contradicts it on the
    target corpus.
    """
    main_probs, adv_probs = as_tensor(main_probs), as_tensor(adv_probs)
    _check_simplex("main head probabilities", main_probs.data)
    _check_simplex("adversarial head probabilities", adv_probs.data)
    if main_probs.shape != adv_probs.shape:
        raise ContractError(f"heads disagree on shape: {main_probs.shape} vs {adv_probs.shape}")
    p = _true_class_prob(adv_probs, pseudo_labels(main_probs))
    if domain == "source":
        per_sample = -ops.log(ops.clamp_min(p, PROB_FLOOR))
    elif domain == "target":
        per_sample = ops.log(ops.clamp_min(1.0 - p, PROB_FLOOR))
    else:
        raise ContractError(f"domain must be 'source' or 'target', got {domain!r}")
    return _reduce(per_sample, reduction)


def mdd_loss(source_disp, target_disp, hyper: MddHyper = MddHyper()):
    """``target - gamma * source``; works on floats and tensors alike."""
    return target_disp - hyper.gamma * source_disp


def combined_objective(ce, mdd, hyper: MddHyper = MddHyper()):
    """``ce + eta * mdd``: minimised over extractor and main head, maximised over
    the adversarial head (that direction is realised by the training step)."""
    return ce + hyper.eta * mdd
