"""Training objectives.

Pretraining combines cross-entropy, soft Dice, and focal terms with fixed
weights 0.5/0.3/0.2. Fine-tuning uses the episodic prototypical loss in one
or both directions (query, and support via the reversed pipeline) plus an
L2 penalty on the head's trainable parameters.

All public functions return scalar `Tensor`s so the total stays inside the
autodiff graph; `LossBreakdown` snapshots the component values as plain
floats for logging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, clamp_min, power, tlog, tmean, tsum
from .errors import ContractViolationError

LOG_FLOOR = 1e-12


@dataclass
class LossConfig:
    ce_weight: float = 0.5
    dice_weight: float = 0.3
    focal_weight: float = 0.2
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    reg_weight: float = 0.01
    bidirectional: bool = True

    def __post_init__(self):
        if min(self.ce_weight, self.dice_weight, self.focal_weight, self.reg_weight) < 0:
            raise ContractViolationError("loss weights must be non-negative")
        if self.ce_weight + self.dice_weight + self.focal_weight <= 0:
            raise ContractViolationError("at least one pretraining weight must be positive")


@dataclass
class LossBreakdown:
    """Component values (floats) plus the differentiable total."""

    total: Tensor
    query: float = 0.0
    support: float = 0.0
    proto: float = 0.0
    ce: float = 0.0
    dice: float = 0.0
    focal: float = 0.0
    reg: float = 0.0

    def to_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.data),
            "query": self.query,
            "support": self.support,
            "proto": self.proto,
            "ce": self.ce,
            "dice": self.dice,
            "focal": self.focal,
            "reg": self.reg,
        }


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractViolationError(
            f"labels must lie in [0, {num_classes - 1}], got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return np.eye(num_classes, dtype=dtype)[labels]


def _check_alignment(probabilities: Tensor, ground_truth: np.ndarray):
    if probabilities.ndim != 4:
        raise ContractViolationError(
            f"probabilities must be rank 4 (B,H,W,classes), got {probabilities.shape}"
        )
    if tuple(np.asarray(ground_truth).shape) != probabilities.shape[:3]:
        raise ContractViolationError(
            f"mask shape {np.asarray(ground_truth).shape} does not match "
            f"probability grid {probabilities.shape[:3]}"
        )


def _true_class_probs(probabilities: Tensor, ground_truth: np.ndarray) -> Tensor:
    _check_alignment(probabilities, ground_truth)
    onehot = _one_hot(ground_truth, probabilities.shape[-1], probabilities.data.dtype)
    return tsum(probabilities * onehot, axis=-1)


def cross_entropy_loss(probabilities: Tensor, ground_truth: np.ndarray) -> Tensor:
    """Mean over images and pixels of -log p(true class), floor-clamped."""
    p_true = _true_class_probs(probabilities, ground_truth)
    return tmean(-tlog(clamp_min(p_true, LOG_FLOOR)))


def query_loss(probabilities: Tensor, ground_truth: np.ndarray) -> Tensor:
    """Negative log-likelihood of the query pixels under the forward pass."""
    return cross_entropy_loss(probabilities, ground_truth)


def support_loss(probabilities: Tensor, ground_truth: np.ndarray,
                 n_ways: int, k_shot: int) -> Tensor:
    """Negative log-likelihood of the support pixels under the reversed pass.

    The prediction tensor must cover all n*k support images; the average
    runs over that whole set.
    """
    if probabilities.shape[0] != n_ways * k_shot:
        raise ContractViolationError(
            f"reversed predictions cover {probabilities.shape[0]} images, "
            f"episode has n*k = {n_ways * k_shot}"
        )
    return cross_entropy_loss(probabilities, ground_truth)


def proto_loss(query: Tensor, support: Tensor | None, config: LossConfig) -> Tensor:
    """Sum of the two directions, or the query direction alone."""
    if config.bidirectional:
        if support is None:
            raise ContractViolationError("bidirectional loss needs the support term")
        return query + support
    return query


def dice_loss(probabilities: Tensor, ground_truth: np.ndarray,
              smooth: float = 1.0) -> Tensor:
    """Soft Dice: one minus the mean per-class overlap coefficient."""
    _check_alignment(probabilities, ground_truth)
    onehot = _one_hot(ground_truth, probabilities.shape[-1], probabilities.data.dtype)
    axes = (0, 1, 2)
    intersection = tsum(probabilities * onehot, axis=axes)
    cardinality = tsum(probabilities, axis=axes) + onehot.sum(axis=axes)
    score = (2.0 * intersection + smooth) / (cardinality + smooth)
    return 1.0 - tmean(score)


def focal_loss(probabilities: Tensor, ground_truth: np.ndarray,
               gamma: float = 2.0) -> Tensor:
    """Mean of (1 - p_true)^gamma * -log p_true; gamma 0 reduces to
    cross-entropy exactly."""
    p_true = _true_class_probs(probabilities, ground_truth)
    modulator = power(1.0 - p_true, float(gamma))
    return tmean(modulator * -tlog(clamp_min(p_true, LOG_FLOOR)))


def pretrain_loss(probabilities: Tensor, ground_truth: np.ndarray,
                  config: LossConfig | None = None) -> LossBreakdown:
    """Weighted cross-entropy + Dice + focal combination."""
    config = config or LossConfig()
    ce = cross_entropy_loss(probabilities, ground_truth)
    dice = dice_loss(probabilities, ground_truth, smooth=config.dice_smooth)
    focal = focal_loss(probabilities, ground_truth, gamma=config.focal_gamma)
    total = config.ce_weight * ce + config.dice_weight * dice + config.focal_weight * focal
    return LossBreakdown(
        total=total,
        ce=float(ce.data),
        dice=float(dice.data),
        focal=float(focal.data),
    )


def regularization(parameters) -> Tensor:
    """Squared L2 norm of a parameter collection (dict or iterable)."""
    tensors = list(parameters.values()) if isinstance(parameters, dict) else list(parameters)
    total = Tensor(0.0)
    for t in tensors:
        total = total + tsum(t * t)
    return total


def finetune_loss(proto: Tensor, head_parameters, config: LossConfig | None = None,
                  query: Tensor | None = None, support: Tensor | None = None) -> LossBreakdown:
    """Prototypical loss plus weight penalty on the adaptation parameters."""
    config = config or LossConfig()
    reg = regularization(head_parameters)
    total = proto + config.reg_weight * reg
    return LossBreakdown(
        total=total,
        proto=float(proto.data),
        reg=float(reg.data),
        query=float(query.data) if query is not None else 0.0,
        support=float(support.data) if support is not None else 0.0,
    )
