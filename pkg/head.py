"""
Feature fusion and the trainable action classifier.

Multi-label heads score each class with a sigmoid and train on the mean
per-class binary cross-entropy; single-label heads use softmax cross-entropy.
Only this module carries gradients.
"""
import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple, Union
import numpy as np

from config import HeadConfig
from tensor_core import Tensor, sigmoid, softmax

logger = logging.getLogger(__name__)

Labels = Union[int, Iterable[int]]


@dataclass(frozen=True)
class ClassifierParams:
    weights: Tensor
    bias: Tensor
    mode: str = "multilabel"

    def __post_init__(self):
        if self.mode not in ("multilabel", "singlelabel"):
            raise ValueError(f"mode must be 'multilabel' or 'singlelabel', got {self.mode!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent classifier shapes: weights {self.weights.shape}, bias {self.bias.shape}")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def fused_dim(self) -> int:
        return self.weights.shape[1]


def zero_params(num_classes: int, fused_dim: int, mode: str = "multilabel") -> ClassifierParams:
    return ClassifierParams(np.zeros((num_classes, fused_dim)), np.zeros(num_classes), mode)


def fuse(actor: Tensor, scene: Optional[Tensor] = None, longterm: Optional[Tensor] = None,
         dims: Optional[Tuple[int, Optional[int], Optional[int]]] = None) -> Tensor:
    """
    Concatenate (actor, scene, longterm), skipping absent parts. ``dims`` holds
    the configured lengths; a present part of another length is rejected.
    """
    parts = [("actor", actor), ("scene", scene), ("longterm", longterm)]
    pieces = []
    for i, (name, part) in enumerate(parts):
        if part is None:
            if i == 0:
                raise ValueError("fuse requires the actor feature")
            continue
        part = np.asarray(part, dtype=np.float64).reshape(-1)
        if dims is not None and dims[i] is not None and part.shape[0] != dims[i]:
            raise ValueError(f"{name} feature has length {part.shape[0]}, configured {dims[i]}")
        pieces.append(part)
    return np.concatenate(pieces)


def _logits(params: ClassifierParams, fused: Tensor) -> Tensor:
    fused = np.asarray(fused, dtype=np.float64)
    if fused.shape[-1] != params.fused_dim:
        raise ValueError(f"fused feature length {fused.shape[-1]} does not match classifier input {params.fused_dim}")
    return fused @ params.weights.T + params.bias


def classify(params: ClassifierParams, fused: Tensor) -> Tensor:
    """Class scores for one fused vector (or a batch along the leading axis)."""
    z = _logits(params, fused)
    if params.mode == "multilabel":
        return sigmoid(z)
    return softmax(z, axis=-1)


def _label_ids(labels: Labels) -> List[int]:
    if isinstance(labels, (int, np.integer)):
        return [int(labels)]
    return [int(c) for c in labels]


def label_vector(params: ClassifierParams, labels: Labels) -> Tensor:
    k = params.num_classes
    ids = _label_ids(labels)
    if params.mode == "singlelabel" and len(ids) != 1:
        raise ValueError(f"single-label mode expects exactly one class, got {ids}")
    y = np.zeros(k)
    for c in ids:
        if not 0 <= c < k:
            raise ValueError(f"label {c} outside the {k} classes")
        y[c] = 1.0
    return y


def loss_and_grad(params: ClassifierParams, fused: Tensor, labels: Labels) -> Tuple[float, ClassifierParams]:
    fused = np.asarray(fused, dtype=np.float64).reshape(-1)
    y = label_vector(params, labels)
    z = _logits(params, fused)
    if params.mode == "multilabel":
        # mean over classes of softplus(z) - y z
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (sigmoid(z) - y) / params.num_classes
    else:
        m = z.max()
        log_norm = m + np.log(np.exp(z - m).sum())
        loss = float(log_norm - z @ y)
        dz = softmax(z) - y
    grad = ClassifierParams(np.outer(dz, fused), dz, params.mode)
    return loss, grad


def lr_at(iteration: int, hyper: HeadConfig) -> float:
    """Linear warmup then step decay; plain constant lr when both are off."""
    lr = hyper.lr * hyper.lr_decay ** sum(1 for step in hyper.lr_steps if iteration >= step)
    if iteration < hyper.warmup_iters:
        alpha = iteration / hyper.warmup_iters
        lr *= hyper.warmup_factor * (1.0 - alpha) + alpha
    return lr


def train_classifier(dataset: Sequence[Tuple[Tensor, Labels]], hyper: HeadConfig,
                     num_classes: Optional[int] = None) -> ClassifierParams:
    """
    Mini-batch SGD from zero parameters. Dropout is applied to the fused
    vector; weight decay applies to the weights, not the bias. Without
    num_classes the class count is the largest label + 1.
    """
    if not dataset:
        raise ValueError("train_classifier requires a nonempty dataset")
    if num_classes is None:
        num_classes = 1 + max(max(_label_ids(labels), default=0) for _, labels in dataset)
    features = np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f, _ in dataset])
    params = zero_params(num_classes, features.shape[1], hyper.mode)
    targets = [labels for _, labels in dataset]
    rng = np.random.default_rng(hyper.seed)
    batch = min(hyper.batch_size, len(dataset))
    weights, bias = params.weights.copy(), params.bias.copy()
    for it in range(hyper.iters):
        lr = lr_at(it, hyper)
        indices = np.sort(rng.choice(len(dataset), size=batch, replace=False))
        x = features[indices]
        if hyper.dropout > 0.0:
            keep = rng.random(x.shape) >= hyper.dropout
            x = np.where(keep, x / (1.0 - hyper.dropout), 0.0)
        current = ClassifierParams(weights, bias, hyper.mode)
        grad_w = np.zeros_like(weights)
        grad_b = np.zeros_like(bias)
        total = 0.0
        for row, idx in zip(x, indices):
            loss, grad = loss_and_grad(current, row, targets[idx])
            grad_w += grad.weights
            grad_b += grad.bias
            total += loss
        weights = weights - lr * (grad_w / batch + hyper.weight_decay * weights)
        bias = bias - lr * (grad_b / batch)
        if it % 100 == 0 or it == hyper.iters - 1:
            logger.debug("head iter %d lr %.4g loss %.6f", it, lr, total / batch)
    return ClassifierParams(weights, bias, hyper.mode)


@dataclass(frozen=True)
class FeatureScaler:
    """Per-dimension standardization fitted on the training features."""
    mean: Tensor
    std: Tensor

    @classmethod
    def fit(cls, features: Tensor, eps: float = 1e-8) -> "FeatureScaler":
        features = np.asarray(features, dtype=np.float64)
        std = features.std(axis=0)
        return cls(features.mean(axis=0), np.where(std > eps, std, 1.0))

    def __call__(self, features: Tensor) -> Tensor:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std


def accuracy(params: ClassifierParams, dataset: Sequence[Tuple[Tensor, Labels]]) -> float:
    """Top-1 accuracy for single-label heads; exact label-set match at 0.5 for multi-label."""
    correct = 0
    for fused, labels in dataset:
        scores = classify(params, fused)
        if params.mode == "singlelabel":
            correct += int(np.argmax(scores) == int(np.argmax(label_vector(params, labels))))
        else:
            correct += int(np.array_equal(scores >= 0.5, label_vector(params, labels) > 0))
    return correct / len(dataset)


def restrict_to_actor(params: ClassifierParams, actor_dim: int) -> ClassifierParams:
    """Zero every weight outside the actor block of the fused vector."""
    weights = params.weights.copy()
    weights[:, actor_dim:] = 0.0
    return replace(params, weights=weights)
