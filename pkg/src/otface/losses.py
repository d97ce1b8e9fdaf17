"""Margin-softmax family, mining-based baseline wrappers, and the fused
OT-triplet + margin objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .mining import HardGroup, LabeledBatch, mine_hard_groups
from .ot import SinkhornConfig, ot_distance
from .tensor import Tensor, as_tensor, normalize_cols, normalize_rows

MARGIN_VARIANTS = ("plain", "additive_cosine", "additive_angular")


@dataclass
class MarginConfig:
    variant: str = "additive_cosine"
    scale: float = 30.0
    margin: float = 0.35

    def validate(self) -> "MarginConfig":
        if self.variant not in MARGIN_VARIANTS:
            raise ConfigurationError(
                f"unknown margin variant {self.variant!r}; "
                f"expected one of {MARGIN_VARIANTS}"
            )
        if self.scale <= 0.0:
            raise ConfigurationError(f"scale must be positive, got {self.scale}")
        if self.margin < 0.0:
            raise ConfigurationError(f"margin must be nonnegative, got {self.margin}")
        if self.variant == "additive_angular" and self.margin >= math.pi / 2:
            raise ConfigurationError(
                f"angular margin must be < pi/2, got {self.margin}"
            )
        if self.variant == "additive_cosine" and self.margin >= 1.0:
            raise ConfigurationError(f"cosine margin must be < 1, got {self.margin}")
        return self

    @classmethod
    def arcface_defaults(cls) -> "MarginConfig":
        return cls(variant="additive_angular", scale=64.0, margin=0.5)

    @classmethod
    def amsoftmax_defaults(cls) -> "MarginConfig":
        return cls(variant="additive_cosine", scale=30.0, margin=0.35)


class ClassifierWeights:
    """d x num_classes weight matrix, column-normalized before use."""

    def __init__(self, weights: Tensor):
        w = as_tensor(weights)
        if len(w.shape) != 2:
            raise ContractError(f"weights must be d x C, got shape {w.shape}")
        self.tensor = w

    @property
    def num_classes(self) -> int:
        return self.tensor.shape[1]

    @property
    def dim(self) -> int:
        return self.tensor.shape[0]

    def normalized(self) -> Tensor:
        return normalize_cols(self.tensor)

    @classmethod
    def init_random(cls, dim: int, num_classes: int,
                    rng: np.random.Generator) -> "ClassifierWeights":
        w = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, num_classes))
        return cls(Tensor(w, requires_grad=True))


@dataclass
class LossBreakdown:
    margin_loss: Tensor
    ot_loss: Tensor
    total: Tensor
    num_hard_groups: int


def _as_batch(embeddings: Tensor) -> Tensor:
    e = as_tensor(embeddings)
    if len(e.shape) == 1:
        e = e.reshape(1, -1)
    if len(e.shape) != 2:
        raise ContractError(f"embeddings must be (N, d) or (d,), got {e.shape}")
    return e


def margin_logits(embeddings: Tensor, weights: ClassifierWeights,
                  labels, cfg: MarginConfig) -> Tensor:
    """Scaled cosine logits with the target class penalized per variant.

    Accepts a single embedding with an int label or an (N, d) batch with
    an (N,) label array; returns logits of matching arity.
    """
    cfg.validate()
    single = len(as_tensor(embeddings).shape) == 1
    e = _as_batch(embeddings)
    labels_arr = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels_arr.shape != (e.shape[0],):
        raise ContractError(
            f"expected {e.shape[0]} labels, got shape {labels_arr.shape}"
        )
    if np.any(labels_arr < 0) or np.any(labels_arr >= weights.num_classes):
        raise ContractError(
            f"label out of range [0, {weights.num_classes}): {labels_arr}"
        )
    cosine = (normalize_rows(e) @ weights.normalized()).clip(-1.0, 1.0)
    onehot = np.zeros((e.shape[0], weights.num_classes))
    onehot[np.arange(e.shape[0]), labels_arr] = 1.0
    if cfg.variant == "plain" or cfg.margin == 0.0:
        adjusted = cosine
    elif cfg.variant == "additive_cosine":
        adjusted = cosine - cfg.margin * onehot
    else:  # additive_angular
        target = (cosine.arccos() + cfg.margin).cos()
        adjusted = cosine * (1.0 - onehot) + target * onehot
    logits = adjusted * cfg.scale
    return logits.reshape(-1) if single else logits


def per_sample_cross_entropy(logits: Tensor, labels) -> Tensor:
    """-log softmax(logits)[label] per row, via stabilized log-sum-exp."""
    single = len(as_tensor(logits).shape) == 1
    l = as_tensor(logits)
    if single:
        l = l.reshape(1, -1)
    labels_arr = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels_arr.shape != (l.shape[0],):
        raise ContractError(
            f"expected {l.shape[0]} labels, got shape {labels_arr.shape}"
        )
    shift = l.data.max(axis=1, keepdims=True)  # constant, gradient-free
    lse = (l - shift).exp().sum(axis=1).log() + Tensor(shift[:, 0])
    onehot = np.zeros(l.shape)
    onehot[np.arange(l.shape[0]), labels_arr] = 1.0
    picked = (l * onehot).sum(axis=1)
    return lse - picked


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean cross entropy; a scalar for both single rows and batches."""
    return per_sample_cross_entropy(logits, label).mean()


def focal_reweight(per_sample_losses: Tensor, gamma: float) -> Tensor:
    """Mean of (1 - p_t)^gamma * loss_t with p_t = exp(-loss_t).

    Weights are treated as constants, so gamma only rescales each
    sample's gradient.
    """
    if gamma < 0.0:
        raise ConfigurationError(f"gamma must be nonnegative, got {gamma}")
    losses = as_tensor(per_sample_losses)
    if np.any(losses.data < 0.0):
        raise ContractError("per-sample losses must be nonnegative")
    weights = (1.0 - np.exp(-losses.data)) ** gamma
    return (losses * weights).mean()


def hard_example_filter(per_sample_losses: Tensor, keep_fraction: float) -> Tensor:
    """Mean over the ceil(keep_fraction * N) largest losses; ties keep the
    lower sample index."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigurationError(
            f"keep_fraction must be in (0, 1], got {keep_fraction}"
        )
    losses = as_tensor(per_sample_losses)
    n = losses.shape[0]
    if n == 0:
        raise ContractError("batch of per-sample losses must be nonempty")
    keep = math.ceil(keep_fraction * n)
    order = np.argsort(-losses.data, kind="stable")[:keep]
    return losses.gather(order).mean()


def ot_triplet_loss(groups: list[HardGroup], distributions,
                    cfg: SinkhornConfig, hinge_margin: float = 0.0) -> Tensor:
    """Sum over hard groups of [OT(a, p) - OT(a, n) + hinge_margin]_+.

    `distributions` maps sample index -> n x d feature distribution
    tensor. OT values are cached per unordered pair (OT is symmetric in
    its arguments up to unrolling error).
    """
    if hinge_margin < 0.0:
        raise ConfigurationError(
            f"hinge_margin must be nonnegative, got {hinge_margin}"
        )
    if not groups:
        return Tensor(0.0)
    cache: dict[tuple[int, int], Tensor] = {}

    def pair_ot(i: int, j: int) -> Tensor:
        key = (i, j) if i <= j else (j, i)
        if key not in cache:
            cache[key] = ot_distance(distributions[key[0]], distributions[key[1]], cfg)
        return cache[key]

    total = None
    for g in groups:
        term = (pair_ot(g.anchor, g.positive)
                - pair_ot(g.anchor, g.negative) + hinge_margin).relu()
        total = term if total is None else total + term
    return total


def otface_loss(batch: LabeledBatch, embeddings: Tensor, distributions,
                weights: ClassifierWeights, margin_cfg: MarginConfig,
                sinkhorn_cfg: SinkhornConfig, hinge_margin: float = 0.0,
                lambda_ot: float = 1.0, cap_per_anchor: int | None = None,
                mining_enabled: bool = True) -> LossBreakdown:
    """Combined objective: margin softmax over the batch plus the OT
    triplet loss over mined hard groups.

    With mining disabled (or no groups mined) the total IS the margin
    loss tensor, so degradation to the margin-only method is exact.
    """
    margin = cross_entropy(
        margin_logits(embeddings, weights, batch.labels, margin_cfg),
        batch.labels,
    )
    groups = mine_hard_groups(batch, cap_per_anchor) if mining_enabled else []
    if not groups:
        return LossBreakdown(margin_loss=margin, ot_loss=Tensor(0.0),
                             total=margin, num_hard_groups=0)
    ot = ot_triplet_loss(groups, distributions, sinkhorn_cfg, hinge_margin)
    if lambda_ot != 1.0:
        ot = ot * lambda_ot
    return LossBreakdown(margin_loss=margin, ot_loss=ot, total=margin + ot,
                         num_hard_groups=len(groups))
