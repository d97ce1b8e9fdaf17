"""Hard-group mining + entropic optimal transport + margin softmax,
fused into one differentiable training objective, at desk scale."""

from .backbone import BackboneConfig, ForwardOutput, forward, init_params, \
    to_distribution
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    NumericalRegimeError,
    OTFaceError,
    ShapeMismatchError,
)
from .losses import (
    ClassifierWeights,
    LossBreakdown,
    MarginConfig,
    cross_entropy,
    focal_reweight,
    hard_example_filter,
    margin_logits,
    ot_triplet_loss,
    otface_loss,
    per_sample_cross_entropy,
)
from .mining import HardGroup, LabeledBatch, mine_hard_groups
from .ot import (
    SinkhornConfig,
    TransportPlan,
    build_cost,
    exact_ot_uniform,
    ot_distance,
    sinkhorn,
    sinkhorn_log_domain,
)
from .tensor import (
    EPS_NORM,
    Tensor,
    conv2d,
    cosine_distance,
    cosine_similarity,
    l2_normalize,
    normalize_cols,
    normalize_rows,
)
from .trainer import TrainConfig, Trainer, TrainState, lr_at, sgd_step

__version__ = "0.1.0"
