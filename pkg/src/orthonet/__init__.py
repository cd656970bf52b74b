"""Orthogonality-constrained training of feed-forward networks in fp64 NumPy."""

from .errors import (
    BatchSizeError, CheckpointError, DecompositionError, DimensionError, ManifoldError,
    NumericError, OrthoNetError, ParseError, RankError, RetractionError, SpecError,
    TraceError, TrainingDiverged,
)
from .linalg import frobenius_norm, matmul, power_iteration_sigma_max, qr, svd
from .network import (
    Batch, ConvAsMatrix, Dense, MaxPool, Norm, ReLU, SoftmaxCE, backward, build_network, forward,
)
from .norm import NormState, bbn_clamp, bn_backward, bn_forward, effective_transform
from .optim import (
    MomentumState, OrthoConfig, orthogonal_init, sgd_momentum_step, soft_ortho_penalty,
    srip_penalty, stiefel_retract, stiefel_tangent_project, svb_project,
)
from .probe import induced_linear_map, isometry_ratio_stats, layer_spectra, local_region_radius
from .train import TrainConfig, Trainer, evaluate, lr_schedule, train_loop

__version__ = "0.1.0"
