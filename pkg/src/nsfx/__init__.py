"""Noisy Softmax: annealed noise injection into the true-class logit, with hand-derived gradients."""

from .data import Dataset, DatasetSpec, load_datasets, load_mnist_idx, mean_subtract, subset_per_class, \
    synthetic_two_gaussians
from .errors import (
    ConfigError,
    ConsistencyError,
    DegenerateVectorError,
    DivergedError,
    FormatError,
    InvalidInputError,
    NonFiniteError,
    NsfxError,
    ProbeError,
    ShapeError,
)
from .gradcheck import GradReport, check_loss_gradients, check_network_gradients, finite_diff
from .losses import (
    VARIANTS,
    HeadParams,
    NoiseSpec,
    augmentation_angle,
    average_prediction,
    compute_logits,
    noise_sigma,
    noisy_backward,
    noisy_forward,
    softmax_cross_entropy,
)
from .network import LayerSpec, Network, architecture
from .numerics import Rng, cosine_angle, l2_norm, sample_abs_normal, stable_softmax
from .training import LRSchedule, MetricsRecord, TrainConfig, evaluate, lr_at, sgd_step, train

__version__ = "0.1.0"
