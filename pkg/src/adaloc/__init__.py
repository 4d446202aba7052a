"""Key-based usage control for small ReLU networks.

A model is locked by zeroing a compact key of high-l1-norm units (and the
weights that read from them), adapted to new data by training only the key
coordinates, and unlocked by writing the refreshed key back.
"""

from .adaptation import TrainConfig, UpdateMask, finetune, masked_sgd_step, param_distance
from .bounds import (
    BoundConstants,
    BoundReport,
    VarianceProfile,
    distance_threshold,
    gradient_ordering_check,
    mc_output_variance,
    slack_report,
    spectral_norm,
    variance_bound,
)
from .data import Dataset, EvalReport, evaluate, gen_blobs, load_csv, load_idx
from .errors import (
    AdalocError,
    AdaptabilityViolation,
    ContractError,
    DimensionError,
    FingerprintError,
    KeyValidationError,
    NumericError,
    ParseError,
    StaleKeyError,
)
from .keying import Key, KeySpec, baseline_key, localize_key, sample_key_pool, unit_l1_norms
from .locking import LockedModel, lock, reference_model, refresh_key, unlock
from .network import Conv, Dense, NetworkSpec, ParameterStore, forward, index_map, init_network, pre_activations

__version__ = "0.1.0"
