"""Unsupervised joint affine + diffeomorphic 3D registration toolkit."""

from attnreg.volume import (
    Volume,
    SegMask,
    load_volume,
    save_volume,
    load_mask,
    save_mask,
    resample_isotropic,
    mask_and_crop,
    normalize_intensity,
)
from attnreg.fieldops import (
    AffineParams,
    VectorField,
    JacobianStats,
    load_field,
    save_field,
    affine_to_displacement,
    warp,
    compose,
    exponentiate,
    jacobian_stats,
)
from attnreg.synth import SynthConfig, SyntheticPair, generate_pair, pair_seed
from attnreg.losses import (
    LossWeights,
    LossBreakdown,
    lncc,
    similarity_losses,
    smoothness,
    dice_loss,
    total_loss,
)
from attnreg.metrics import OverlapMetrics, EvalReport, overlap_metrics, assd, evaluate_stage
from attnreg.networks import (
    AblationFlags,
    NetworkConfig,
    RegistrationNetwork,
    FullForwardOutputs,
    full_forward,
)
from attnreg.checkpoint import CheckpointBundle, save_checkpoint, load_checkpoint
from attnreg.training import TrainConfig, RunManifest, train, register, run_ablation

__version__ = "0.1.0"

__all__ = [
    "Volume",
    "SegMask",
    "load_volume",
    "save_volume",
    "load_mask",
    "save_mask",
    "resample_isotropic",
    "mask_and_crop",
    "normalize_intensity",
    "AffineParams",
    "VectorField",
    "JacobianStats",
    "load_field",
    "save_field",
    "affine_to_displacement",
    "warp",
    "compose",
    "exponentiate",
    "jacobian_stats",
    "SynthConfig",
    "SyntheticPair",
    "generate_pair",
    "pair_seed",
    "LossWeights",
    "LossBreakdown",
    "lncc",
    "similarity_losses",
    "smoothness",
    "dice_loss",
    "total_loss",
    "OverlapMetrics",
    "EvalReport",
    "overlap_metrics",
    "assd",
    "evaluate_stage",
    "AblationFlags",
    "NetworkConfig",
    "RegistrationNetwork",
    "FullForwardOutputs",
    "full_forward",
    "CheckpointBundle",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "RunManifest",
    "train",
    "register",
    "run_ablation",
    "__version__",
]
