"""Parameter-efficient fine-tuning toolkit for 3D convolutional segmentation
under domain shift: backbone, residual conv adapters, freeze policies,
synthetic two-domain cohorts, and a BraTS-style metric suite."""

__version__ = "0.1.0"

from .conv_adapter import AdapterConfig, AdapterVariant, Placement, attach_adapters
from .mednext_backbone import ModelConfig, build_backbone, count_parameters, mednext_s
from .peft_engine import FreezePolicy, Mode, apply_policy
from .synthetic_cohort import CohortSpec, Domain, generate_case, generate_cohort
from .trainer import TrainConfig, composite_loss, evaluate, train
from .volume_io import LabelMap, Volume, load_case, to_canonical, z_normalize

__all__ = [
    "AdapterConfig", "AdapterVariant", "Placement", "attach_adapters",
    "ModelConfig", "build_backbone", "count_parameters", "mednext_s",
    "FreezePolicy", "Mode", "apply_policy",
    "CohortSpec", "Domain", "generate_case", "generate_cohort",
    "TrainConfig", "composite_loss", "evaluate", "train",
    "LabelMap", "Volume", "load_case", "to_canonical", "z_normalize",
    "__version__",
]
