"""Small numpy-based convnet framework with a residual attention gate.

The public surface is re-exported here; submodules stay importable directly
for the finer-grained helpers.
"""

from . import autodiff, bam, data, layers, models, profiler, tensor, train
from .autodiff import Node, Tape, grad_check, no_grad
from .bam import BamConfig, bam_forward, bam_params
from .errors import (BamnetError, DataFormatError, NumericError, ShapeError,
                     UsageError)
from .models import (Model, ModelSpec, build, checkpoint_load, checkpoint_save,
                     get_spec, spec_library)
from .profiler import cost_report, count_macs, count_params
from .tensor import Tensor, make_rng
from .train import TrainConfig, ablation_grid, evaluate, export_attention, run_training

__version__ = "0.1.0"

__all__ = [
    "autodiff", "bam", "data", "layers", "models", "profiler", "tensor",
    "train", "Node", "Tape", "grad_check", "no_grad", "BamConfig",
    "bam_forward", "bam_params", "BamnetError", "DataFormatError",
    "NumericError", "ShapeError", "UsageError", "Model", "ModelSpec", "build",
    "checkpoint_load", "checkpoint_save", "get_spec", "spec_library",
    "cost_report", "count_macs", "count_params", "Tensor", "make_rng",
    "TrainConfig", "ablation_grid", "evaluate", "export_attention",
    "run_training", "__version__",
]
