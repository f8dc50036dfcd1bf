"""Text-grounded layout control on synthetic scenes.

A float64 tensor engine with reverse-mode differentiation, a windowed
hierarchical encoder/decoder, deformable text-visual fusion producing a
spatial guidance map, and a toy diffusion sampler steered at test time by
gradients of an attention energy.
"""

from .autodiff import Tensor, gradient, matmul, softmax_rows
from .backbone import Backbone, FeatureMap, StageConfig, stage_grid
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .errors import (ConfigError, ConstraintError, DataError, GuidanceEmptyError,
                     NumericError, PlacementError, ShapeError, TextgroundError,
                     UnsupportedOpError, VocabularyError)
from .fusion import (DfaStageConfig, FusionBranch, FusionConfig, TextEmbedding,
                     bilinear_sample, complete_attention, extract_guidance_map)
from .guidance import (GuidanceConfig, NoiseSchedule, SampleTrace, ToyDenoiser,
                       build_noise_schedule, energy, sample_with_guidance)
from .nn import ParameterRegistry, sinusoidal_positional_encoding
from .optim import Parameter, adamw_step
from .synth import (BBox, EvalReport, Scene, embed_text_stub, evaluate_batch,
                    generate_scene, iou, predicted_box_from_guidance)
from .training import Models, TrainScene, build_models

__version__ = "0.1.0"

__all__ = [
    "Tensor", "gradient", "matmul", "softmax_rows",
    "Backbone", "FeatureMap", "StageConfig", "stage_grid",
    "load_checkpoint", "save_checkpoint",
    "RunConfig", "load_run_config",
    "TextgroundError", "ShapeError", "ConfigError", "ConstraintError",
    "VocabularyError", "PlacementError", "GuidanceEmptyError",
    "UnsupportedOpError", "NumericError", "DataError",
    "DfaStageConfig", "FusionBranch", "FusionConfig", "TextEmbedding",
    "bilinear_sample", "complete_attention", "extract_guidance_map",
    "GuidanceConfig", "NoiseSchedule", "SampleTrace", "ToyDenoiser",
    "build_noise_schedule", "energy", "sample_with_guidance",
    "ParameterRegistry", "sinusoidal_positional_encoding",
    "Parameter", "adamw_step",
    "BBox", "EvalReport", "Scene", "embed_text_stub", "evaluate_batch",
    "generate_scene", "iou", "predicted_box_from_guidance",
    "Models", "TrainScene", "build_models",
    "__version__",
]
