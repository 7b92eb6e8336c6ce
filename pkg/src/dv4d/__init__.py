"""Dynamic 4D reconstruction from multi-view clips.

Point-map prediction with motion-aware temporal attention, future-point
forecasting, and velocity-carrying Gaussian splatting, all on a
numpy-based reverse-mode autodiff core.  Everything here is desk scale:
small models, synthetic clips, minutes of training.
"""

from .numerics import (
    DiffTensor,
    GradCheckReport,
    default_dtype,
    grad_check,
    set_default_dtype,
    tensor,
)
from .container import (
    ChecksumError,
    ContainerError,
    FormatError,
    TruncationError,
    VersionError,
    read_bundle,
    read_tensor,
    write_bundle,
    write_tensor,
)
from .geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    PointMap,
    RigidTransform,
    camera_decode,
    camera_encode,
    project,
    read_pointmap,
    unproject,
    write_pointmap,
)
from .synth import (
    SKY_COLOR,
    Clip,
    ObjectSpec,
    SceneSpec,
    future_pointmap,
    generate_clip,
    random_scene_spec,
    read_clip,
    write_clip,
)
from .encoder import EncoderConfig, TokenSet, aa_forward, init_encoder_params
from .mta import MtaConfig, init_mta_params, mta_forward
from .heads import (
    GaussianSet,
    HeadConfig,
    advect,
    camera_from_vector,
    init_gaussians,
    read_gaussians,
    write_gaussians,
)
from .rasterizer import RenderOutput, render, render_scene_file
from .losses import LossWeights, stage1_total, stage2_total
from .metrics import (
    MetricReport,
    SimilarityTransform,
    accuracy_completeness,
    depth_metrics,
    image_metrics,
    normal_consistency,
    umeyama_align,
)
from .model import (
    ClipPrediction,
    Model,
    ModelConfig,
    forward,
    init_model,
    load_model,
    save_model,
)
from .harness import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    generate_dataset,
    lr_schedule,
    train_stage,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CameraExtrinsics",
    "CameraIntrinsics",
    "ChecksumError",
    "Clip",
    "ClipPrediction",
    "ContainerError",
    "DiffTensor",
    "EncoderConfig",
    "FormatError",
    "GaussianSet",
    "GradCheckReport",
    "HeadConfig",
    "LossWeights",
    "MetricReport",
    "Model",
    "ModelConfig",
    "MtaConfig",
    "ObjectSpec",
    "PointMap",
    "RenderOutput",
    "RigidTransform",
    "SKY_COLOR",
    "SceneSpec",
    "SimilarityTransform",
    "TokenSet",
    "TrainConfig",
    "TrainingDiverged",
    "TruncationError",
    "VersionError",
    "aa_forward",
    "accuracy_completeness",
    "advect",
    "camera_decode",
    "camera_encode",
    "camera_from_vector",
    "default_dtype",
    "depth_metrics",
    "evaluate",
    "forward",
    "future_pointmap",
    "generate_clip",
    "generate_dataset",
    "grad_check",
    "image_metrics",
    "init_encoder_params",
    "init_gaussians",
    "init_model",
    "init_mta_params",
    "load_model",
    "lr_schedule",
    "mta_forward",
    "normal_consistency",
    "project",
    "random_scene_spec",
    "read_bundle",
    "read_clip",
    "read_gaussians",
    "read_pointmap",
    "read_tensor",
    "render",
    "render_scene_file",
    "save_model",
    "set_default_dtype",
    "stage1_total",
    "stage2_total",
    "tensor",
    "train_stage",
    "umeyama_align",
    "unproject",
    "write_bundle",
    "write_clip",
    "write_gaussians",
    "write_pointmap",
    "write_tensor",
]
