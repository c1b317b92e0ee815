"""headfit: full-head morphable model fitting and benchmarking.

Decode a linear head model, render it differentiably (weak-perspective
camera, spherical-harmonic shading, soft silhouette), score it with the
complete loss suite, recover parameters by gradient descent with the
multi-crop / multi-pose consistency scheme, and benchmark meshes against
ground truth.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend
from .errors import ContractError, FormatError, NumericalError
from .fitting import (
    FitConfig,
    FitReport,
    Observation,
    ObservationGrid,
    dice_consistency_terms,
    fit,
    generate_crops,
    scale_consistency_loss,
)
from .losses import (
    EmbeddingVector,
    Landmarks2D,
    LossWeights,
    MeanPatchEmbedder,
    BoxPyramidFeatures,
    adversarial_value,
    composite_valid,
    dice_loss,
    edge_loss,
    encoder_loss,
    hole_valid_losses,
    identity_loss,
    landmark_loss,
    perceptual_loss,
    photometric_loss,
    regularization,
)
from .model import (
    HeadParams,
    ModelAsset,
    TriMesh,
    decode_albedo,
    decode_geometry,
    embed_landmarks,
    synth_model,
)
from .registration import (
    EvalReport,
    RigidTransform,
    displacement_transfer,
    error_stats,
    icp_refine,
    point_to_surface,
    refit_model_to_mesh,
    region_error,
    umeyama_align,
)
from .render import (
    ImagePlane,
    RenderOut,
    SoftMask,
    project,
    rasterize_soft,
    render_head,
    shade_sh,
    vertex_normals,
)
