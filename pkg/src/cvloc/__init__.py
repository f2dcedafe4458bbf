"""Cross-view video localization as deterministic numerical operations.

Ground-view feature sequences are warped onto a metric overhead canvas,
fused with per-pixel cross-frame attention, and matched against satellite
feature maps by an uncertainty-weighted normalized cross-correlation search.
"""

from .errors import (
    AllCellsInvalid,
    BatchTooSmall,
    CVLError,
    DegenerateQuery,
    DimensionMismatch,
    EmptySequence,
    NotInFront,
    RadiusTooLarge,
    UnknownId,
)
from .estimators import CrossViewRetriever, GroundViewProjector, RetrievalRecord, SequenceFuser
from .evaluation import GeoPoint, batch_loss, geo_distance, recall_at_k, triplet_loss, triplet_loss_grad
from .fusion import ConvStack, attention_matrix, mean_fuse, pcsf_fuse, qkv_transform
from .geometry import (
    CameraIntrinsics,
    CanvasSpec,
    FeatureMap,
    GroundFrame,
    RigidPose,
    gvp_warp,
    gvp_warp_sequence,
    overhead_pixel_to_world,
    world_to_ground_pixel,
)
from .matching import (
    aligned_distance,
    best_displacement,
    ncc_field,
    shifted_view,
    uncertainty_field,
    weighted_similarity,
)

__version__ = "0.1.0"
