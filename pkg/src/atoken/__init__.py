"""Adaptive token pipeline: pixel scoring, multi-stage token clustering and
merging with score-biased attention, and dense feature-map reconstruction.
"""

from .fmcore import (
    CameraIntrinsics,
    FeatureMap,
    PipelineConfig,
    StageTrace,
    TokenSet,
    slice_to_tokens,
    token_centroids,
)
from .cce import (
    KeypointSet,
    ScoreMap,
    SemanticScorer,
    back_project,
    combine_scores,
    depth_score,
    focal_loss,
    ground_depth,
    keypoint_heatmap,
    select_centers,
    semantic_score,
    token_scores,
)
from .att import (
    AttentionScoreHead,
    TransformerBlock,
    assign_clusters,
    attention_scores,
    biased_attention,
    merge_clusters,
    run_att,
    transformer_stage,
)
from .mfr import MlpBlock, aggregate_stage, reconstruct, upsample_stage
from .numerics import (
    GradCheckReport,
    biased_attention_backward,
    brute_force_assign,
    fd_check,
    focal_loss_backward,
    merge_backward,
)

__version__ = "0.1.0"
