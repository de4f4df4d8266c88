"""Segmentation under joint semantic and covariate shift, at desk scale."""

from .core import (
    OOD_ID,
    IGNORE_ID,
    AugmentedPair,
    IndexSets,
    LabelSpace,
    SegSample,
    build_index_sets,
    validate_sample,
)
from .heads import (
    FeatureBundle,
    HeadMode,
    UncertaintyHead,
    anomaly_score,
    init_from_class_head,
    mask_msp_uncertainty,
    pixel_energy_uncertainty,
)
from .losses import (
    LossWeights,
    Margins,
    PairSampler,
    SelectionMask,
    build_selection_mask,
    margin_hinge,
    relative_contrastive_loss,
    selective_cross_entropy,
    selective_dice_bce,
    total_loss,
)
from .metrics import (
    MetricsReport,
    MetricUndefinedError,
    ScoredPixels,
    auroc,
    average_precision,
    fpr_at_95_tpr,
    miou_macc,
)

__version__ = "0.1.0"
