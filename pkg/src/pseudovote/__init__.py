"""Model-agnostic semi-supervised classification pipeline: confidence-bucketed
pseudo-labeling with hard-vote filtering, nested stratified cross-validation,
deterministic training policies, ordinal and ranking metrics, and
classifier-gated segmentation mask post-processing."""

from .core import (
    DatasetManifest,
    FormatError,
    LabelEntry,
    LabelSet,
    LabelSource,
    MaskImage,
    PipelineError,
    PredictionMatrix,
    ValidationError,
    read_labelset,
    read_manifest,
    read_mask,
    read_predictions,
    write_labelset,
    write_manifest,
    write_mask,
    write_predictions,
)
from .cv import (
    CVResult,
    FoldPlan,
    NestedSplit,
    nested_split,
    read_fold_plan,
    run_cv,
    stratified_kfold,
    write_fold_plan,
)
from .losses import (
    CompositeMode,
    CompositeSchedule,
    ProbBatch,
    composite_loss,
    cross_entropy,
    dice_loss,
    inverse_frequency_weights,
    soft_kappa_loss,
)
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    confusion_matrix,
    dice_coefficient,
    evaluate_classification,
    evaluate_predictions,
    iou,
    macro_auc_ovo,
    quadratic_weighted_kappa,
)
from .pseudo import (
    UNSURE,
    ConfidenceBuckets,
    PseudoLabelBatch,
    RoundConfig,
    RoundState,
    VoteRecord,
    assemble_training_set,
    bucket_predictions,
    build_pseudo_batch,
    ensemble,
    hard_vote_filter,
    run_round,
)
from .seggate import (
    PresenceVerdict,
    SegReport,
    evaluate_segmentation,
    gate_masks,
)
from .trainer import (
    Checkpoint,
    LossKind,
    LossSpec,
    PlateauPolicy,
    ReferenceModel,
    TrainerConfig,
    adam_step,
    exponential_lr,
    finetune,
    plateau_policy_step,
    read_checkpoint,
    train,
    write_checkpoint,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
