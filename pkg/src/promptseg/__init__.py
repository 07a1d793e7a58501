"""Promptable segmentation with a decoupled IoU/mask decoder.

Mask generation runs on frozen, precomputed image embeddings and is fused
with (but never steered by) prompt-conditioned attention features, so poor
automatic prompts cannot corrupt the predicted mask. The package covers the
full desk-scale workflow: dataset manifests, the embedding cache, prompt
generation and frozen encoding, both decoder branches, training, and the
leave-one-site-out evaluation harness with its ablations.
"""

from .data import (
    DatasetManifest,
    EvalPlan,
    SampleRecord,
    SegmentationSample,
    leave_one_site_out,
    load_manifest,
    load_sample,
    split_train_val,
)
from .encoder_cache import (
    CacheIndex,
    EncoderSpec,
    ImageEmbeddingSet,
    StandinEncoder,
    cache_file_hash,
    load_embeddings,
    precompute_embeddings,
    read_cache_index,
    standin_encode,
)
from .evaluate import (
    ExperimentReport,
    MergeStrategy,
    Predictor,
    SiteReport,
    emit_overlay,
    emit_report,
    evaluate_site,
    grid_sweep,
    overall_mean,
    predict_sample,
    run_ablation,
    run_experiment,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    ce_loss,
    combined_loss,
    dice_loss,
    dice_score,
    iou_target,
    mse_loss,
)
from .mask_decoder import MaskDecoder, SEResBlock
from .prompt_iou import PromptIoUModule, extract_mask_embeddings
from .prompts import (
    FrozenPromptParams,
    PromptSet,
    encode_prompts,
    grid_points,
    sample_training_points,
    whole_image_box,
)
from .training import (
    Checkpoint,
    TrainConfig,
    TrainResult,
    freeze_audit,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
