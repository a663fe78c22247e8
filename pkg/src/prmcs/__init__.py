"""Perturbation-robust multilingual caption scoring toolkit."""

from .embed import (
    EmbeddingMatrix,
    EncoderParams,
    ManifestEntry,
    cosine,
    encode_text,
    hash_token,
    init_params,
    load_matrix,
    load_params,
    save_matrix,
    save_params,
)
from .evalstats import DropReport, RatingPairs, drop_report, kendall_tau_c, pearson
from .losses import (
    LossWeights,
    TripletBatch,
    finite_diff_check,
    grad_total,
    loss_clip,
    loss_distill_mse,
    loss_l1,
    loss_l2,
    loss_l3,
    loss_total,
)
from .metric import MetricConfig, ScoreRow, mcs, score_dataset
from .rng import RngStream
from .textproc import (
    KINDS,
    MASK_TOKEN,
    CaptionRecord,
    detokenize,
    perturb_jumble,
    perturb_masking,
    perturb_record,
    perturb_removal,
    perturb_repetition,
    perturb_substitution,
    tokenize,
)
from .trainer import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    synth_dataset,
    train_distill,
    train_few_shot,
    train_pr,
)

__version__ = "0.1.0"
