"""Sequential recommendation with a time-aware delta-rule long branch and a short-window attention branch."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    DatasetSplit,
    DecomposedSequence,
    InteractionEvent,
    LogFormat,
    UserSequence,
    build_sequences,
    decompose,
    filter_sequences,
    generate_synthetic_drift,
    leave_one_out_split,
    make_batches,
    parse_interaction_log,
    reindex_items,
    to_batch,
)
from .eval import (
    RankingResult,
    Variant,
    auc,
    build_variant,
    evaluate,
    hit_rate_at_k,
    ndcg_at_k,
    rank_scores,
    run_ablation,
    summarize,
    throughput_bench,
)
from .model import (
    Batch,
    HyTRecModel,
    LayerKind,
    LayerSchedule,
    ModelConfig,
    build_layer_schedule,
    count_parameters,
    forward,
    fuse_branches,
    init_model,
    long_branch_forward,
    predict_scores,
    short_branch_forward,
)
from .nn import layer_norm, linear_attention_baseline, softmax_attention
from .tadn import (
    compute_gates,
    compute_temporal_decay,
    delta_rule_closed_form,
    delta_rule_scan,
    fuse_features,
    init_tadn_params,
    tadn_closed_form,
    tadn_layer_forward,
    tadn_scan,
)
from .tensor import GradientTape, NonFiniteError, Tensor
from .train import NumericError, TrainConfig, gradcheck_model, load_model, save_model, train_loop

__version__ = "0.1.0"
