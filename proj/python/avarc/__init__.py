"""Next-scale autoregressive generative classifier."""

from ._avarc import (
    AvarcError,
    Model,
    ScaleSchedule,
    TokenMap,
    Tokenizer,
    classify,
    classify_exhaustive,
    contrastive_pmi,
    default_plan,
    finetune_cca,
    heatmap,
    log_likelihood,
    posterior,
    score_labels,
    token_log_probs,
    token_pmi,
    topk_accuracy,
    train_mle,
    train_tokenizer,
)

__all__ = [
    "AvarcError",
    "Model",
    "ScaleSchedule",
    "TokenMap",
    "Tokenizer",
    "classify",
    "classify_exhaustive",
    "contrastive_pmi",
    "default_plan",
    "finetune_cca",
    "heatmap",
    "log_likelihood",
    "posterior",
    "score_labels",
    "token_log_probs",
    "token_pmi",
    "topk_accuracy",
    "train_mle",
    "train_tokenizer",
]
