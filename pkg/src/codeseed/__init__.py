"""Next-token suggestion for Java source with frozen RNN/GRU encoders and an attention head."""

from .corpus import LexError, TokenSequence, load_corpus, normalize_source, split_folds
from .evaluation import MetricReport, anova_oneway, evaluate_model
from .models import BaseLM, BaseLMConfig, TransferModel, build_transfer, predict_topk
from .training import TrainConfig, finetune, load_bundle, pretrain, save_bundle
from .vocab import Vocabulary, build_vocabulary

__version__ = "0.1.0"

__all__ = [
    "BaseLM", "BaseLMConfig", "LexError", "MetricReport", "TokenSequence", "TrainConfig",
    "TransferModel", "Vocabulary", "anova_oneway", "build_transfer", "build_vocabulary",
    "evaluate_model", "finetune", "load_bundle", "load_corpus", "normalize_source",
    "predict_topk", "pretrain", "save_bundle", "split_folds",
]
