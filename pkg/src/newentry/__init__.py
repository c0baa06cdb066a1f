"""Reply prediction for newcomers in multi-party conversations.

The package couples an unsupervised topic/discourse model over conversation
bags-of-words with a hierarchical recurrent classifier that scores whether a
newcomer's first message will receive a reply.  All numerics run on a small
reverse-mode autodiff engine backed by numpy.
"""

from .autodiff import Tensor, Tape, backward, finite_diff_check, precision
from .corpus import (CorpusError, DataBundle, NewEntryInstance,
                     RawConversation, RawTurn, Vocab, build_bundle,
                     corpus_stats, read_conversations, write_conversations)
from .evaluation import (EvalError, MetricsReport, auc_score,
                         bow_logistic_baseline, classification_metrics,
                         npmi_coherence, positive_class_weight,
                         topic_similarity)
from .layers import Adam, OptimError, clip_global_norm
from .rng import Streams, stream
from .snp import SnpConfig, SnpError, SnpParams, init_snp
from .synthetic import SyntheticConfig, SyntheticError, generate_synthetic
from .tdm import TdmConfig, TdmError, TdmParams, init_tdm, tdm_loss, topic_report
from .trainer import (TrainConfig, Trainer, TrainerError, TrainResult,
                      joint_train, learning_rate_grid, load_checkpoint,
                      restore_model, save_checkpoint)

__all__ = [
    "Adam",
    "CorpusError",
    "DataBundle",
    "EvalError",
    "MetricsReport",
    "NewEntryInstance",
    "OptimError",
    "RawConversation",
    "RawTurn",
    "SnpConfig",
    "SnpError",
    "SnpParams",
    "Streams",
    "SyntheticConfig",
    "SyntheticError",
    "Tape",
    "TdmConfig",
    "TdmError",
    "TdmParams",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "Trainer",
    "TrainerError",
    "Vocab",
    "auc_score",
    "backward",
    "bow_logistic_baseline",
    "build_bundle",
    "classification_metrics",
    "clip_global_norm",
    "corpus_stats",
    "finite_diff_check",
    "generate_synthetic",
    "init_snp",
    "init_tdm",
    "joint_train",
    "learning_rate_grid",
    "load_checkpoint",
    "npmi_coherence",
    "positive_class_weight",
    "precision",
    "read_conversations",
    "restore_model",
    "save_checkpoint",
    "stream",
    "tdm_loss",
    "topic_report",
    "topic_similarity",
    "write_conversations",
]

__version__ = "0.1.0"
