"""Joint embedding of several knowledge graphs for link prediction and
cross-graph entity linkage."""

from .context import ContextCache
from .evaluate import auprc, filtered_rank, link_prediction_metrics, linkage_score
from .model import VARIANTS, ModelConfig, ParamSet, forward, score_triples
from .store import LinkageLabelSet, MultiGraphStore, load_graphs, split_dataset
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["ContextCache", "auprc", "filtered_rank", "link_prediction_metrics", "linkage_score", "VARIANTS",
           "ModelConfig", "ParamSet", "forward", "score_triples", "LinkageLabelSet", "MultiGraphStore",
           "load_graphs", "split_dataset", "TrainConfig", "train", "__version__"]
