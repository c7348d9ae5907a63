"""Few-shot image classification with local-level feature strategies."""

from .ablation import AblationConfig, run_ablation
from .backbone import (
    DESK_ARCH,
    Arch,
    BackboneParams,
    FeatureMap,
    extract_features,
    forward_features,
    global_feature,
    init_params,
    load_checkpoint,
    local_classify,
    save_checkpoint,
)
from .data import Corpus, Episode, generate_glyph_corpus, load_corpus, sample_episode, write_corpus
from .estimators import LocalFeatureExtractor, LocalPrototypeClassifier
from .evaluation import EvalReport, evaluate
from .heatmap import export_heatmap
from .losses import LossWeights, total_objective
from .metric import MetricConfig, Prototype, combined_distance, compute_prototypes, predict
from .training import TrainConfig, preset_config, pretrain, train
from .transfer import TransferConfig, base_similar_map, refine_map

__version__ = "0.1.0"
