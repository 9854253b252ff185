"""Gradual fusion transformer for multimodal re-identification, on a small numpy autodiff."""

from .config import RunConfig, load_config
from .data import DatasetSplit, MultimodalSample, SyntheticSpec, generate_synthetic, load_directory
from .estimator import GraftReID, check_multimodal_input
from .evaluate import cmc_and_map, evaluate
from .experiment import train_pipeline
from .losses import LossWeights, TripletScheme
from .model import GraftConfig, GraftModel
from .prune import PrunePlan, iterative_prune_finetune
from .train import StageConfig, Trainer

__all__ = [
    "DatasetSplit", "GraftConfig", "GraftModel", "GraftReID", "LossWeights", "MultimodalSample", "PrunePlan",
    "RunConfig", "StageConfig", "SyntheticSpec", "Trainer", "TripletScheme", "check_multimodal_input",
    "cmc_and_map", "evaluate", "generate_synthetic", "iterative_prune_finetune", "load_config",
    "load_directory", "train_pipeline",
]
