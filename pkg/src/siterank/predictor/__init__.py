"""Location-based predictors for site objectives, score, and importances.

Two modes: a state-keyed lookup table with inverse-distance interpolation
feeding a feedforward head, or a two-stage network that predicts the
objectives itself before scoring them.
"""

from siterank.predictor.lookup import LookupTable, build_lookup, predict_objectives
from siterank.predictor.metrics import EvalMetrics, evaluate
from siterank.predictor.network import (
    FeedForwardNet,
    Head,
    TrainConfig,
    TrainingDivergedError,
    TwoStageNet,
    gradient_check,
    train_network,
)
from siterank.predictor.model import SitePredictor, assemble_samples, load_predictor, save_predictor, train_predictor
