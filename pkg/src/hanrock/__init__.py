"""Hierarchical attention networks trained with auxiliary supervision.

The package covers a numpy autodiff engine, GRU/attention layers, the flat
multi-task HAN and HAN-ROCK models, auxiliary-target construction, mutual
information based loss weighting, training with random search and median
stopping, bootstrap model comparison and attention reports.
"""

from .corpus import Corpus, TaskKind, generate_synthetic
from .estimator import HanRockClassifier, HanRockRegressor
from .models import HanModel, ModelConfig

__all__ = ["Corpus", "TaskKind", "generate_synthetic", "HanModel", "ModelConfig",
           "HanRockClassifier", "HanRockRegressor"]
__version__ = "0.1.0"
