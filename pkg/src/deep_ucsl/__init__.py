"""Contrastive subgroup discovery with an EM-trained mixture of classifying experts."""
from .clustering import Centroids, PseudoLabelMatrix, SkConfig
from .data import LabeledDataset, SynthConfig, gen_synthetic
from .metrics import MetricsReport, evaluate, predict
from .nn import ModelConfig, ModelParams, init_params
from .trainer import TrainConfig, TrainHistory, train, train_baseline_bce_kmeans

__version__ = "0.1.0"
