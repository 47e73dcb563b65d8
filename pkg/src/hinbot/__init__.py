"""Heterogeneity-aware bot detection on heterogeneous information networks."""

from .graph import HinGraph, NeighborIndex, build_index, degree_stats, load_graph, load_graph_dir, save_graph
from .model import (BotModel, ModelConfig, TrainConfig, TrainReport, evaluate, export_attention,
                    export_embeddings, load_checkpoint, save_checkpoint, train)
from .synth import SynthSpec, fixtures, generate

__version__ = "0.1.0"
