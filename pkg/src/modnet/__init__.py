"""Compositional visual question answering with assembled module networks.

The package compiles symbolic queries into small differentiable networks
built from a reusable, jointly trained module inventory, and ships a
synthetic shape-world benchmark for exercising the whole pipeline.

Typical entry points:

    from modnet import ModuleNetworkClassifier      # sklearn-style API
    from modnet.dataset import GenConfig, generate_dataset
    from modnet.cli import main                     # the `modnet` command
"""

from .autodiff import (NumericalError, ShapeError, Tape, Tensor, precision)
from .dataset import GenConfig, generate_dataset, load_manifest
from .estimator import ModuleNetworkClassifier
from .layout import Layout, corpus_stats, group_by_layout, layout_from_query
from .modules import ModuleConfig, ModuleKey
from .params import ParameterStore
from .query import SymbolicQuery, parse_query
from .questions import enumerate_questions, parse_question
from .scenes import Scene, oracle_answer, render, sample_scene
from .training import TrainConfig, evaluate_model, fit_examples

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericalError",
    "precision",
    "ParameterStore",
    "ModuleConfig",
    "ModuleKey",
    "SymbolicQuery",
    "parse_query",
    "Layout",
    "layout_from_query",
    "group_by_layout",
    "corpus_stats",
    "parse_question",
    "enumerate_questions",
    "Scene",
    "sample_scene",
    "render",
    "oracle_answer",
    "GenConfig",
    "generate_dataset",
    "load_manifest",
    "TrainConfig",
    "fit_examples",
    "evaluate_model",
    "ModuleNetworkClassifier",
]
