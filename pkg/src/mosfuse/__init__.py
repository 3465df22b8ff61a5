"""MOS prediction toolkit: listener-enhanced predictor, unit-LM scoring,
ASR confidence, subsystem selection, linear fusion and evaluation."""

from ._kernels import BACKEND
from .dataset import MosDataset, load_manifest, mean_opinion_score, split
from .metrics import evaluate, ktau, lcc, mse, srcc

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "MosDataset",
    "evaluate",
    "ktau",
    "lcc",
    "load_manifest",
    "mean_opinion_score",
    "mse",
    "split",
    "srcc",
]
