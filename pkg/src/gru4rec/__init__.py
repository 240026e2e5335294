"""Session-based next-item recommendation with GRU4Rec, in numpy."""

from .corpus import NegativeSampler, SessionCorpus, SessionParallelIterator, build_corpus
from .datasets import EventLog, SplitSpec, load_events, preprocess
from .evaluation import EvalConfig, EvalResult, evaluate, naive_evaluate, popularity_baseline
from .model import ModelParams, init_model
from .serialization import load_model, save_model
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "EvalConfig",
    "EvalResult",
    "EventLog",
    "ModelParams",
    "NegativeSampler",
    "SessionCorpus",
    "SessionParallelIterator",
    "SplitSpec",
    "TrainConfig",
    "build_corpus",
    "evaluate",
    "fit",
    "init_model",
    "load_events",
    "load_model",
    "naive_evaluate",
    "popularity_baseline",
    "preprocess",
    "save_model",
]
