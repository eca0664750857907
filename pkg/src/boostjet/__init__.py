"""Click-probability recommender: tracker aggregates, offer embeddings and oblivious boosted trees."""
from ._jit import backend_name
from .datamodel import Action, Catalog, Event, EventLog, OfferMeta, SynthConfig, TimeWindow, synth_generate
from .gbm import GbmModel, GbmTrainConfig, ObliviousTree, TrainPool, fit, llp, predict
from .offer2vec import DmTrainConfig, EmbeddingModel, train_dm, train_offer2vec
from .pipeline import PipelineConfig, dcg, evaluate
from .trackers import FeatureSchema, TrackerKey, TrackerStore, aggregate, default_schema

__version__ = "0.1.0"

__all__ = [
    "Action", "Catalog", "DmTrainConfig", "EmbeddingModel", "Event", "EventLog", "FeatureSchema",
    "GbmModel", "GbmTrainConfig", "ObliviousTree", "OfferMeta", "PipelineConfig", "SynthConfig",
    "TimeWindow", "TrackerKey", "TrackerStore", "TrainPool", "aggregate", "backend_name", "dcg",
    "default_schema", "evaluate", "fit", "llp", "predict", "synth_generate", "train_dm",
    "train_offer2vec",
]
