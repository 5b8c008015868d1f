"""Multimodal imitation storytelling: LSTM storyline policies trained against
per-modality convolutional critics."""
from .errors import MilganError
from .gan import TrainConfig, TrainResult, apply_policy, pretrain, train
from .seqdata import EntityNode, EventCorpus, ModalSequence, Storyline, load_dataset

__all__ = ["MilganError", "TrainConfig", "TrainResult", "apply_policy", "pretrain", "train",
           "EntityNode", "EventCorpus", "ModalSequence", "Storyline", "load_dataset"]
__version__ = "0.1.0"
