"""Streaming temporal-graph embeddings with asynchronous mail propagation."""

from .events import (DataSplit, EventLog, TemporalAdjacency, TemporalEvent, batches,
                     parse_jodie_csv, split_chronological)
from .mailbox import Mail, MailboxStore
from .model import APAN, ModelConfig
from .propagator import PropagationConfig, Propagator, PropagationWorker
from .engine import Engine, NegativePool
from .training import TrainConfig, evaluate, fit

__version__ = "0.1.0"
