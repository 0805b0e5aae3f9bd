"""Stream simulation snapshots from HPC-style ranks to a micro-batching DMD engine."""

from .broker import BrokerConfig, broker_finalize, broker_init, broker_write
from .core import (
    EndpointAddress,
    FieldDescriptor,
    GroupMap,
    StreamRecord,
    assign_group,
    make_stream_key,
    parse_stream_key,
)
from .dmd import DmdResult, SnapshotWindow, compute_dmd, stability_metric, update_window
from .endpoint import EndpointClient, StreamStore, serve
from .engine import EngineConfig, MicroBatch, StreamEngine, dispatch_partition

__version__ = "0.1.0"
