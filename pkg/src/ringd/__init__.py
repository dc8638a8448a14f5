"""Simulated storage ring control stack: soft-channel bus, ring model,
lifetime and optics services, orbit feedback, archiver, and CLI tools."""

from .archiver import ArchivePolicy, Recorder, export_csv, query
from .bus import SoftBus
from .client import BusClient
from .errors import RingdError
from .lifetime import LifetimeEngine, SampleWindow
from .ofb import OfbServer, ResponseFile, load_response, write_response
from .optics import AdjustmentParams, OpticsService, OpticsSetup, derive_setup
from .ring import Ring, RingConfig, derive_response, load_config
from .server import WireServer
from .snapshot import Snapshot, read_snapshot, write_snapshot
from .values import INVALID, OK, ChannelMeta, TimedValue

__version__ = "0.1.0"

__all__ = [
    "SoftBus",
    "BusClient",
    "WireServer",
    "RingdError",
    "TimedValue",
    "ChannelMeta",
    "OK",
    "INVALID",
    "Ring",
    "RingConfig",
    "derive_response",
    "load_config",
    "LifetimeEngine",
    "SampleWindow",
    "AdjustmentParams",
    "OpticsSetup",
    "OpticsService",
    "derive_setup",
    "OfbServer",
    "ResponseFile",
    "load_response",
    "write_response",
    "ArchivePolicy",
    "Recorder",
    "query",
    "export_csv",
    "Snapshot",
    "read_snapshot",
    "write_snapshot",
    "__version__",
]
