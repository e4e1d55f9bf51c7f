"""Bistatic OFDM integrated sensing and communication simulator."""

from .channel import LinkBudget, PropagationPath, SyncOffsets
from .ofdm import IqSequence, PilotGrid, PreambleSpec, SystemConfig
from .radar import Periodogram, TddPattern, WindowSpec

__all__ = [
    "IqSequence",
    "LinkBudget",
    "Periodogram",
    "PilotGrid",
    "PreambleSpec",
    "PropagationPath",
    "SyncOffsets",
    "SystemConfig",
    "TddPattern",
    "WindowSpec",
]

__version__ = "0.1.0"
