"""
Error types for the etch profiling pipeline
"""

from typing import Optional


class EtchProfilerError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(EtchProfilerError):
    """Invalid configuration value or unknown configuration field."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


# Dataset loading

class MissingFile(EtchProfilerError):
    pass


class MalformedRow(EtchProfilerError):
    pass


class NonFiniteValue(EtchProfilerError):
    pass


class ProfileCountMismatch(EtchProfilerError):
    pass


class EmptyDataset(EtchProfilerError):
    pass


class TooFewLots(EtchProfilerError):
    exit_code = 2


class DatasetWriteError(EtchProfilerError):
    pass


# Conditioning

class InconsistentChannels(EtchProfilerError):
    pass


class GridMismatch(EtchProfilerError):
    pass


class UnknownChannel(EtchProfilerError):
    pass


class NoActivePhase(EtchProfilerError):
    pass


class PhaseTooShort(EtchProfilerError):
    pass


# Model

class SeriesTooShort(EtchProfilerError):
    pass


class ShapeMismatch(EtchProfilerError):
    pass


class ChannelCountMismatch(EtchProfilerError):
    pass


class CheckpointError(EtchProfilerError):
    pass


# Training

class NonFiniteGradient(EtchProfilerError):
    pass


class DivergedLoss(EtchProfilerError):
    pass


class FrozenBackboneModified(EtchProfilerError):
    pass


# Evaluation

class LengthMismatch(EtchProfilerError):
    pass


class EmptyTrainSet(EtchProfilerError):
    pass
