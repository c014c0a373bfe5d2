# This file is part of the UrbanVerse tool

# src/common/errors.py


class UrbanVerseError(Exception):
    """Base class for all errors raised by the pipeline"""
    exit_code = 1


class ConfigError(UrbanVerseError):
    """Invalid hyper-parameters, flags or configuration files"""
    exit_code = 2


class DataError(UrbanVerseError):
    """Malformed or inconsistent input data"""
    exit_code = 3

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class MissingArtifactError(DataError):
    """An upstream stage output is missing"""

    def __init__(self, path, producer):
        self.producer = producer
        super().__init__(f"missing artifact, run `{producer}` first", path=path)


class CheckpointError(DataError):
    """Checkpoint version mismatch, truncated payload or parameter registry mismatch"""


class ShapeError(UrbanVerseError):
    """Operand shapes are incompatible"""

    def __init__(self, op, shape_a, shape_b=None):
        self.op = op
        self.shapes = (tuple(shape_a), None if shape_b is None else tuple(shape_b))
        if shape_b is None:
            message = f"{op}: invalid shape {tuple(shape_a)}"
        else:
            message = f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}"
        super().__init__(message)


class NumericDivergenceError(UrbanVerseError):
    """NaN/Inf activations or a loss above the divergence threshold"""
    exit_code = 4
