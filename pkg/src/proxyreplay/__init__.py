"""Online class-incremental learning with proxy-based contrastive replay on
synthetic task streams."""
from .datastream import LabeledSample, StreamConfig, TaskStream, make_task_stream
from .errors import ConfigError, DomainError, OracleError, ShapeError
from .losses import HyperParams, TemperatureSchedule, temperature
from .memory import BufferEntry, MemoryBuffer
from .metrics import AccuracyMatrix, metric_A, metric_AAA, metric_F
from .model import ModelParams, init_params
from .trainer import MethodSpec, ModelConfig, RunResult, run

__all__ = [
    "AccuracyMatrix",
    "BufferEntry",
    "ConfigError",
    "DomainError",
    "HyperParams",
    "LabeledSample",
    "MemoryBuffer",
    "MethodSpec",
    "ModelConfig",
    "ModelParams",
    "OracleError",
    "RunResult",
    "ShapeError",
    "StreamConfig",
    "TaskStream",
    "TemperatureSchedule",
    "init_params",
    "make_task_stream",
    "metric_A",
    "metric_AAA",
    "metric_F",
    "run",
    "temperature",
]
