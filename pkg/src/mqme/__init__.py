"""Cross-embodiment reward learning from mixed-quality demonstrations.

Modules: ``sim`` (grid push environment), ``demogen`` (datasets), ``feedback``
(synthetic labels), ``diffnet`` (autodiff encoder), ``replearn`` (training
objectives), ``reward``, ``rl`` (tabular transfer), ``metrics`` and
``pipeline``/``cli`` (orchestration).
"""
from .errors import (CalibrationError, ConfigError, DependencyError, FormatError, GenerationError, MqmeError,
                     ProvenanceError, ResourceError, TrainingError, UndefinedMetricError, UsageError)
from .sim import Action, EnvConfig, Kind

__version__ = "0.1.0"
