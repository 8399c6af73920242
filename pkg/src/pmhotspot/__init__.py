"""Urban PM2.5 hotspot detection from mobile-sensor data.

Pipeline: ingest raw mobile readings, background-normalize against the
fleet-wide rolling median, fit a bagged exponential-kernel Gaussian process
surface, and score a spatial grid with probabilistic hotspot scores.  A
route-based mobile-sensing simulator and a calibration/evaluation suite are
included for validating the whole method against known ground truth.
"""

__version__ = "0.1.0"

from pmhotspot.errors import ConfigError, DataError, NumericalError, PipelineError

__all__ = [
    "__version__",
    "PipelineError",
    "ConfigError",
    "DataError",
    "NumericalError",
]
