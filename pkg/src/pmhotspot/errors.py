"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.  Plain ValueError is reserved for caller bugs
(invalid arguments to library functions) and also maps to 3 if it
escapes into a run.
"""


class PipelineError(Exception):
    """Base class for all pipeline-level failures."""


class ConfigError(PipelineError):
    """Invalid or inconsistent configuration."""


class DataError(PipelineError):
    """Input data cannot be processed (format, coverage, emptiness)."""


class NumericalError(PipelineError):
    """A numerical routine failed beyond recovery (e.g. factorization)."""
