"""Exception types raised across the package."""


class OpFlowError(Exception):
    pass


class FactorizationError(OpFlowError):
    """Covariance could not be factorized even after jitter escalation."""


class RejectionLimitError(OpFlowError):
    """A rejection sampler exhausted its draw budget."""


class DivergenceError(OpFlowError):
    """A numerical loop produced non-finite or runaway values."""


class FileFormatError(OpFlowError):
    """Bad magic, version, header or payload length in a container file."""


class ConfigError(OpFlowError):
    """Experiment configuration failed schema validation."""
