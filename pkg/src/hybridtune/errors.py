"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
message prefix and maps it to a nonzero exit code.
"""


class HybridTuneError(Exception):
    category = "error"


class DimensionError(HybridTuneError, ValueError):
    category = "dimension"


class ConfigurationError(HybridTuneError, ValueError):
    category = "config"


class NumericError(HybridTuneError, FloatingPointError):
    category = "numeric"


class LifecycleError(HybridTuneError, RuntimeError):
    category = "lifecycle"


class ContractError(HybridTuneError, RuntimeError):
    category = "contract"


class InputError(HybridTuneError, ValueError):
    category = "input"


class IntegrityError(HybridTuneError, OSError):
    category = "integrity"


class SamplingError(HybridTuneError, ValueError):
    category = "sampling"


class DegenerateSampleError(HybridTuneError, ValueError):
    category = "degenerate"


class ProtocolError(HybridTuneError, ValueError):
    category = "protocol"


class UnsupportedError(HybridTuneError, NotImplementedError):
    category = "unsupported"
