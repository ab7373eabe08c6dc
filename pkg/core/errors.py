"""
Exception hierarchy. The CLI maps ConfigError to exit code 2 and
PipelineError to exit code 1.
"""

from typing import Optional


class PfGanError(Exception):
    """Root of every error raised by the toolkit"""


# ==========================================
#  CONFIGURATION FAMILY (exit code 2)
# ==========================================

class ConfigError(PfGanError, ValueError):
    """Invalid configuration value or CLI usage"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class StageDependencyError(ConfigError):
    """ADDA stage 2 requested without a stage-1 checkpoint"""


class ArchitectureMismatchError(ConfigError):
    """Checkpoint architecture does not match the requested one"""


# ==========================================
#  RUNTIME FAMILY (exit code 1)
# ==========================================

class PipelineError(PfGanError, RuntimeError):
    """Runtime failure inside a pipeline stage"""


class DataError(PipelineError):
    """Dataset generation, sampling or image IO failure"""


class ManifestError(DataError):
    """Manifest schema or invariant violation"""


class ShapeMismatchError(PipelineError, ValueError):
    """Tensor shape contract violated"""


class LossInputError(PipelineError, ValueError):
    """Loss called with out-of-domain inputs"""


class NonFiniteLossError(PipelineError):
    """Training produced NaN/Inf; a diagnostic snapshot was written"""

    def __init__(self, message: str, snapshot_path: Optional[str] = None):
        self.snapshot_path = snapshot_path
        super().__init__(message)


class ProtocolError(PipelineError):
    """Evaluation protocol violated (identity overlap, gallery layout)"""


class CheckpointError(PipelineError):
    """Checkpoint container is corrupt or unreadable"""
