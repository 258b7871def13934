"""Exception types shared across the pipeline."""


class ConfigError(ValueError):
    """Bad or unknown configuration input. CLI exit code 2."""


class StageDependencyError(RuntimeError):
    """A pipeline stage was requested before its inputs exist. CLI exit code 3."""


class NumericalAbort(RuntimeError):
    """Training or a solver produced non-finite state. CLI exit code 4."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class SolverError(RuntimeError):
    """A linear system could not be solved (e.g. rank deficiency)."""

    def __init__(self, message, deficiency=None):
        super().__init__(message)
        self.deficiency = deficiency


class RegistrationError(RuntimeError):
    """Registration failed; carries boundary/correspondence diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LbsError(ValueError):
    """Inverse skinning hit singular blended transforms; lists vertex indices."""

    def __init__(self, message, vertex_indices=()):
        super().__init__(message)
        self.vertex_indices = list(vertex_indices)
