"""Exception hierarchy shared by all modules."""


class StochTransportError(Exception):
    """Base class for every error raised by this package."""


class DomainError(StochTransportError, ValueError):
    """An argument lies outside the admissible mathematical domain."""


class EvaluationError(StochTransportError, ArithmeticError):
    """A field produced non-finite values."""


class ResolutionError(StochTransportError, ValueError):
    """A discretization is too coarse for the requested operation."""


class StepSizeError(StochTransportError, ValueError):
    """A finite-difference step is below the rounding floor."""


class ConfigurationError(StochTransportError, ValueError):
    """Solver or experiment configuration is inconsistent."""


class SolverError(StochTransportError, RuntimeError):
    """A linear solve failed or produced non-finite output."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ContractionError(StochTransportError, ValueError):
    """The map x -> y - U(t, x) is not a contraction."""

    def __init__(self, message, sup_grad):
        super().__init__(message)
        self.sup_grad = float(sup_grad)


class IterationError(StochTransportError, RuntimeError):
    """A fixed-point iteration did not converge."""


class SupportError(StochTransportError, ValueError):
    """A test function touches masked (escaped) grid cells."""


class ContractError(StochTransportError, ValueError):
    """Inputs violate a pairing contract (e.g. mismatched noise)."""


class UnknownExperimentError(StochTransportError, KeyError):
    """The experiment name is not registered."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SchemaError(StochTransportError, ValueError):
    """A configuration or output file violates its schema."""


class IntegrityError(StochTransportError, RuntimeError):
    """Emitted outputs are missing or do not match their digests."""


class ExperimentError(StochTransportError, RuntimeError):
    """A module error raised inside a named experiment stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
