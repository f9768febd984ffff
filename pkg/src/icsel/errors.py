"""Exception hierarchy for the icsel package."""


class IcselError(Exception):
    """Base class for all icsel errors."""


class CorpusFormatError(IcselError):
    """Malformed corpus or embedding file. Carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateIdError(IcselError):
    """Two corpus records share an id."""


class MissingIdError(IcselError):
    """Embedding file does not cover every corpus id."""


class RetrievalError(IcselError):
    """Invalid retrieval request (bad k, empty query, dim mismatch)."""


class KernelError(IcselError):
    """Kernel construction or validation failure."""


class IndefiniteKernelError(KernelError):
    """A restriction produced a Cholesky pivot below the indefiniteness tolerance."""


class CapabilityError(IcselError):
    """Request exceeds an implementation limit (e.g. exact normalization size)."""


class ScorerError(IcselError):
    """Subset scorer failure."""


class CacheMissError(ScorerError):
    """Cache lookup failed in offline mode. Carries the canonical request hash."""

    def __init__(self, request_hash: str):
        self.request_hash = request_hash
        super().__init__(f"no cached score for request {request_hash}")


class ProtocolError(ScorerError):
    """Remote scorer returned a malformed response."""


class TrainingError(IcselError):
    """Invalid training configuration or data."""


class TrainingDivergedError(TrainingError):
    """Mean epoch loss exceeded the divergence guard."""


class NonFiniteGradientError(TrainingError):
    """A gradient tensor contains NaN or infinity. Names the tensor."""

    def __init__(self, name: str):
        self.tensor_name = name
        super().__init__(f"non-finite gradient for {name}")


class ConfigError(IcselError):
    """Invalid run configuration."""
