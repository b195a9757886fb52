"""Exception types raised across the package."""


class SdltError(Exception):
    """Base class for every error raised by sdlt."""


class GenesisMismatch(SdltError, ValueError):
    pass


class EvidenceKindMismatch(SdltError, ValueError):
    pass


class DecodeError(SdltError, ValueError):
    pass


class QuorumUnavailable(SdltError):
    """The Byzantine share of the committee reached |C|/2; agreement is undefined."""


class EmptyNetwork(SdltError):
    pass


class InsufficientStake(SdltError):
    pass


class NegativeBalance(SdltError, ValueError):
    pass


class AlignmentError(SdltError, ValueError):
    pass


class SignatureForgery(SdltError):
    """An adversarial state carries an honest signature it could not have obtained."""


class InvalidShare(SdltError, ValueError):
    pass


class PoolExhausted(SdltError):
    pass


class NotBaGenesis(SdltError, ValueError):
    pass


class InvalidConfiguration(SdltError, ValueError):
    pass


class ConfigError(SdltError, ValueError):
    """Malformed or inconsistent scenario configuration."""


class StepError(SdltError):
    """Wraps a transition failure with the step index where it happened."""

    def __init__(self, step, cause):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause
