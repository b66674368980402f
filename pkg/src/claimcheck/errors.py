"""Exception types shared across the pipeline."""


class ClaimCheckError(Exception):
    """Base class for all claimcheck errors."""


class ValidationError(ClaimCheckError):
    """Invalid input data, file contents, or parameter values."""


class ConfigError(ClaimCheckError):
    """Missing or inconsistent configuration."""


class ProviderError(ClaimCheckError):
    """An embedding or chat provider failed after exhausting retries."""


class GenerationParseError(ClaimCheckError):
    """LLM output could not be parsed into the expected structure.

    Carries the raw model output so failed responses can be inspected.
    """

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text
