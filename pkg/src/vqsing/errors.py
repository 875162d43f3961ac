"""Exception hierarchy. CLI maps ValidationError to exit code 2, DivergenceError to 3."""


class VqsingError(Exception):
    """Base class for all package errors."""


class ValidationError(VqsingError):
    """Bad inputs, configs, or incompatible artifacts."""


class ConfigError(ValidationError):
    pass


class InputError(ValidationError):
    pass


class DimensionError(ValidationError):
    """Shape mismatch; message names the offending axis."""


class UnknownWordError(ValidationError):
    def __init__(self, word: str):
        super().__init__(f"word not in lexicon and no spell-out fallback: {word!r}")
        self.word = word


class LexiconFormatError(ValidationError):
    pass


class InfeasibleAlignmentError(ValidationError):
    """Target phoneme sequence cannot be aligned to the available frames."""


class ContractError(VqsingError):
    """API misuse: stale state, out-of-order positions, and similar."""


class DivergenceError(VqsingError):
    """Training produced a non-finite loss."""
