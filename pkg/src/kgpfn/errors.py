"""Exception types shared across the package."""


class KgpfnError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolationError(KgpfnError):
    """An operation was called outside its documented precondition."""


class ParseError(KgpfnError):
    """A data file could not be parsed."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class VocabularyError(KgpfnError):
    """An entity or relation is missing from a supplied shared vocabulary."""


class IdError(KgpfnError):
    """An entity or relation id is out of range."""


class EmptyRelationError(KgpfnError):
    """A relation has no observed triples to sample context from."""


class SamplingExhaustedError(KgpfnError):
    """Negative sampling could not fill a slot within the retry budget."""


class RuleSpecError(KgpfnError):
    """A synthetic-graph specification is unsatisfiable or malformed."""


class ConfigError(KgpfnError):
    """A run configuration contains unknown keys or out-of-range values."""


class CheckpointError(KgpfnError):
    """A checkpoint file is missing or inconsistent with its manifest."""


class GradCheckError(KgpfnError):
    """A finite-difference gradient check hit a non-finite value."""

    def __init__(self, message, coordinate=None):
        if coordinate is not None:
            message = f"coordinate {coordinate}: {message}"
        super().__init__(message)
        self.coordinate = coordinate


class OracleVerificationError(KgpfnError):
    """A brute-force verification oracle found a deviation above tolerance."""
