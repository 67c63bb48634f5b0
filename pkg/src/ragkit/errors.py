"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes, so raising the right class matters
more than the message text.
"""


class RagkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(RagkitError):
    """Invalid or unresolvable run configuration (exit code 2)."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class BudgetExhaustedError(RagkitError):
    """The oracle call budget ran out (exit code 3)."""


class DataError(RagkitError):
    """Malformed or inconsistent input data (exit code 4)."""


class InvariantError(RagkitError):
    """An internal invariant was violated (exit code 5)."""


class OracleTransportError(RagkitError):
    """A retryable transport failure talking to a remote oracle."""


class DegenerateEmbeddingError(RagkitError):
    """Encoding produced a vector with no usable norm."""
