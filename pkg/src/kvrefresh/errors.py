"""Exception types shared across the package.

Two failure classes are distinguished so the CLI can map them to exit
codes: bad configuration (caught before compute starts) and broken
runtime contracts (caught mid-run, always a bug or misuse).
"""


class ConfigurationError(ValueError):
    """Invalid configuration value or inconsistent configuration."""


class ContractViolation(RuntimeError):
    """A runtime precondition or invariant was violated."""
