"""Exception hierarchy shared across the engine.

ConfigError and StaleArtifactError map to CLI exit code 1 (validation);
every other KillchainError maps to exit code 2 (contract/data error).
"""


class KillchainError(Exception):
    """Base class for all engine errors."""


class ConfigError(KillchainError):
    """Invalid configuration value or malformed config file."""


class StaleArtifactError(KillchainError):
    """A required pipeline artifact is missing or no longer hash-matches
    the manifest that produced it."""


class ParseError(KillchainError):
    """Malformed input document (bundle JSON, table lines, matrix lines)."""


class EmptyTextError(KillchainError):
    """Text became empty after preprocessing."""


class DegenerateVectorError(KillchainError):
    """A zero-norm vector where a direction is required."""


class ZeroVectorError(DegenerateVectorError):
    """Text with no in-vocabulary token embeds to the zero vector."""


class ContractError(KillchainError):
    """A precondition or cross-module alignment contract was violated."""


class CoverageError(KillchainError):
    """A probability-matrix file does not cover exactly the expected samples."""


class DivergenceError(KillchainError):
    """Training produced a non-finite loss."""
