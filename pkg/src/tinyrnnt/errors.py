"""Exception types shared across the toolkit.

All of them derive from ValueError/RuntimeError so callers that do not care
about the distinction can still catch the standard hierarchy.  The CLI maps
any of these to a nonzero exit code.
"""


class DomainError(ValueError):
    """An argument lies outside the operation's documented domain."""


class ContractError(ValueError):
    """Two components disagree on shapes, lengths, or vocabularies."""


class RefusalError(RuntimeError):
    """A guarded operation refused to run (e.g. an instance too large to
    enumerate); the message names the guard."""


class OracleError(RuntimeError):
    """An oracle probe produced an unusable value (e.g. a non-finite loss
    during finite differencing); the message names the offending parameter."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. a non-finite loss); the message names the
    epoch and offending utterance."""
