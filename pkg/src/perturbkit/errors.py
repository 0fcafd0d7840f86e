"""Exception hierarchy with machine-parsable error codes.

Every error the engine raises on purpose carries a short code that the CLI
prints as ``CODE: message`` before exiting 1, so scripts can branch on the
first token of stderr.
"""


class PerturbkitError(Exception):
    """Base class for all engine errors."""

    code = "E_INTERNAL"


class UsageError(PerturbkitError):
    """Bad invocation: unknown subcommand, flag, config key, or argument value."""

    code = "E_USAGE"


class FormatError(PerturbkitError):
    """An input file does not conform to its on-disk format."""

    code = "E_FORMAT"


class ValidationError(PerturbkitError):
    """A dataset or in-memory structure violates an invariant."""

    code = "E_VALIDATION"


class ControlError(PerturbkitError):
    """Controls missing for a covariate combination that has perturbed cells."""

    code = "E_NO_CONTROL"


class SplitError(PerturbkitError):
    """Split constraints unsatisfiable within the retry budget."""

    code = "E_SPLIT"


class TrainError(PerturbkitError):
    """Training aborted (non-finite loss or an unusable configuration)."""

    code = "E_TRAIN"


class GeneMismatchError(PerturbkitError):
    """Prediction and reference gene lists differ."""

    code = "E_GENE_MISMATCH"
