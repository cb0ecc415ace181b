"""Domain error type shared across the package."""


class SiamFvError(Exception):
    """Raised for domain failures: degenerate vectors, bad files, rank bounds.

    Messages are short stable phrases; the CLI maps these to exit code 1 and
    a single machine-parsable line on stderr. Programming-contract violations
    (shape or index mismatches) raise ValueError / IndexError instead.
    """
