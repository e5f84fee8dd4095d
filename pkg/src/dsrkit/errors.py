"""Exception types mapped to CLI exit codes."""


class UsageError(ValueError):
    """Bad arguments or config (exit code 1)."""


class MissingPrerequisiteError(RuntimeError):
    """A required upstream artifact is absent (exit code 2)."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"missing prerequisite: run stage '{stage}' first"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericalError(RuntimeError):
    """Training or reconstruction produced non-finite values (exit code 3)."""
