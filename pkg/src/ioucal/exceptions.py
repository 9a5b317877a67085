"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller broke a documented precondition (unsorted input, mixed images, ...)."""


class ValidationError(ValueError):
    """Input data failed validation.

    ``problems`` holds one human-readable line per offending record so that
    callers can report everything at once instead of failing on the first.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        head = f"{len(self.problems)} validation problem(s)"
        super().__init__(head + ":\n" + "\n".join(f"  - {p}" for p in self.problems))


class FitError(RuntimeError):
    """Calibration fitting could not proceed (degenerate labels, too few samples)."""


class SynthError(ValueError):
    """A synthetic-world configuration cannot be realised."""
