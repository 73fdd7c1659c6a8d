"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array extents are inconsistent with an operation."""


class ContractError(ValueError):
    """A precondition on arguments was violated."""


class DegenerateInputError(ValueError):
    pass


class FormatError(ValueError):
    """A binary file could not be decoded. ``offset`` is the byte where decoding failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PhantomSpecError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid experiment configuration or missing prerequisite artifact."""


class TrainingError(RuntimeError):
    pass
