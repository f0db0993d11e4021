"""Exception hierarchy shared by all duq modules."""


class DuqError(Exception):
    """Base class for every error raised by duq."""


class ShapeError(DuqError, ValueError):
    pass


class EmptyInputError(DuqError, ValueError):
    pass


class DomainError(DuqError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class InsufficientDataError(DuqError, ValueError):
    pass


class DegenerateInputError(DuqError, ValueError):
    pass


class ConfigurationError(DuqError, ValueError):
    pass


class TrainingError(DuqError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DegenerateCorrespondenceError(DuqError, RuntimeError):
    pass


class FormatError(DuqError, ValueError):
    """Malformed or inconsistent file content."""

    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        where = ""
        if offset is not None:
            where = f" at byte offset {offset}"
        elif line is not None:
            where = f" at line {line}"
        super().__init__(message + where)
        self.offset = offset
        self.line = line
