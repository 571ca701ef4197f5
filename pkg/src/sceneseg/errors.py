"""Exception types raised across the package."""


class ScenesegError(Exception):
    pass


class ShapeError(ScenesegError, ValueError):
    """Tensor dimensions disagree with what an operation expects."""

    def __init__(self, what, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected {expected}, got {got}")


class StateError(ScenesegError, RuntimeError):
    """Operation requires state that has not been populated yet."""


class ConfigError(ScenesegError, ValueError):
    pass


class InputError(ScenesegError, ValueError):
    pass


class ContractError(ScenesegError, ValueError):
    pass


class NonFiniteError(ScenesegError, FloatingPointError):
    pass


class FormatError(ScenesegError, ValueError):
    """Malformed model file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")
