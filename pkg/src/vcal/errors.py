"""Exception hierarchy. CLI exit codes key off these classes."""


class VcalError(Exception):
    pass


class ConfigError(VcalError, ValueError):
    pass


class ValidationError(VcalError, ValueError):
    pass


class ShapeError(VcalError, ValueError):
    pass


class ModeError(VcalError, TypeError):
    pass


class DomainError(VcalError, ValueError):
    pass


class NonFiniteError(VcalError, FloatingPointError):
    """A non-finite value appeared in a named parameter block."""

    def __init__(self, block: str, msg: str = ""):
        self.block = block
        super().__init__(msg or f"non-finite gradient in parameter block {block!r}")


class DivergenceError(VcalError, RuntimeError):
    def __init__(self, msg: str, state=None):
        super().__init__(msg)
        self.state = state


class CheckpointError(VcalError, ValueError):
    pass
