class ValidationError(ValueError):
    """Raised when an input violates a shape, range or finiteness contract."""


class ConfigError(ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class PairingError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch, step, value):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
