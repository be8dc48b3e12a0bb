"""Exception types. CLI exit codes are keyed on these."""


class DualRejectError(Exception):
    exit_code = 1


class ConfigError(DualRejectError, ValueError):
    exit_code = 2


class DataError(DualRejectError, ValueError):
    exit_code = 3


class DivergenceError(DualRejectError, ArithmeticError):
    """Non-finite loss during training."""

    exit_code = 4

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.epoch = epoch
        self.step = step
