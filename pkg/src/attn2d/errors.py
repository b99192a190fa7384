"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not conform."""


class FullyMaskedRowError(ValueError):
    """A query row attended no keys, so its output is undefined."""


class ConfigError(ValueError):
    """A run configuration violates a structural constraint."""


class InfeasibleStrategyError(ConfigError):
    """The strategy cannot run at the requested parallelism degree."""


class SimulationFault(RuntimeError):
    """A processor program broke a simulator rule (buffer/handle misuse)."""


class DeadlockError(RuntimeError):
    """No processor can make progress; carries a per-processor diagnostic."""

    def __init__(self, blocked: dict):
        self.blocked = dict(blocked)
        lines = [f"  {coord}: {what}" for coord, what in sorted(blocked.items())]
        super().__init__("deadlock; every processor is blocked:\n" + "\n".join(lines))
