"""Exception types raised across the pipeline."""


class PedflowError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(PedflowError):
    """Invalid configuration value or unknown configuration key."""


class IngestError(PedflowError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateRowError(IngestError):
    def __init__(self, sensor_id, timestamp, lines):
        self.sensor_id = sensor_id
        self.timestamp = timestamp
        self.lines = tuple(lines)
        where = ", ".join(str(n) for n in self.lines)
        super().__init__(f"duplicate row for sensor {sensor_id!r} at {timestamp} (lines {where})")


class ImputationError(PedflowError):
    def __init__(self, sensor_id, hour):
        self.sensor_id = sensor_id
        self.hour = hour
        super().__init__(f"sensor {sensor_id!r} has no observations at hour {hour:02d}:00")


class ZeroStdError(PedflowError):
    def __init__(self, sensor_id):
        self.sensor_id = sensor_id
        super().__init__(f"sensor {sensor_id!r} has zero standard deviation")


class ShapeError(PedflowError, ValueError):
    pass


class StaleTapeError(PedflowError):
    pass


class FingerprintMismatch(PedflowError):
    pass


class DivergenceError(PedflowError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


class UnknownSensorError(PedflowError, KeyError):
    pass
