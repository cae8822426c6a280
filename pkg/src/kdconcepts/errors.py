class ValidationError(ValueError):
    """Invalid configuration or input; ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class IntegrityError(IOError):
    pass


class SchemaVersionError(IOError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"schema version {found!r} not supported (expected {expected})")


class LayerLookupError(KeyError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch, message):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class EstimatorError(RuntimeError):
    """The feature-distance budget could not be met within the sigma clamps."""

    def __init__(self, message, achieved=None, tau=None):
        self.achieved = achieved
        self.tau = tau
        super().__init__(message)


class NumericError(ArithmeticError):
    pass


class UndefinedMetricError(ValueError):
    pass
