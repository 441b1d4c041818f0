class LabError(Exception):
    """ Base class for every failure the lab reports on purpose.
    """


class ConfigError(LabError):
    """ A run config or command line that cannot be used as given.
    """
    def __init__(self, message, details=None):
        super(ConfigError, self).__init__(message)
        self.details = details or {}


class ShapeMismatch(LabError, ValueError):
    pass


class TimestepOutOfRange(LabError, ValueError):
    pass


class DegenerateStep(LabError):
    """ The posterior mean divides by sqrt(1 - alpha_bar_t); a step with
    alpha_bar_t = 1 only makes sense when the predicted noise is zero.
    """


class EmptyInput(LabError, ValueError):
    pass


class RecordNotFound(LabError, KeyError):
    pass


class NonFiniteLoss(LabError):
    def __init__(self, component, value):
        super(NonFiniteLoss, self).__init__(
            "Loss component '%s' is not finite (%r)" % (component, value))
        self.component = component
        self.value = value


class NonFiniteState(LabError):
    def __init__(self, step, t):
        super(NonFiniteState, self).__init__(
            "Sampler state became non-finite at step %s (t=%s)" % (step, t))
        self.step = step
        self.t = t


class CheckpointError(LabError):
    def __init__(self, message, differing_keys=None):
        super(CheckpointError, self).__init__(message)
        self.differing_keys = list(differing_keys or [])
