"""Exception types raised across the pipeline."""


class DiffSVError(Exception):
    """Base class; ``code`` is a short stable identifier such as ``"silent-noise"``."""

    code = "diffsv-error"

    def __init__(self, message="", code=None):
        if code is not None:
            self.code = code
        super().__init__(f"{self.code}: {message}" if message else self.code)


class FeatureError(DiffSVError, ValueError):
    code = "invalid-feature"


class SamplerDiverged(DiffSVError, FloatingPointError):
    code = "diverged-sampler"

    def __init__(self, step, message=""):
        self.step = step
        super().__init__(message or f"non-finite state at reverse step {step}")


class NonFiniteLoss(DiffSVError, FloatingPointError):
    code = "non-finite-loss"

    def __init__(self, component, value=None):
        self.component = component
        super().__init__(f"loss component '{component}' is {value}")


class TrainingHalted(DiffSVError, RuntimeError):
    code = "training-halted"


class CheckpointError(DiffSVError, IOError):
    code = "corrupt-checkpoint"


class ConfigError(DiffSVError, ValueError):
    code = "invalid-config"

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
