"""Exception types raised by the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class DataLayoutError(ToolkitError):
    """Dataset root does not follow the trainA/trainB[/testA/testB] layout."""


class ImageDecodeError(ToolkitError):
    """A file in a dataset directory could not be decoded as an image."""


class EmptyDomainError(ToolkitError):
    """A dataset domain contains no images."""


class SpecError(ToolkitError):
    """A network spec is invalid (bad sizes, spatial collapse, ...)."""


class ShapeError(ToolkitError):
    """Tensor arguments do not match the expected geometry."""


class TapError(ToolkitError):
    """Requested activation tap does not exist in the network."""


class ConfigError(ToolkitError):
    """Training config file or preset name is invalid."""


class DivergenceError(ToolkitError):
    """A training loss became non-finite."""

    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite loss '{term}' (= {value}) at step {step}")
        self.term = term
        self.step = step
        self.value = value


class UntrainedModelError(ToolkitError):
    """A model handle was used before it was trained."""
