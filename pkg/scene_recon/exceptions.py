class InvalidArgumentError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class MaskContractError(AssertionError):
    pass


class CheckpointError(RuntimeError):
    pass


class DoesNotExist(Exception):
    pass


class MultipleObjectsReturned(Exception):
    pass


class SceneFormatError(ValueError):
    """Raised when a scene file cannot be decoded."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SchemaError(ValueError):
    """Raised when a JSON document does not match the expected schema."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonFiniteLossError(RuntimeError):
    def __init__(self, scene_id: str, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step} (scene {scene_id})")
        self.scene_id = scene_id
        self.step = step
