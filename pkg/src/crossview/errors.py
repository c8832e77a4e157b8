class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class EmptyRegionError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class GradCheckError(RuntimeError):
    pass


class ContaminationError(RuntimeError):
    def __init__(self, scene_ids):
        self.scene_ids = sorted(scene_ids)
        super().__init__("eval scenes overlap the training split: " + ", ".join(self.scene_ids))


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass
