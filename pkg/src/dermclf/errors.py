"""Exception hierarchy.

Errors raised because of bad user input (files, configs, manifests) derive from
``InputError``; the CLI maps those to exit code 2.
"""


class DermclfError(Exception):
    pass


class InputError(DermclfError):
    pass


class ManifestFormatError(InputError):
    pass


class AmbiguousLabelError(ManifestFormatError):
    def __init__(self, image_id: str, n_hot: int):
        super().__init__(f"{image_id}: expected exactly one 1.0 label column, found {n_hot}")
        self.image_id = image_id


class ImageLoadError(InputError):
    def __init__(self, path, reason: str = ""):
        msg = f"cannot load image {path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = path


class MissingImagesError(InputError):
    def __init__(self, image_ids):
        self.image_ids = list(image_ids)
        super().__init__(f"{len(self.image_ids)} missing or unreadable image(s): " + ", ".join(self.image_ids))


class ConfigError(InputError):
    pass


class WeightsLoadError(InputError):
    pass


class CheckpointError(InputError):
    pass


class ContractViolation(DermclfError):
    """A caller broke a precondition (e.g. normalizing twice)."""


class AssemblyError(DermclfError):
    pass


class NumericError(DermclfError, ValueError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, step: int, lrs, image_ids, value: float):
        self.step = step
        self.lrs = list(lrs)
        self.image_ids = list(image_ids)
        super().__init__(
            f"non-finite loss {value} at step {step} (lr per group={self.lrs}); batch ids: {', '.join(self.image_ids)}"
        )
