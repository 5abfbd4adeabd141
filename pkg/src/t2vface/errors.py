"""Exception types shared across the package."""


class DatasetError(Exception):
    """Manifest or image data could not be loaded."""


class PairMismatchError(DatasetError):
    """Thermal and visible images of one pair disagree in size."""


class GalleryError(Exception):
    """A gallery could not be assembled from the available samples."""


class EmbedderLookupError(Exception):
    """An embedding for an image is unavailable."""

    def __init__(self, content_hash, message=None):
        self.content_hash = content_hash
        super().__init__(message or f"no embedding known for image {content_hash}")


class CheckpointError(Exception):
    """A checkpoint file is missing, corrupt, or inconsistent."""


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite during training."""


class ConfigError(Exception):
    """A run configuration file or flag combination is invalid."""
