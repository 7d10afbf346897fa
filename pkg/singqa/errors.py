
from typing import Optional


class SingQAError(Exception):
    """Root of every error raised deliberately by the toolkit."""


class ManifestError(SingQAError, ValueError):

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f'row {row}: {message}'
        super().__init__(message)


class AudioFormatError(SingQAError, ValueError):
    pass


class FeatureFormatError(SingQAError, ValueError):
    pass


class AlignmentError(SingQAError, ValueError):
    pass


class ModelFileError(SingQAError, ValueError):
    pass


class TrainingError(SingQAError, ValueError):
    pass
