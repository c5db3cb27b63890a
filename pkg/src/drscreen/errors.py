"""Exception hierarchy shared across the package."""


class DrScreenError(Exception):
    """Base class for every error raised by this package."""


class DomainError(DrScreenError):
    """A value violates a domain invariant (bad grade id, bad box, dimension mismatch)."""


class LoadError(DrScreenError):
    """A dataset artifact (label table, manifest) could not be loaded."""


class ParseError(DrScreenError):
    """A detection/annotation file is malformed.

    Carries the offending path and 1-based line number when known.
    """

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class SplitError(DrScreenError):
    """A requested train/test split is infeasible."""


class GenerationError(DrScreenError):
    """Synthetic dataset generation failed (e.g. lesion placement exhausted retries)."""


class BundleError(DrScreenError):
    """Detector training bundle preparation failed."""


class DetectorError(DrScreenError):
    """An external detector invocation failed; carries captured diagnostics."""

    def __init__(self, message: str, diagnostics: str = ""):
        super().__init__(message)
        self.diagnostics = diagnostics


class TrainError(DrScreenError):
    """Classifier training is impossible on the given data/config."""


class ModelFormatError(DrScreenError):
    """A serialized model file is unreadable, corrupted, or has an unsupported version."""


class RunError(DrScreenError):
    """A pipeline stage failed; names the stage so operators can resume debugging there."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
