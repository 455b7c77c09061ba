"""Exception types shared across the package."""


class CorpusIOError(IOError):
    """Raised when a corpus file is missing or fails its checksum.

    Carries the offending path so callers can report it.
    """

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")


class CheckpointError(RuntimeError):
    """Raised when a checkpoint is malformed or its config hash mismatches."""


class VocabularyError(ValueError):
    """Raised when an attribute label is outside the corpus vocabulary."""


class TrainingAbort(RuntimeError):
    """Raised when training hits a non-finite loss; carries a dump path."""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message)


class NumericsError(ArithmeticError):
    """Raised when a numerical routine leaves its valid regime (e.g. a
    matrix square root with a significant imaginary residue)."""
