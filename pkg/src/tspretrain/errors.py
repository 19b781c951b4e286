"""Exception types shared across the package."""


class TsPretrainError(Exception):
    """Base class for all package-specific errors."""


class MagicMismatch(TsPretrainError):
    """File does not start with the expected format magic."""


class TruncatedFile(TsPretrainError):
    """File payload is shorter than its header promises."""


class HeaderInconsistent(TsPretrainError):
    """File header disagrees with the supplied metadata or with itself."""


class VocabularyTooSmall(TsPretrainError):
    """External vocabulary cannot host the token space plus special ids."""


class MissingTensor(TsPretrainError):
    """A named tensor required by the model is absent from an archive."""

    def __init__(self, name):
        super().__init__(f"missing tensor: {name}")
        self.name = name


class ShapeMismatch(TsPretrainError):
    """A named tensor has the wrong shape for the model slot it should fill."""

    def __init__(self, name, expected, got):
        super().__init__(f"tensor {name}: expected shape {tuple(expected)}, got {tuple(got)}")
        self.name = name
        self.expected = tuple(expected)
        self.got = tuple(got)


class EmptyMask(TsPretrainError):
    """Masked-token loss requested with no masked positions."""


class NonFiniteGradient(TsPretrainError):
    """Optimizer step rejected because a gradient contained NaN or Inf."""
