"""Exception hierarchy shared by every autoemb module."""


class AutoEmbError(Exception):
    """Base class for all library errors."""


class DimensionError(AutoEmbError, ValueError):
    pass


class ContractError(AutoEmbError, ValueError):
    """A caller violated an operation's precondition."""


class LabelError(AutoEmbError, ValueError):
    pass


class EmbeddingLookupError(AutoEmbError, IndexError):
    pass


class NonFiniteError(AutoEmbError, ArithmeticError):
    pass


class ConfigError(AutoEmbError, ValueError):
    pass


class IngestionError(AutoEmbError, ValueError):
    pass


class ComparisonError(AutoEmbError, ValueError):
    pass


class SnapshotError(AutoEmbError, ValueError):
    pass
