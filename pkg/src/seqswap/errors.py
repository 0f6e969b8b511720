"""Exception categories used across the package.

Each maps to one failure category surfaced by the CLI exit handler:
shape (tensor dimension mismatch), contract (precondition violated),
format (malformed file), config (bad experiment config), dependency
(missing artifact another command should have produced).
"""


class SeqswapError(Exception):
    category = "error"


class ShapeError(SeqswapError):
    category = "shape"


class ContractError(SeqswapError):
    category = "contract"


class FormatError(SeqswapError):
    category = "format"


class ConfigError(SeqswapError):
    category = "config"


class DependencyError(SeqswapError):
    category = "dependency"
