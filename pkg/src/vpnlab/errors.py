class VpnlabError(Exception):
    """Base class for every error raised by vpnlab."""


class ConfigurationError(VpnlabError):
    """Shapes or config values that cannot describe a valid model or run."""

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


class InputError(VpnlabError):
    """An argument outside the domain of the operation."""


class UsageError(VpnlabError):
    """An operation called in a state where it is not defined."""


class GenerationError(VpnlabError):
    """Episode generation kept producing rejected layouts."""


class BudgetExceededError(VpnlabError):
    """A search expanded more nodes than its budget allows."""


class NumericHealthError(VpnlabError):
    """A non-finite value showed up in a forward or backward pass."""

    def __init__(self, message: str, diagnostic: dict[str, float] | None = None) -> None:
        super().__init__(message)
        self.diagnostic = diagnostic or {}
