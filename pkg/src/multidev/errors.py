"""Exception hierarchy shared by all modules."""


class MultiDevError(Exception):
    pass


class ConfigError(MultiDevError):
    """Invalid configuration; ``key`` names the offending setting."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class UsageError(MultiDevError):
    pass


class AllocationError(MultiDevError):
    pass


class KernelError(MultiDevError):
    """A command failed on a device; raised when its fence is waited on."""

    def __init__(self, rank, cause):
        super().__init__(f"command on device {rank} failed: {cause!r}")
        self.rank = rank
        self.cause = cause


class UnsupportedTopologyError(MultiDevError):
    pass


class ReconstructionDiverged(MultiDevError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)
