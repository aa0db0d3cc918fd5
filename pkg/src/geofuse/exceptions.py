"""Exception types; the CLI maps each to a documented exit code."""


class GeofuseError(Exception):
    exit_code = 1


class ConfigError(GeofuseError, ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    exit_code = 2

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class SolverError(GeofuseError, RuntimeError):
    exit_code = 3

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)


class TrainingError(GeofuseError, RuntimeError):
    exit_code = 4


class ArtifactError(GeofuseError, OSError):
    exit_code = 5
