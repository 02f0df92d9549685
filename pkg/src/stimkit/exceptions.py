"""Exception hierarchy. Each class maps to a CLI exit code."""


class StimkitError(Exception):
    exit_code = 1


class ConfigError(StimkitError):
    exit_code = 2


class DataError(StimkitError):
    exit_code = 3


class EstimationError(StimkitError):
    exit_code = 4


class DependencyError(ConfigError):
    """A subcommand was run before the step that produces its inputs."""
