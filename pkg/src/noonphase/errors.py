"""Exception types; the CLI maps each family to an exit code."""


class NoonPhaseError(Exception):
    exit_code = 1


class ConfigError(NoonPhaseError, ValueError):
    """Invalid configuration document or command-line arguments."""

    exit_code = 2


class DataError(NoonPhaseError, ValueError):
    """Malformed, missing or mutually inconsistent data artifacts."""

    exit_code = 3


class SourceGeometryError(DataError):
    """Pair source too large for the sensor: rejection sampling gave up."""


class FitError(NoonPhaseError, RuntimeError):
    """A numerical fit failed to converge or had too little data."""

    exit_code = 4
