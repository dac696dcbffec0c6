"""Exception hierarchy shared across the package."""


class VesselNavError(Exception):
    """Base class for all package errors."""


class ParameterError(VesselNavError, ValueError):
    pass


class GeometryError(VesselNavError, ValueError):
    pass


class ConfigurationError(VesselNavError, ValueError):
    pass


class LifecycleError(VesselNavError, RuntimeError):
    pass


class ShapeError(VesselNavError, ValueError):
    pass


class DegenerateSampleError(VesselNavError, ValueError):
    pass


class PairingError(VesselNavError, ValueError):
    pass


class LoadError(VesselNavError, IOError):
    pass
