class PyshimError(Exception):
    """Base class for interop failures."""


class MappingIncomplete(PyshimError):
    """Export mapping misses a source tensor or leaves a factor unpaired."""


class ShapeMismatch(PyshimError):
    """A mapped tensor's shape disagrees with its role or rank."""


class ClientValidationError(PyshimError):
    """A request payload failed local validation before any network call."""


class TransportError(PyshimError):
    """The service could not be reached or replied with an error status."""
