"""Exception hierarchy shared by every layer of the service."""


class GranuleError(Exception):
    """Base class for all service errors."""


class InvalidArgument(GranuleError, ValueError):
    pass


class IllegalTransition(GranuleError):
    def __init__(self, current, event):
        self.current = current
        self.event = event
        super().__init__(f"illegal transition: {current!r} + {event!r}")


# -- catalog ------------------------------------------------------------------

class StorageError(GranuleError):
    pass


class PreconditionError(GranuleError, ValueError):
    pass


class NotFound(GranuleError, LookupError):
    pass


class VersionConflict(GranuleError):
    def __init__(self, item_kind, item_id, expected, actual):
        self.item_kind = item_kind
        self.item_id = item_id
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{item_kind} {item_id}: expected version {expected}, stored {actual}")


class DuplicateRequest(GranuleError):
    def __init__(self, request_id):
        self.request_id = request_id
        super().__init__(f"live duplicate of request {request_id}")


class CollectionClosed(GranuleError):
    pass


class InvalidFilter(GranuleError, ValueError):
    pass


# -- plugins ------------------------------------------------------------------

class UnknownPlugin(GranuleError, KeyError):
    pass


class UnknownDataset(GranuleError, LookupError):
    pass


class IllegalState(GranuleError):
    pass


class DDMError(GranuleError):
    """Transient failure reported by a data management backend."""


class MissingEventCount(GranuleError):
    pass


class TransformError(GranuleError):
    pass


class NotifyError(GranuleError):
    pass


# -- cache policy / harness ---------------------------------------------------

class NonMonotonicTime(GranuleError, ValueError):
    pass


class ScenarioFailed(GranuleError):
    pass


class MismatchedScenarios(GranuleError, ValueError):
    pass
