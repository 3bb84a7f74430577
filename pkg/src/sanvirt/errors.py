"""Exception hierarchy shared by every layer of the stack.

Errors that can travel over the simulated fabric carry a one-byte ``status``
code so a data-path target can report them inside an ``IoRsp``.
"""


class SanError(Exception):
    status = 0xFF


# extent-core
class OutOfRange(SanError):
    status = 6


class UnallocatedRead(SanError):
    pass


class PoolExhausted(SanError):
    status = 5

    def __init__(self, msg="no free backing extent", allocated=()):
        super().__init__(msg)
        # extents that were mapped before the pool ran dry
        self.allocated = list(allocated)


class OverlapViolation(SanError):
    pass


class ExtentUnallocated(SanError):
    pass


# fabric-sim
class NoRoute(SanError):
    pass


class LivelockGuard(SanError):
    pass


# storage-subsystem
class AccessDenied(SanError):
    status = 2


class OutOfCapacity(SanError):
    status = 3


# metadata-center
class DuplicateId(SanError):
    pass


class UnknownPool(SanError):
    pass


class UnknownVolume(SanError):
    status = 4


class Unauthorized(SanError):
    status = 7


class CorruptSnapshot(SanError):
    pass


# data path
class StaleEpoch(SanError):
    status = 1


class EpochRegression(SanError):
    pass


class IoFailed(SanError):
    status = 8


# wiring / configuration
class InvalidConfig(SanError):
    pass


class ParseError(SanError):
    def __init__(self, msg, line=None, field=None):
        super().__init__(msg)
        self.line = line
        self.field = field


class ValidationError(SanError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MismatchedWorkload(SanError):
    pass


STATUS_OK = 0

_BY_STATUS = {
    cls.status: cls
    for cls in (OutOfRange, PoolExhausted, AccessDenied, OutOfCapacity,
                UnknownVolume, Unauthorized, StaleEpoch, IoFailed)
}

STATUS_NAMES = {STATUS_OK: "Ok", **{s: c.__name__ for s, c in _BY_STATUS.items()}}


def error_for_status(status):
    return _BY_STATUS.get(status, SanError)
