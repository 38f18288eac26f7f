"""Exception hierarchy shared across the service."""


class EpochCCError(Exception):
    pass


class ClockRegression(EpochCCError):
    """The clock source returned a value not greater than the last one issued."""


class MalformedRequest(EpochCCError):
    pass


class Overloaded(EpochCCError):
    pass


class EpochOrderViolation(EpochCCError):
    pass


class CutoverTooSoon(EpochCCError):
    pass


class CodecError(EpochCCError):
    pass


class FrameCorrupt(CodecError):
    pass


class Unreachable(EpochCCError):
    pass


class NoMajority(EpochCCError):
    pass


class PeerTimeout(EpochCCError):
    pass


class GroupTimeout(EpochCCError):
    pass


class LsnAhead(EpochCCError):
    pass


class LsnGap(EpochCCError):
    pass


class EpochGateViolation(EpochCCError):
    pass


class StorageUnreachable(EpochCCError):
    pass


class Disconnected(EpochCCError):
    pass


class IncompleteHistory(EpochCCError):
    pass


class ConfigError(EpochCCError):
    pass


class FaultScriptError(ConfigError):
    pass
