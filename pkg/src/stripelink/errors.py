"""Exception types raised by stripelink.

Errors that occur while driving a specific channel carry the channel id in
their ``channel`` attribute so multi-channel operations can attribute
failures.
"""

from __future__ import annotations


class StripelinkError(Exception):
    """Base class for all errors raised by this library."""


class InvalidConfig(StripelinkError):
    """A configuration value violates its documented constraints."""


class ChannelError(StripelinkError):
    """Error tied to one channel; ``channel`` holds its id when known."""

    def __init__(self, message: str = "", channel: int | None = None):
        super().__init__(message)
        self.channel = channel


class ChannelClosed(ChannelError):
    """The channel is closed (locally or by the peer)."""


class IoFailure(ChannelError):
    """An unexpected transport failure (reset, truncated stream, ...)."""


class ConnectTimeout(ChannelError):
    """No connection could be established before the deadline."""


class HandshakeMismatch(ChannelError):
    """The peer's hello disagreed on version, channel index, or role."""


class AddressInUse(ChannelError):
    """The accept-side port is already bound."""


class OpenAborted(ChannelError):
    """Channel setup was cancelled because a sibling channel failed."""


class MalformedHeader(ChannelError):
    """A frame header failed validation."""


class VersionMismatch(MalformedHeader):
    """Frame carries an unsupported wire-format version."""


class UnknownFrameKind(MalformedHeader):
    """Frame kind byte is not one of the defined kinds."""


class PayloadTooLarge(MalformedHeader):
    """Declared payload length exceeds the sanity cap."""


class TruncatedFrame(MalformedHeader):
    """Input ended before a complete frame could be decoded."""


class SizeLimitExceeded(ChannelError):
    """An incoming payload exceeds the caller-provided limit.

    The offending frame (or message) is drained from the wire before this
    is raised, so the stream remains usable.
    """

    def __init__(self, actual: int, limit: int, channel: int | None = None):
        super().__init__(
            f"incoming payload of {actual} bytes exceeds limit of {limit}",
            channel=channel,
        )
        self.actual = actual
        self.limit = limit


class StripeMismatch(ChannelError):
    """A received chunk's length disagrees with the expected layout."""

    def __init__(self, channel: int, expected: int, actual: int):
        super().__init__(
            f"channel {channel}: expected {expected}-byte chunk, got {actual}",
            channel=channel,
        )
        self.expected = expected
        self.actual = actual


class InsufficientSamples(StripelinkError):
    """Statistics require at least two samples."""


class InstanceFinalized(StripelinkError):
    """Operation attempted on a finalized library instance."""


class InitFailed(StripelinkError):
    """Channel setup failed; already-open channels have been closed."""

    def __init__(self, channel: int, cause: Exception):
        super().__init__(f"channel {channel} failed to open: {cause}")
        self.channel = channel
        self.cause = cause


class PathError(StripelinkError):
    """Multiple channels of one operation failed; maps channel id to error."""

    def __init__(self, failures: dict[int, Exception]):
        detail = "; ".join(f"channel {cid}: {exc}" for cid, exc in sorted(failures.items()))
        super().__init__(f"{len(failures)} channel(s) failed: {detail}")
        self.failures = failures


class OverlappingPaths(StripelinkError):
    """Send and receive paths of one operation share a channel."""


class ArityMismatch(StripelinkError):
    """Per-channel buffer count does not match the path width."""


class PlanMismatch(StripelinkError):
    """The two benchmark sides are running incompatible plans."""


class RelayFailure(IoFailure):
    """A relay pump failed; ``direction`` names the failing pump."""

    def __init__(self, direction: str, cause: Exception, channel: int | None = None):
        super().__init__(f"relay {direction} failed: {cause}", channel=channel)
        self.direction = direction
        self.cause = cause


class ConfigError(StripelinkError):
    """A forwarder config file failed to parse or validate."""
