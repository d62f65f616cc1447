"""Exception hierarchy for the toolkit.

Every domain error derives from WeightStegError and carries a stable
machine-readable ``code`` (the class name) that the CLI emits on stderr.
"""

from __future__ import annotations


class WeightStegError(Exception):
    """Base class for all toolkit errors."""

    @property
    def code(self) -> str:
        return type(self).__name__

    def details(self) -> dict:
        """Extra machine-readable fields for structured error output."""
        return {}


# --- model file parsing / writing ---

class MalformedHeader(WeightStegError):
    pass


class UnsupportedDtype(WeightStegError):
    pass


class OverlappingTensors(WeightStegError):
    pass


class UnsupportedWriteFormat(WeightStegError):
    pass


class UnsupportedModelFormat(WeightStegError):
    pass


# --- element addressing ---

class IndexOutOfGroup(WeightStegError):
    pass


class WriteToQuantizedDtype(WeightStegError):
    pass


# --- bit codec ---

class ValueNotRepresentable(WeightStegError):
    pass


class WidthMismatch(WeightStegError):
    pass


class SegmentTooWide(WeightStegError):
    pass


class BadWidth(WeightStegError):
    pass


# --- quantization ---

class NonFiniteInput(WeightStegError):
    pass


class CodeOutOfRange(WeightStegError):
    pass


class IncompatibleShape(WeightStegError):
    pass


class ScaleOverflow(WeightStegError):
    """Block magnitude too large for a half-precision scale."""


# --- payload framing ---

class LengthMismatch(WeightStegError):
    pass


class ChecksumMismatch(WeightStegError):
    """Recovered bytes fail the manifest CRC-32 check.

    Carries the recovered bytes so callers can measure the bit-error rate
    against a known reference payload.
    """

    def __init__(self, message: str, *, expected_crc: int, actual_crc: int,
                 recovered: bytes):
        super().__init__(message)
        self.expected_crc = expected_crc
        self.actual_crc = actual_crc
        self.recovered = recovered

    def details(self) -> dict:
        return {
            "expected_crc": self.expected_crc,
            "actual_crc": self.actual_crc,
        }


# --- embedding / extraction ---

class CapacityExceeded(WeightStegError):
    pass


class StabilityVerificationFailed(WeightStegError):
    pass


class GroupResolutionError(WeightStegError):
    pass


# --- target selection ---

class UngroupableModel(WeightStegError):
    pass


class DegenerateBaseline(WeightStegError):
    pass


class EmptyReports(WeightStegError):
    pass


# --- defenses ---

class EmptySelection(WeightStegError):
    pass
