"""Exception types raised across the package."""


class PcEnhanceError(Exception):
    """Base class for all package errors."""


class EmptyFrame(PcEnhanceError, ValueError):
    pass


class ShapeMismatch(PcEnhanceError, ValueError):
    pass


class OutOfRange(PcEnhanceError, ValueError):
    pass


class StrideUnderflow(PcEnhanceError, ValueError):
    pass


class MissingPoolRecord(PcEnhanceError, KeyError):
    pass


class CoordMismatch(PcEnhanceError, ValueError):
    pass


class InsufficientCandidates(PcEnhanceError, ValueError):
    def __init__(self, requested, available):
        super().__init__(
            f"requested {requested} points but only {available} candidates exist"
        )
        self.requested = requested
        self.available = available


class OutOfDomain(PcEnhanceError, ValueError):
    pass


class NoOverlap(PcEnhanceError, ValueError):
    pass


class DivisionByZero(PcEnhanceError, ZeroDivisionError):
    pass


class PlyFormatError(PcEnhanceError, ValueError):
    """The file is not a PLY this reader understands."""


class CodecError(PcEnhanceError, RuntimeError):
    def __init__(self, message, returncode=None, stdout="", stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stdout = stdout
        self.stderr = stderr

    def __str__(self):
        base = super().__str__()
        if self.stderr:
            return f"{base}\n--- stderr ---\n{self.stderr.strip()}"
        return base


class FrameError(PcEnhanceError, RuntimeError):
    """A pipeline stage failed; the original exception is chained."""

    def __init__(self, frame_index, stage, cause):
        super().__init__(f"frame {frame_index}: {stage} failed: {cause}")
        self.frame_index = frame_index
        self.stage = stage


class AgreementError(PcEnhanceError, RuntimeError):
    """Encoder-side and decoder-side geometry differ."""
