from typing import Optional


class HeadTrackError(Exception):
    """
    Base class for every error raised by the pipeline.
    """


class InvalidInputError(HeadTrackError, ValueError):
    pass


class ShapeError(HeadTrackError, ValueError):
    """
    Raised when an operation receives operands whose shapes break its contract.
    The message always names the operation and the offending shapes.
    """

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class DegenerateAverageError(InvalidInputError):
    def __init__(self, frame_index: int, norm: float):
        self.frame_index = frame_index
        self.norm = norm
        super().__init__(
            f"Weighted quaternion sum at frame {frame_index} has norm {norm:.3e} "
            "(antipodal cancellation)"
        )


class AutodiffError(HeadTrackError, RuntimeError):
    pass


class NumericError(HeadTrackError, ArithmeticError):
    """
    Raised when a NaN or Inf shows up in a loss value or a gradient.
    """

    def __init__(
        self,
        message: str,
        op_id: Optional[str] = None,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
    ):
        self.op_id = op_id
        self.epoch = epoch
        self.batch = batch
        context = []
        if op_id is not None:
            context.append(f"op={op_id}")
        if epoch is not None:
            context.append(f"epoch={epoch}")
        if batch is not None:
            context.append(f"batch={batch}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(f"{message}{suffix}")


class DataError(HeadTrackError, ValueError):
    pass


class FrameError(DataError):
    """
    Base class for wire-frame decoding failures.
    """

    kind = "frame"


class BadMagicError(FrameError):
    kind = "bad_magic"


class BadVersionError(FrameError):
    kind = "bad_version"


class ShortBufferError(FrameError):
    kind = "short_buffer"


class CrcMismatchError(FrameError):
    kind = "crc_mismatch"
