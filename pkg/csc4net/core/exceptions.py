"""
Error hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class Csc4NetError(Exception):
    """Base class for every error raised by csc4net"""

    exit_code: int = 1


class DimensionError(Csc4NetError, ValueError):
    """Shapes, supports or layer counts do not agree"""

    exit_code = 4


class DegenerateInputError(Csc4NetError, ValueError):
    """Input carries no information (zero codes, identical samples, constant image)"""

    exit_code = 4

    def __init__(self, message: str, index: Optional[int] = None):
        if index is not None:
            message = f"{message} (sample {index})"
        super().__init__(message)
        self.index = index


class NumericError(Csc4NetError, ArithmeticError):
    """Non-finite values or eigenvalues below the positive-definite floor"""

    exit_code = 4


class SolverError(Csc4NetError):
    """An iterative solver failed to make progress"""

    exit_code = 4


class CscSolverError(SolverError):
    """Proximal-gradient code solver diverged"""


class L4SolverError(SolverError):
    """MSP iteration could not produce an orthogonal iterate"""


class RankDeficientError(L4SolverError):
    """Polar projection met a rank-deficient matching matrix"""


class TrainingError(SolverError):
    """A component failed during training; carries epoch and layer context"""

    def __init__(self, message: str, epoch: Optional[int] = None, layer: Optional[int] = None):
        context = []
        if epoch is not None:
            context.append(f"epoch {epoch}")
        if layer is not None:
            context.append(f"layer {layer}")
        if context:
            message = f"{message} [{', '.join(context)}]"
        super().__init__(message)
        self.epoch = epoch
        self.layer = layer


class UntrainedModelError(Csc4NetError):
    """Synthesis requested from a state that was never trained"""

    exit_code = 5


class FormatError(Csc4NetError):
    """Tensor or checkpoint bytes do not follow the CSL4 layout"""

    exit_code = 5

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset


class DatasetIOError(Csc4NetError, OSError):
    """Dataset directory or manifest cannot be read or written"""

    exit_code = 3
