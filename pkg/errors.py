from typing import Dict, Optional


class RotUnrollError(Exception):
    """Base class for every error raised by the library"""


class DimensionError(RotUnrollError, ValueError):
    """Shapes or geometries that do not fit together"""


class GroupError(RotUnrollError, ValueError):
    """Invalid rotation angle, grid or group order"""


class LabelError(RotUnrollError, ValueError):
    pass


class EmptyDatasetError(RotUnrollError, ValueError):
    pass


class TapeConsumedError(RotUnrollError, RuntimeError):
    """backward() called twice on the same tape"""


class UninitializedStatisticsError(RotUnrollError, RuntimeError):
    """Eval-mode batch norm used before any training batch was seen"""


class OrbitConsistencyError(RotUnrollError, RuntimeError):
    """Expanded filter bank no longer matches the rotations of its basis"""


class TrainingDivergedError(RotUnrollError, RuntimeError):
    def __init__(self, message: str, batch_index: int, parameter_norms: Dict[str, float]):
        super().__init__(message)
        self.batch_index = batch_index
        self.parameter_norms = parameter_norms

    def __str__(self) -> str:
        norms = ", ".join(f"{name}={value:.4g}" for name, value in self.parameter_norms.items())
        return f"{self.args[0]} (batch {self.batch_index}; parameter norms: {norms})"


class DeadStartError(RotUnrollError, RuntimeError):
    """Все коды первого слоя нулевые на первом батче: фильтры и BatchNorm не получат градиента"""

    def __init__(self, message: str, threshold: float, max_activation: float):
        super().__init__(message)
        self.threshold = threshold
        self.max_activation = max_activation


class DataNotFoundError(RotUnrollError, FileNotFoundError):
    pass


class ParseError(RotUnrollError, ValueError):
    """Malformed binary input; carries the file and the byte offset of the problem"""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        super().__init__(message)
        self.path = path
        self.offset = offset

    def __str__(self) -> str:
        where = []
        if self.path is not None:
            where.append(str(self.path))
        if self.offset is not None:
            where.append(f"byte {self.offset}")
        suffix = f" [{', '.join(where)}]" if where else ""
        return f"{self.args[0]}{suffix}"


class IdxFormatError(ParseError):
    pass


class CifarFormatError(ParseError):
    pass


class ContainerFormatError(ParseError):
    pass


class UnsupportedVersionError(ContainerFormatError):
    pass
