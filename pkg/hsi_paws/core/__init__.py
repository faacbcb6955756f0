# hsi_paws/core/__init__.py
"""
コア層
ドメインモデル・例外・インターフェースを提供
"""

from .models import HsiCube, Patch, ViewPair, SupportSet, SyntheticSpec, EvalReport, PretrainResult
from .interfaces import ResultRepositoryInterface
from .exceptions import (
    PawsError,
    ConfigurationError,
    ValidationError,
    ShapeError,
    PatchRangeError,
    DataError,
    CubeFormatError,
    CubeTruncatedError,
    ModelFormatError,
    ModelTruncatedError,
    NumericError,
    OptimizerStateError,
    StorageError
)

__all__ = [
    # モデル
    "HsiCube",
    "Patch",
    "ViewPair",
    "SupportSet",
    "SyntheticSpec",
    "EvalReport",
    "PretrainResult",

    # インターフェース
    "ResultRepositoryInterface",

    # 例外
    "PawsError",
    "ConfigurationError",
    "ValidationError",
    "ShapeError",
    "PatchRangeError",
    "DataError",
    "CubeFormatError",
    "CubeTruncatedError",
    "ModelFormatError",
    "ModelTruncatedError",
    "NumericError",
    "OptimizerStateError",
    "StorageError"
]
