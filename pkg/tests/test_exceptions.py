# tests/test_exceptions.py
"""
例外クラスのテスト
終了コードの対応と診断レポート
"""

import sys
from pathlib import Path

import pytest

# プロジェクトルートを取得
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from hsi_paws.core.exceptions import (
    ConfigurationError,
    CubeFormatError,
    CubeTruncatedError,
    ModelFormatError,
    ModelTruncatedError,
    DataError,
    NumericError,
    OptimizerStateError,
    PatchRangeError,
    PawsError,
    ShapeError,
    StorageError,
    ValidationError,
    exception_to_report,
    get_exit_code
)


class TestExitCodes:
    """終了コード"""

    @pytest.mark.parametrize("error,code", [
        (ConfigurationError("tau", "paws.tau"), 3),
        (ValidationError("x"), 4),
        (ShapeError("x"), 4),
        (PatchRangeError((9, 9), 4, 4), 4),
        (DataError("x", 2), 5),
        (CubeFormatError("bad magic", "a.hsic"), 5),
        (CubeTruncatedError(32, 12, "a.hsic"), 5),
        (ModelFormatError("bad magic", "e.pawm"), 5),
        (ModelTruncatedError(64, 20, "e.pawm"), 5),
        (NumericError("nan"), 6),
        (OptimizerStateError("shape", "w"), 7),
        (StorageError("disk"), 8),
        (RuntimeError("boom"), 1),
    ])
    def test_mapping(self, error, code):
        assert get_exit_code(error) == code

    def test_hierarchy(self):
        assert issubclass(CubeTruncatedError, DataError)
        assert issubclass(PatchRangeError, ValidationError)
        assert issubclass(StorageError, PawsError)
        assert issubclass(ModelTruncatedError, DataError)
        assert not issubclass(ModelFormatError, CubeFormatError)


class TestReport:
    """診断レポート"""

    def test_paws_error(self):
        report = exception_to_report(CubeTruncatedError(32, 12, "a.hsic"))
        assert report['success'] is False
        assert report['error']['error_code'] == "CUBE_TRUNCATED"
        assert report['error']['exit_code'] == 5
        assert "a.hsic" in report['error']['technical_message']

    def test_configuration_key_in_message(self):
        error = ConfigurationError("0 より大きい必要があります", "paws.tau")
        assert "paws.tau" in error.user_message
        assert error.config_key == "paws.tau"

    def test_unknown_error(self):
        report = exception_to_report(ValueError("x"))
        assert report['error']['error_code'] == "UNKNOWN_ERROR"
        assert report['error']['exit_code'] == 1
