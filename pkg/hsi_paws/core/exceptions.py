# hsi_paws/core/exceptions.py
"""
PAWS パイプライン例外クラス
設定・データ・数値・保存の各エラーを終了コード付きで整理
"""

from typing import Optional, Dict, Any


class PawsError(Exception):
    """PAWS パイプライン基底例外"""

    exit_code = 1

    def __init__(self, message: str, user_message: str = None, error_code: str = None):
        super().__init__(message)
        self.user_message = user_message or message
        self.error_code = error_code or self.__class__.__name__.upper()

    def to_dict(self) -> Dict[str, Any]:
        """辞書形式で例外情報を返す（レポート用）"""
        return {
            'error_code': self.error_code,
            'message': self.user_message,
            'technical_message': str(self),
            'exit_code': self.exit_code
        }


# 設定関連

class ConfigurationError(PawsError):
    """設定エラー（ハイパーパラメータ・ポリシー・設定ファイル）"""

    exit_code = 3

    def __init__(self, message: str, config_key: str = None):
        if config_key:
            user_message = f"設定値が正しくありません ({config_key}): {message}"
        else:
            user_message = f"設定値が正しくありません: {message}"
        super().__init__(message, user_message, "CONFIGURATION_ERROR")
        self.config_key = config_key


# バリデーション関連

class ValidationError(PawsError):
    """入力値の不変条件違反"""

    exit_code = 4

    def __init__(self, message: str, field: str = None, value: Any = None):
        super().__init__(message, f"入力値が正しくありません: {message}", "VALIDATION_ERROR")
        self.field = field
        self.value = value


class ShapeError(ValidationError):
    """テンソル形状の不一致"""

    def __init__(self, message: str, expected: Any = None, actual: Any = None):
        if expected is not None:
            message = f"{message} (期待: {expected}, 実際: {actual})"
        super().__init__(message, field="shape", value=actual)
        self.error_code = "SHAPE_ERROR"
        self.expected = expected
        self.actual = actual


class PatchRangeError(ValidationError):
    """パッチ中心がキューブ範囲外"""

    def __init__(self, center: tuple, rows: int, cols: int):
        message = f"パッチ中心 {center} がキューブ範囲 {rows}x{cols} の外です"
        super().__init__(message, field="center", value=center)
        self.error_code = "PATCH_RANGE_ERROR"


# データ関連

class DataError(PawsError):
    """データ内容のエラー（ラベル不足・未ラベルパッチなど）"""

    exit_code = 5

    def __init__(self, message: str, class_id: Optional[int] = None):
        super().__init__(message, f"データの処理中にエラーが発生しました: {message}", "DATA_ERROR")
        self.class_id = class_id


class CubeFormatError(DataError):
    """キューブ・正解・モデルファイルの形式エラー"""

    def __init__(self, message: str, path: str = None):
        full_message = f"{message}: {path}" if path else message
        super().__init__(full_message)
        self.error_code = "CUBE_FORMAT_ERROR"
        self.path = path


class CubeTruncatedError(CubeFormatError):
    """ヘッダーの宣言サイズとペイロードサイズの不一致"""

    def __init__(self, expected: int, actual: int, path: str = None):
        message = f"ペイロードが不足しています (宣言 {expected} バイト, 実際 {actual} バイト)"
        super().__init__(message, path)
        self.error_code = "CUBE_TRUNCATED"
        self.expected = expected
        self.actual = actual


class ModelFormatError(DataError):
    """エンコーダーモデルファイル（PAWM）の形式エラー"""

    def __init__(self, message: str, path: str = None):
        full_message = f"{message}: {path}" if path else message
        super().__init__(full_message)
        self.user_message = f"モデルファイルを読み込めません: {full_message}"
        self.error_code = "MODEL_FORMAT_ERROR"
        self.path = path


class ModelTruncatedError(ModelFormatError):
    """モデルファイルのパラメータ領域の不足"""

    def __init__(self, expected: int, actual: int, path: str = None):
        message = f"モデルファイルが途中で終わっています (必要 {expected} バイト, 実際 {actual} バイト)"
        super().__init__(message, path)
        self.error_code = "MODEL_TRUNCATED"
        self.expected = expected
        self.actual = actual


# 数値計算関連

class NumericError(PawsError):
    """数値計算エラー（ゼロノルム・非有限値）"""

    exit_code = 6

    def __init__(self, message: str):
        super().__init__(message, f"数値計算エラー: {message}", "NUMERIC_ERROR")


class OptimizerStateError(PawsError):
    """オプティマイザ状態とパラメータの不整合"""

    exit_code = 7

    def __init__(self, message: str, param_name: str = None):
        super().__init__(message, f"オプティマイザ状態が不正です: {message}", "OPTIMIZER_STATE_ERROR")
        self.param_name = param_name


# 保存関連

class StorageError(PawsError):
    """ファイル入出力・結果データベースのエラー"""

    exit_code = 8

    def __init__(self, message: str, original_error: Exception = None):
        super().__init__(message, f"ファイル入出力または結果保存に失敗しました: {message}", "STORAGE_ERROR")
        self.original_error = original_error


# CLI用のヘルパー関数

def get_exit_code(error: Exception) -> int:
    """例外からプロセス終了コードを取得"""
    if isinstance(error, PawsError):
        return error.exit_code
    return 1


def exception_to_report(error: Exception) -> Dict[str, Any]:
    """例外を診断メッセージ形式に変換"""
    if isinstance(error, PawsError):
        return {'success': False, 'error': error.to_dict()}
    return {
        'success': False,
        'error': {
            'error_code': 'UNKNOWN_ERROR',
            'message': '予期しないエラーが発生しました',
            'technical_message': str(error),
            'exit_code': 1
        }
    }
