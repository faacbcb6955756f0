# hsi_paws/config.py
"""
実験設定管理
INI 形式の設定ファイルをセクションごとに pydantic で検証する
"""

import configparser
import hashlib
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from hsi_paws.core.exceptions import ConfigurationError, StorageError

DEFAULT_CONFIG_PATH = "config.ini"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
VALID_LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


class _Section(BaseModel):
    """未知キーを拒否するセクション基底"""
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    """[data] パッチとサンプル数"""
    patch_size: int = Field(default=9, ge=1)
    support_per_class: int = Field(default=100, ge=1)
    unlabeled_count: int = Field(default=71416, ge=1)

    @field_validator('patch_size')
    @classmethod
    def _odd_patch(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"パッチサイズは奇数である必要があります: {value}")
        return value


class PawsSection(_Section):
    """[paws] 損失とバッチ構成"""
    tau: float = Field(default=0.25, gt=0)
    T: float = Field(default=0.10, gt=0, le=1)
    epochs: int = Field(default=50, ge=1)
    pairs_per_batch: int = Field(default=64, ge=1)
    support_batch_per_class: int = Field(default=10, ge=1)
    epsilon: float = Field(default=1e-12, gt=0)
    augment_support: bool = False
    memax_gradient: bool = False


class EncoderSection(_Section):
    """[encoder] エンコーダー構成"""
    spectral_kernel: int = Field(default=7, ge=1)
    spectral_stride: int = Field(default=2, ge=1)
    conv3d_channels: int = Field(default=8, ge=1)
    ds_widths: Tuple[int, ...] = (64, 64, 64)
    embedding_dim: int = Field(default=64, ge=1)

    @field_validator('ds_widths', mode='before')
    @classmethod
    def _split_widths(cls, value: Any) -> Any:
        if isinstance(value, str):
            try:
                return tuple(int(part) for part in value.split(',') if part.strip())
            except ValueError:
                raise ValueError(f"ds_widths はカンマ区切りの整数です: {value}")
        return value

    @model_validator(mode='after')
    def _check_widths(self) -> 'EncoderSection':
        if 'ds_widths' not in self.model_fields_set:
            # 省略時は最後の幅を埋め込み次元に合わせる
            self.ds_widths = self.ds_widths[:-1] + (self.embedding_dim,)
        if len(self.ds_widths) != 3:
            raise ValueError(f"ds_widths はちょうど3要素です: {list(self.ds_widths)}")
        if self.ds_widths[-1] != self.embedding_dim:
            raise ValueError(f"ds_widths の最後は embedding_dim ({self.embedding_dim}) と一致する必要があります")
        return self


class AugmentSection(_Section):
    """[augment] 拡張ポリシー φ とパラメータ"""
    enabled: bool = True
    p_channel_swap: float = Field(default=0.5, ge=0, le=1)
    p_channel_drop: float = Field(default=0.5, ge=0, le=1)
    p_channel_suppress: float = Field(default=0.5, ge=0, le=1)
    p_channel_average: float = Field(default=0.5, ge=0, le=1)
    p_flip: float = Field(default=0.5, ge=0, le=1)
    p_crop: float = Field(default=0.5, ge=0, le=1)
    p_rotate: float = Field(default=0.5, ge=0, le=1)
    p_pixel_removal: float = Field(default=0.5, ge=0, le=1)
    p_noise: float = Field(default=0.5, ge=0, le=1)
    drop_fraction: float = Field(default=0.1, ge=0, le=1)
    suppress_fraction: float = Field(default=0.1, ge=0, le=1)
    suppress_min: float = Field(default=0.2, gt=0, lt=1)
    suppress_max: float = Field(default=0.8, gt=0, lt=1)
    average_window: int = Field(default=3, ge=2)
    crop_min: Optional[int] = Field(default=None, ge=2)
    noise_sigma: float = Field(default=0.05, ge=0)
    removal_fraction: float = Field(default=0.1, ge=0, le=1)

    @field_validator('crop_min', mode='before')
    @classmethod
    def _empty_is_none(cls, value: Any) -> Any:
        if isinstance(value, str) and not value.strip():
            return None
        return value

    @model_validator(mode='after')
    def _check_suppress_range(self) -> 'AugmentSection':
        if self.suppress_min > self.suppress_max:
            raise ValueError("suppress_min は suppress_max 以下である必要があります")
        return self


class OptimizerSection(_Section):
    """[optimizer] 事前学習の LARS"""
    lr: float = Field(default=0.1, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-6, ge=0)
    trust_coefficient: float = Field(default=0.001, gt=0)


class DownstreamSection(_Section):
    """[downstream] 下流学習の SGD と SNN 温度"""
    lr: float = Field(default=0.01, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=32, ge=1)
    snn_tau: float = Field(default=0.25, gt=0)


class SyntheticSection(_Section):
    """[synthetic] 合成キューブ"""
    rows: int = Field(default=64, ge=1)
    cols: int = Field(default=64, ge=1)
    bands: int = Field(default=32, ge=8)
    classes: int = Field(default=4, ge=1)
    noise_sigma: float = Field(default=0.05, ge=0)
    region_seeds: int = Field(default=8, ge=1)


class RunSection(_Section):
    """[run] 乱数シード・ログ・結果データベース"""
    seed: int = Field(default=0, ge=0)
    log_level: str = "INFO"
    results_db: str = ""

    @field_validator('log_level')
    @classmethod
    def _known_level(cls, value: str) -> str:
        if value.upper() not in VALID_LOG_LEVELS:
            raise ValueError(f"無効なログレベル: {value}")
        return value.upper()


SECTION_MODELS: Dict[str, type] = {
    'data': DataSection,
    'paws': PawsSection,
    'encoder': EncoderSection,
    'augment': AugmentSection,
    'optimizer': OptimizerSection,
    'downstream': DownstreamSection,
    'synthetic': SyntheticSection,
    'run': RunSection,
}

# 結果の再現性に影響しない実行環境キー（digest から除外）
ENVIRONMENT_KEYS = frozenset({("run", "results_db"), ("run", "log_level")})


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


class TrainConfig(BaseModel):
    """全セクションをまとめた学習設定"""
    model_config = ConfigDict(extra="forbid")

    data: DataSection = Field(default_factory=DataSection)
    paws: PawsSection = Field(default_factory=PawsSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    augment: AugmentSection = Field(default_factory=AugmentSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    downstream: DownstreamSection = Field(default_factory=DownstreamSection)
    synthetic: SyntheticSection = Field(default_factory=SyntheticSection)
    run: RunSection = Field(default_factory=RunSection)

    @classmethod
    def from_sections(cls, raw: Dict[str, Dict[str, Any]]) -> 'TrainConfig':
        """セクション辞書から検証付きで作成（未知のセクション・キーは設定エラー）"""
        sections = {}
        for section, values in raw.items():
            model = SECTION_MODELS.get(section)
            if model is None:
                raise ConfigurationError(f"未知のセクションです: [{section}]", section)
            for key in values:
                if key not in model.model_fields:
                    raise ConfigurationError(f"未知のキーです: {section}.{key}", f"{section}.{key}")
            try:
                sections[section] = model(**values)
            except ValidationError as e:
                first = e.errors()[0]
                field = ".".join(str(part) for part in first['loc'])
                key = f"{section}.{field}" if field else section
                raise ConfigurationError(f"{key}: {first['msg']}", key)
        return cls(**sections)

    def with_overrides(self, seed: Optional[int] = None, results_db: Optional[str] = None) -> 'TrainConfig':
        """コマンドライン指定で [run] を上書きしたコピー"""
        update: Dict[str, Any] = {}
        if seed is not None:
            if seed < 0:
                raise ConfigurationError(f"シードは0以上: {seed}", "run.seed")
            update['seed'] = seed
        if results_db is not None:
            update['results_db'] = results_db
        if not update:
            return self
        return self.model_copy(update={'run': self.run.model_copy(update=update)})

    def to_ini(self, include_environment: bool = True) -> str:
        """解決済みの全キーを INI 形式で出力（include_environment=False で実行環境キーを除く）"""
        lines = []
        for section in SECTION_MODELS:
            lines.append(f"[{section}]")
            model = getattr(self, section)
            for key in type(model).model_fields:
                if not include_environment and (section, key) in ENVIRONMENT_KEYS:
                    continue
                lines.append(f"{key} = {_format_value(getattr(model, key))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """結果に影響する設定の SHA-256（先頭16桁）"""
        return hashlib.sha256(self.to_ini(include_environment=False).encode('utf-8')).hexdigest()[:16]

    def write_snapshot(self, out_dir: Union[str, Path], name: str = "config.resolved.ini") -> Path:
        """解決済み設定を出力ディレクトリに保存"""
        path = Path(out_dir) / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_ini(), encoding='utf-8')
        except OSError as e:
            raise StorageError(f"設定スナップショットを書き出せません: {path}", e)
        return path

    def get_log_config(self) -> Dict[str, Any]:
        """ログ設定を取得（環境変数が優先）"""
        log_file = os.getenv("PAWS_LOG_FILE")
        return {
            'level': os.getenv("PAWS_LOG_LEVEL", self.run.log_level).upper(),
            'to_file': bool(log_file),
            'file_path': log_file or "hsi_paws.log",
            'format': LOG_FORMAT
        }


def parse_config_text(text: str) -> TrainConfig:
    """INI テキストを解析"""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"設定ファイルの構文エラー: {e}")
    raw = {section: dict(parser.items(section)) for section in parser.sections()}
    return TrainConfig.from_sections(raw)


def parse_config(path: Union[str, Path, None] = None) -> TrainConfig:
    """設定ファイルを読み込む（path が None ならすべてデフォルト）"""
    if path is None:
        return TrainConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise ConfigurationError(f"設定ファイルが見つかりません: {path}", "config")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigurationError(f"設定ファイルを読み込めません: {path} ({e})", "config")
    return parse_config_text(text)


def apply_environment(config: TrainConfig) -> TrainConfig:
    """環境変数 PAWS_SEED の上書き"""
    seed = os.getenv("PAWS_SEED")
    if seed is None:
        return config
    try:
        return config.with_overrides(seed=int(seed))
    except ValueError:
        raise ConfigurationError(f"PAWS_SEED は整数である必要があります: {seed}", "run.seed")


# グローバル設定インスタンス
_settings: Optional[TrainConfig] = None


def get_settings() -> TrainConfig:
    """グローバル設定インスタンスを取得"""
    global _settings
    if _settings is None:
        config = TrainConfig()
        if Path(DEFAULT_CONFIG_PATH).exists():
            try:
                config = parse_config(DEFAULT_CONFIG_PATH)
            except ConfigurationError as e:
                print(f"設定ファイル読み込みエラー: {e}", file=sys.stderr)
                print("デフォルト設定を使用します", file=sys.stderr)
        _settings = apply_environment(config)
    return _settings


def set_settings(config: TrainConfig) -> None:
    """実行中の設定を差し替える"""
    global _settings
    _settings = config


def reset_settings() -> None:
    """設定をリセット（テスト用）"""
    global _settings
    _settings = None
