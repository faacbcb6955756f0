# hsi_paws/core/models.py
"""
データクラスモデル
キューブ・パッチ・サポートセット・評価レポート
"""

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional, Dict, Any, Tuple

import numpy as np

from hsi_paws.core.exceptions import ValidationError, ConfigurationError, DataError


def _readonly_float32(values) -> np.ndarray:
    """float32 の読み取り専用配列に変換（呼び出し側の配列は変更しない）"""
    arr = np.asarray(values, dtype=np.float32)
    if arr is values and arr.flags.writeable:
        arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass
class HsiCube:
    """ハイパースペクトルキューブ M×N×B（[row][col][band] 順）"""
    values: np.ndarray
    gt: Optional[np.ndarray] = None

    def __post_init__(self):
        """バリデーション"""
        raw = np.asarray(self.values)
        if raw.ndim != 3:
            raise ValidationError(f"キューブは3次元である必要があります: ndim={raw.ndim}", "values")
        if min(raw.shape) < 1:
            raise ValidationError(f"キューブの各次元は1以上である必要があります: {raw.shape}", "values", raw.shape)
        self.values = _readonly_float32(self.values)
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("キューブに非有限値が含まれています", "values")

        if self.gt is not None:
            gt = np.asarray(self.gt)
            if gt.shape != self.values.shape[:2]:
                raise ValidationError(
                    f"正解グリッドの形状 {gt.shape} がキューブ {self.values.shape[:2]} と一致しません", "gt"
                )
            if gt.size and (gt.min() < 0 or gt.max() > np.iinfo(np.uint16).max):
                raise ValidationError("正解ラベルは 0..65535 の範囲である必要があります", "gt")
            gt = gt.astype(np.int64)
            gt.flags.writeable = False
            self.gt = gt

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])

    @property
    def bands(self) -> int:
        return int(self.values.shape[2])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.rows, self.cols, self.bands

    @property
    def class_ids(self) -> Tuple[int, ...]:
        """正解グリッドに存在するクラス（昇順, 0 を除く）"""
        if self.gt is None:
            return ()
        return tuple(int(c) for c in np.unique(self.gt) if c != 0)

    @property
    def labelled_count(self) -> int:
        if self.gt is None:
            return 0
        return int(np.count_nonzero(self.gt))

    def with_values(self, values: np.ndarray) -> 'HsiCube':
        """同じ正解グリッドで値だけ差し替えたキューブ"""
        return HsiCube(values=values, gt=self.gt)


@dataclass
class Patch:
    """p×p×B のパッチ（中心画素のラベル付き）"""
    values: np.ndarray
    center: Tuple[int, int]
    label: Optional[int] = None

    def __post_init__(self):
        """バリデーション"""
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise ValidationError(f"パッチは p×p×B である必要があります: {self.values.shape}", "values")
        if self.values.shape[0] % 2 == 0:
            raise ValidationError(f"パッチサイズは奇数である必要があります: {self.values.shape[0]}", "size")

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    @property
    def bands(self) -> int:
        return int(self.values.shape[2])

    def validate(self) -> None:
        """値が有限であることを確認"""
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"パッチ {self.center} に非有限値が含まれています", "values")

    def with_values(self, values: np.ndarray) -> 'Patch':
        """中心・ラベルを保ったまま値を差し替え"""
        return Patch(values=values, center=self.center, label=self.label)


@dataclass
class ViewPair:
    """空間的に重なるアンカー/ポジティブのパッチ対"""
    anchor: Patch
    positive: Patch
    overlap_fraction: float

    def __post_init__(self):
        if self.anchor.size != self.positive.size:
            raise ValidationError("アンカーとポジティブのパッチサイズが異なります", "positive")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValidationError(f"重なり率が範囲外です: {self.overlap_fraction}", "overlap_fraction")


@dataclass
class SupportSet:
    """ラベル付きサポートセットと one-hot ラベル行列 Y_L"""
    patches: List[Patch]
    labels: np.ndarray
    class_ids: Tuple[int, ...]
    per_class: int

    def __post_init__(self):
        """バリデーション"""
        if not self.patches:
            raise ConfigurationError("サポートセットが空です", "support_per_class")
        labels = np.asarray(self.labels, dtype=np.float64)
        if labels.shape != (len(self.patches), len(self.class_ids)):
            raise ValidationError(
                f"Y_L の形状 {labels.shape} が ({len(self.patches)}, {len(self.class_ids)}) と一致しません", "labels"
            )
        if not np.all(labels.sum(axis=1) == 1.0) or not np.all((labels == 0.0) | (labels == 1.0)):
            raise ValidationError("Y_L の各行は one-hot である必要があります", "labels")
        counts = labels.sum(axis=0)
        if not np.all(counts == self.per_class):
            raise DataError(f"クラスごとのサポート数が {self.per_class} ではありません: {counts.tolist()}")
        self.labels = labels

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def class_count(self) -> int:
        return len(self.class_ids)

    @property
    def label_indices(self) -> np.ndarray:
        """各サポートパッチのクラス列インデックス"""
        return np.argmax(self.labels, axis=1)

    @property
    def centers(self) -> List[Tuple[int, int]]:
        return [patch.center for patch in self.patches]


@dataclass
class SyntheticSpec:
    """デスク規模の合成キューブ仕様"""
    rows: int = 64
    cols: int = 64
    bands: int = 32
    classes: int = 4
    noise_sigma: float = 0.05
    region_seeds: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError(f"空間サイズが不正です: {self.rows}x{self.cols}", "synthetic.rows")
        if self.bands < 8:
            raise ConfigurationError(f"バンド数は8以上が必要です: {self.bands}", "synthetic.bands")
        if self.classes < 1:
            raise ConfigurationError(f"クラス数が不正です: {self.classes}", "synthetic.classes")
        if self.classes > self.region_seeds:
            raise ConfigurationError(
                f"クラス数 {self.classes} が領域シード数 {self.region_seeds} を超えています", "synthetic.region_seeds"
            )
        if self.region_seeds > self.rows * self.cols:
            raise ConfigurationError("領域シード数が画素数を超えています", "synthetic.region_seeds")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"ノイズ標準偏差は0以上: {self.noise_sigma}", "synthetic.noise_sigma")


@dataclass
class EvalReport:
    """下流評価レポート"""
    mode: str
    overall_accuracy: float
    per_class_accuracy: List[float]
    sample_count: int
    config_digest: str
    correct_count: int = 0
    class_ids: Tuple[int, ...] = ()
    per_class_counts: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.per_class_counts and sum(self.per_class_counts) != self.sample_count:
            raise ValidationError("クラス別サンプル数の合計が総数と一致しません", "per_class_counts")

    def to_dict(self) -> Dict[str, Any]:
        """辞書形式に変換"""
        return {
            'mode': self.mode,
            'overall_accuracy': self.overall_accuracy,
            'correct': self.correct_count,
            'sample_count': self.sample_count,
            'config_digest': self.config_digest,
            'class_ids': list(self.class_ids),
            'per_class_accuracy': list(self.per_class_accuracy),
            'per_class_counts': list(self.per_class_counts)
        }

    def to_text(self) -> str:
        """key: value 形式のテキストレポート"""
        lines = [
            f"mode: {self.mode}",
            f"overall_accuracy: {self.overall_accuracy:.6f}",
            f"correct: {self.correct_count}",
            f"sample_count: {self.sample_count}",
            f"config_digest: {self.config_digest}",
        ]
        for class_id, acc, count in zip(self.class_ids, self.per_class_accuracy, self.per_class_counts):
            lines.append(f"class_{class_id}_accuracy: {acc:.6f}")
            lines.append(f"class_{class_id}_count: {count}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def csv_header() -> List[str]:
        return ['mode', 'overall_accuracy', 'correct', 'sample_count', 'config_digest', 'per_class_accuracy']

    def csv_row(self) -> List[str]:
        return [
            self.mode,
            f"{self.overall_accuracy:.6f}",
            str(self.correct_count),
            str(self.sample_count),
            self.config_digest,
            ";".join(f"{acc:.6f}" for acc in self.per_class_accuracy)
        ]

    def to_csv(self, include_header: bool = True) -> str:
        """機械可読な CSV（ヘッダー + 1行）"""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        if include_header:
            writer.writerow(self.csv_header())
        writer.writerow(self.csv_row())
        return buffer.getvalue()


@dataclass
class PretrainResult:
    """事前学習の結果"""
    params: Any
    loss_trace: List[float]
    steps_per_epoch: int
    epochs: int

    @property
    def final_loss(self) -> Optional[float]:
        return self.loss_trace[-1] if self.loss_trace else None
