# hsi_paws/core/augment.py
"""
確率的データ拡張 g(φ)
スペクトル・空間・スペクトル空間の9種類の変換（パッチ→パッチの純粋関数）
"""

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hsi_paws.core.models import Patch
from hsi_paws.core.exceptions import ConfigurationError

# φ ベクトルの並び順（適用順でもある）
TRANSFORM_ORDER: Tuple[str, ...] = (
    "channel_swap",
    "channel_drop",
    "channel_suppress",
    "channel_average",
    "flip",
    "crop",
    "rotate",
    "pixel_removal",
    "noise",
)

SPECTRAL_KINDS = ("swap", "drop", "suppress", "average")
SPATIAL_KINDS = ("flip_h", "flip_v", "mirror", "crop", "rotate")
SPECTRAL_SPATIAL_KINDS = ("pixel_removal", "noise")


@dataclass(frozen=True)
class AugmentPolicy:
    """変換ごとの適用確率 φ と変換パラメータ"""
    phi: Tuple[float, ...] = (0.5,) * 9
    drop_fraction: float = 0.1
    suppress_fraction: float = 0.1
    suppress_min: float = 0.2
    suppress_max: float = 0.8
    average_window: int = 3
    crop_min: Optional[int] = None
    noise_sigma: float = 0.05
    removal_fraction: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'phi', tuple(float(v) for v in self.phi))
        self.validate()

    def validate(self) -> None:
        """ポリシーの不変条件を確認"""
        if len(self.phi) != len(TRANSFORM_ORDER):
            raise ConfigurationError(f"φ は {len(TRANSFORM_ORDER)} 要素である必要があります: {len(self.phi)}", "augment")
        for name, prob in zip(TRANSFORM_ORDER, self.phi):
            if not 0.0 <= prob <= 1.0:
                raise ConfigurationError(f"確率が [0, 1] の範囲外です: {prob}", f"augment.p_{name}")
        for key in ("drop_fraction", "suppress_fraction", "removal_fraction"):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"割合が [0, 1] の範囲外です: {value}", f"augment.{key}")
        if not 0.0 < self.suppress_min <= self.suppress_max < 1.0:
            raise ConfigurationError(
                f"抑制係数の範囲は (0, 1) 内である必要があります: [{self.suppress_min}, {self.suppress_max}]",
                "augment.suppress_min"
            )
        if self.average_window < 2:
            raise ConfigurationError(f"平均化チャネル数は2以上: {self.average_window}", "augment.average_window")
        if self.crop_min is not None and self.crop_min < 2:
            raise ConfigurationError(f"クロップ最小サイズは2以上: {self.crop_min}", "augment.crop_min")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"ノイズ標準偏差は0以上: {self.noise_sigma}", "augment.noise_sigma")

    def probability(self, name: str) -> float:
        return self.phi[TRANSFORM_ORDER.index(name)]

    def crop_minimum(self, p: int) -> int:
        """クロップ窓の最小辺 q_min（未指定なら ceil(0.7p)）"""
        q_min = self.crop_min if self.crop_min is not None else math.ceil(0.7 * p)
        if q_min < 2:
            raise ConfigurationError(f"クロップ最小サイズは2以上: {q_min} (p={p})", "augment.crop_min")
        if q_min > p:
            raise ConfigurationError(f"クロップ最小サイズ {q_min} がパッチサイズ {p} を超えています",
                                     "augment.crop_min")
        return q_min

    @classmethod
    def identity(cls) -> 'AugmentPolicy':
        """全確率 0 の恒等ポリシー"""
        return cls(phi=(0.0,) * len(TRANSFORM_ORDER))

    @classmethod
    def from_config(cls, section) -> 'AugmentPolicy':
        """設定の [augment] セクションからポリシーを作成"""
        return cls(
            phi=tuple(getattr(section, f"p_{name}") for name in TRANSFORM_ORDER),
            drop_fraction=section.drop_fraction,
            suppress_fraction=section.suppress_fraction,
            suppress_min=section.suppress_min,
            suppress_max=section.suppress_max,
            average_window=section.average_window,
            crop_min=section.crop_min,
            noise_sigma=section.noise_sigma,
            removal_fraction=section.removal_fraction,
            enabled=section.enabled
        )

    def with_phi(self, phi: Sequence[float]) -> 'AugmentPolicy':
        return replace(self, phi=tuple(phi))


# 変換プリミティブ（values: p×p×B）

def swap_channels(values: np.ndarray, i: int, j: int) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    out[:, :, [i, j]] = out[:, :, [j, i]]
    return out


def drop_channels(values: np.ndarray, channels: Sequence[int]) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    out[:, :, list(channels)] = 0.0
    return out


def suppress_channels(values: np.ndarray, channels: Sequence[int], factor: float) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    out[:, :, list(channels)] *= factor
    return out


def average_channels(values: np.ndarray, start: int, k: int) -> np.ndarray:
    """連続する k チャネルを画素ごとの平均で置き換える"""
    out = np.array(values, dtype=np.float64)
    out[:, :, start:start + k] = out[:, :, start:start + k].mean(axis=2, keepdims=True)
    return out


def flip_horizontal(values: np.ndarray) -> np.ndarray:
    return np.array(values[:, ::-1, :], dtype=np.float64)


def flip_vertical(values: np.ndarray) -> np.ndarray:
    return np.array(values[::-1, :, :], dtype=np.float64)


def mirror(values: np.ndarray) -> np.ndarray:
    """空間軸の転置"""
    return np.array(values.transpose(1, 0, 2), dtype=np.float64)


def crop_resize(values: np.ndarray, top: int, left: int, q: int) -> np.ndarray:
    """q×q 窓を切り出して最近傍で p×p に戻す"""
    p = values.shape[0]
    idx = np.floor((np.arange(p) + 0.5) * q / p).astype(np.int64)
    return np.array(values[np.ix_(top + idx, left + idx)], dtype=np.float64)


def rotate90(values: np.ndarray, k: int) -> np.ndarray:
    return np.array(np.rot90(values, k, axes=(0, 1)), dtype=np.float64)


def remove_pixels(values: np.ndarray, positions: Sequence[int]) -> np.ndarray:
    """指定した空間位置のスペクトル全体を 0 にする（positions は平坦化インデックス）"""
    out = np.array(values, dtype=np.float64)
    rows, cols = np.unravel_index(np.asarray(positions, dtype=np.int64), out.shape[:2])
    out[rows, cols, :] = 0.0
    return out


def add_noise(values: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    if sigma == 0:
        return out
    return out + rng.normal(0.0, sigma, size=out.shape)


# 種類別の変換

def spectral_transform(patch: Patch, kind: str, policy: AugmentPolicy, rng: np.random.Generator) -> Patch:
    """スペクトル変換（swap / drop / suppress / average）"""
    bands = patch.bands
    if kind == "swap":
        if bands < 2:
            raise ConfigurationError(f"チャネル交換には2バンド以上が必要です: B={bands}", "augment.p_channel_swap")
        i, j = rng.choice(bands, size=2, replace=False)
        return patch.with_values(swap_channels(patch.values, int(i), int(j)))
    if kind == "drop":
        count = int(round(policy.drop_fraction * bands))
        channels = rng.choice(bands, size=count, replace=False)
        return patch.with_values(drop_channels(patch.values, channels))
    if kind == "suppress":
        count = int(round(policy.suppress_fraction * bands))
        channels = rng.choice(bands, size=count, replace=False)
        factor = rng.uniform(policy.suppress_min, policy.suppress_max)
        return patch.with_values(suppress_channels(patch.values, channels, factor))
    if kind == "average":
        k = policy.average_window
        if k > bands:
            raise ConfigurationError(f"平均化チャネル数 {k} がバンド数 {bands} を超えています",
                                     "augment.average_window")
        start = int(rng.integers(0, bands - k + 1))
        return patch.with_values(average_channels(patch.values, start, k))
    raise ConfigurationError(f"未知のスペクトル変換です: {kind}", "augment")


def spatial_transform(patch: Patch, kind: str, policy: AugmentPolicy, rng: np.random.Generator) -> Patch:
    """空間変換（flip_h / flip_v / mirror / crop / rotate）。全バンドに同じ変換を適用"""
    if kind == "flip_h":
        return patch.with_values(flip_horizontal(patch.values))
    if kind == "flip_v":
        return patch.with_values(flip_vertical(patch.values))
    if kind == "mirror":
        return patch.with_values(mirror(patch.values))
    if kind == "crop":
        p = patch.size
        q = int(rng.integers(policy.crop_minimum(p), p + 1))
        top = int(rng.integers(0, p - q + 1))
        left = int(rng.integers(0, p - q + 1))
        return patch.with_values(crop_resize(patch.values, top, left, q))
    if kind == "rotate":
        return patch.with_values(rotate90(patch.values, int(rng.integers(1, 4))))
    raise ConfigurationError(f"未知の空間変換です: {kind}", "augment")


def spectral_spatial_transform(patch: Patch, kind: str, policy: AugmentPolicy,
                               rng: np.random.Generator) -> Patch:
    """スペクトル空間変換（pixel_removal / noise）"""
    if kind == "pixel_removal":
        if not 0.0 <= policy.removal_fraction <= 1.0:
            raise ConfigurationError(f"除去割合が範囲外です: {policy.removal_fraction}", "augment.removal_fraction")
        area = patch.size * patch.size
        count = int(round(policy.removal_fraction * area))
        positions = rng.choice(area, size=count, replace=False)
        return patch.with_values(remove_pixels(patch.values, positions))
    if kind == "noise":
        return patch.with_values(add_noise(patch.values, policy.noise_sigma, rng))
    raise ConfigurationError(f"未知のスペクトル空間変換です: {kind}", "augment")


def _apply(patch: Patch, name: str, policy: AugmentPolicy, rng: np.random.Generator) -> Patch:
    if name == "channel_swap":
        return spectral_transform(patch, "swap", policy, rng)
    if name == "channel_drop":
        return spectral_transform(patch, "drop", policy, rng)
    if name == "channel_suppress":
        return spectral_transform(patch, "suppress", policy, rng)
    if name == "channel_average":
        return spectral_transform(patch, "average", policy, rng)
    if name == "flip":
        kind = ("flip_h", "flip_v", "mirror")[int(rng.integers(0, 3))]
        return spatial_transform(patch, kind, policy, rng)
    if name in ("crop", "rotate"):
        return spatial_transform(patch, name, policy, rng)
    return spectral_spatial_transform(patch, name, policy, rng)


def augment(patch: Patch, policy: AugmentPolicy, seed) -> Patch:
    """
    各変換を確率 φ で独立に適用する
    適用順は スペクトル → 空間 → スペクトル空間 で固定。seed が同じなら結果も同じ
    """
    policy.validate()
    if not policy.enabled:
        return patch
    rng = np.random.default_rng(seed)
    chosen = rng.random(len(TRANSFORM_ORDER)) < np.asarray(policy.phi)
    out = patch
    for name, apply in zip(TRANSFORM_ORDER, chosen):
        if apply:
            out = _apply(out, name, policy, rng)
    return out


def augment_batch(patches: Sequence[Patch], policy: AugmentPolicy, seed: int) -> List[Patch]:
    """パッチごとに (seed, index) から独立な乱数列を作って拡張"""
    return [
        augment(patch, policy, np.random.SeedSequence([seed, index]))
        for index, patch in enumerate(patches)
    ]
