# hsi_paws/core/hsi_data.py
"""
ハイパースペクトルデータ層
キューブ/正解ファイルの入出力、合成キューブ生成、パッチ切り出し、
アンカー/ポジティブ対のサンプリング、サポート/テスト分割
"""

import struct
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from hsi_paws.core.models import HsiCube, Patch, ViewPair, SupportSet, SyntheticSpec
from hsi_paws.core.exceptions import (
    ConfigurationError,
    ValidationError,
    PatchRangeError,
    DataError,
    CubeFormatError,
    CubeTruncatedError,
    StorageError
)
from utils.logger import get_logger

PathLike = Union[str, Path]

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
CUBE_HEADER = struct.Struct("<4sHIII")
GT_MAGIC = b"HSIG"
GT_HEADER = struct.Struct("<4sII")

logger = get_logger()


# ファイル入出力

def default_gt_path(path: PathLike) -> Path:
    """キューブファイルに付随する正解ファイルのパス"""
    path = Path(path)
    return path.with_name(path.name + ".gt")


def read_cube_header(path: PathLike) -> Tuple[int, int, int]:
    """ヘッダーだけを読んで (M, N, B) を返す"""
    path = Path(path)
    try:
        with open(path, 'rb') as f:
            header = f.read(CUBE_HEADER.size)
    except OSError as e:
        raise StorageError(f"キューブファイルを開けません: {path}", e)

    if header[:4] != CUBE_MAGIC:
        raise CubeFormatError("キューブファイルのマジックが不正です", str(path))
    if len(header) < CUBE_HEADER.size:
        raise CubeTruncatedError(CUBE_HEADER.size, len(header), str(path))

    _, version, rows, cols, bands = CUBE_HEADER.unpack(header)
    if version != CUBE_VERSION:
        raise CubeFormatError(f"未対応のキューブバージョンです: {version}", str(path))
    return rows, cols, bands


def read_cube(path: PathLike, gt_path: Optional[PathLike] = None) -> HsiCube:
    """キューブファイルを読み込む（値はビット単位で保存時と一致）"""
    path = Path(path)
    rows, cols, bands = read_cube_header(path)

    expected = rows * cols * bands * 4
    actual = path.stat().st_size - CUBE_HEADER.size
    if actual != expected:
        raise CubeTruncatedError(expected, actual, str(path))

    with open(path, 'rb') as f:
        f.seek(CUBE_HEADER.size)
        values = np.fromfile(f, dtype="<f4", count=rows * cols * bands)
    values = values.astype(np.float32, copy=False).reshape(rows, cols, bands)
    values.flags.writeable = False

    gt = None
    if gt_path is not None:
        gt = read_gt(gt_path)
    elif default_gt_path(path).exists():
        gt = read_gt(default_gt_path(path))

    logger.debug(f"キューブ読み込み: {path} ({rows}x{cols}x{bands})")
    return HsiCube(values=values, gt=gt)


def write_cube(cube: HsiCube, path: PathLike, gt_path: Optional[PathLike] = None) -> None:
    """キューブファイルを書き込む（正解グリッドがあれば付随ファイルも書く）"""
    path = Path(path)
    header = CUBE_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, cube.rows, cube.cols, cube.bands)
    try:
        with open(path, 'wb') as f:
            f.write(header)
            f.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())
    except OSError as e:
        raise StorageError(f"キューブファイルに書き込めません: {path}", e)

    if cube.gt is not None:
        write_gt(cube.gt, gt_path if gt_path is not None else default_gt_path(path))

    logger.info(f"キューブ書き込み: {path} ({cube.rows}x{cube.cols}x{cube.bands})")


def read_gt(path: PathLike) -> np.ndarray:
    """正解ファイル（HSIG）を読み込む"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise StorageError(f"正解ファイルを開けません: {path}", e)

    if data[:4] != GT_MAGIC:
        raise CubeFormatError("正解ファイルのマジックが不正です", str(path))
    if len(data) < GT_HEADER.size:
        raise CubeTruncatedError(GT_HEADER.size, len(data), str(path))

    _, rows, cols = GT_HEADER.unpack_from(data)
    expected = rows * cols * 2
    actual = len(data) - GT_HEADER.size
    if actual != expected:
        raise CubeTruncatedError(expected, actual, str(path))

    grid = np.frombuffer(data, dtype="<u2", offset=GT_HEADER.size, count=rows * cols)
    return grid.reshape(rows, cols).astype(np.int64)


def write_gt(grid: np.ndarray, path: PathLike) -> None:
    """正解ファイル（HSIG）を書き込む"""
    path = Path(path)
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValidationError(f"正解グリッドは2次元である必要があります: {grid.shape}", "gt")
    if grid.size and (grid.min() < 0 or grid.max() > np.iinfo(np.uint16).max):
        raise ValidationError("正解ラベルは u16 の範囲である必要があります", "gt")
    try:
        with open(path, 'wb') as f:
            f.write(GT_HEADER.pack(GT_MAGIC, grid.shape[0], grid.shape[1]))
            f.write(np.ascontiguousarray(grid, dtype="<u2").tobytes())
    except OSError as e:
        raise StorageError(f"正解ファイルに書き込めません: {path}", e)


def normalize_cube(cube: HsiCube) -> HsiCube:
    """バンドごとの min-max 正規化で [0, 1] に収める（定数バンドは 0）"""
    values = cube.values.astype(np.float64)
    low = values.min(axis=(0, 1), keepdims=True)
    span = values.max(axis=(0, 1), keepdims=True) - low
    scaled = np.divide(values - low, span, out=np.zeros_like(values), where=span > 0)
    return cube.with_values(np.clip(scaled, 0.0, 1.0))


def load_cube(path: PathLike, gt_path: Optional[PathLike] = None, normalize: bool = True) -> HsiCube:
    """キューブを読み込み、学習用に正規化する"""
    cube = read_cube(path, gt_path)
    return normalize_cube(cube) if normalize else cube


# 合成キューブ

def synthetic_class_means(spec: SyntheticSpec) -> np.ndarray:
    """クラスごとの平均スペクトル曲線 (K×B, float32)"""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    bands = np.arange(spec.bands, dtype=np.float64)

    best, best_gap = None, -1.0
    # クラス間距離が最大の候補を採用（通常は1回目で十分離れる）
    for _ in range(32):
        curves = np.empty((spec.classes, spec.bands))
        for k in range(spec.classes):
            curve = np.full(spec.bands, rng.uniform(0.1, 0.4))
            for _ in range(3):
                amplitude = rng.uniform(0.1, 0.5)
                center = rng.uniform(0, spec.bands)
                width = rng.uniform(spec.bands / 10, spec.bands / 4)
                curve += amplitude * np.exp(-0.5 * ((bands - center) / width) ** 2)
            curves[k] = curve
        if spec.classes < 2:
            return curves.astype(np.float32)
        diffs = curves[:, None, :] - curves[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(axis=-1))
        gap = dist[np.triu_indices(spec.classes, 1)].min()
        if gap > best_gap:
            best, best_gap = curves, gap
        if gap > max(8 * spec.noise_sigma, 0.5):
            break
    return best.astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> HsiCube:
    """ボロノイ領域にクラスを割り当てた合成キューブを生成"""
    spec.validate()
    means = synthetic_class_means(spec)
    region_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))

    seeds_flat = region_rng.choice(spec.rows * spec.cols, size=spec.region_seeds, replace=False)
    seed_rc = np.stack(np.unravel_index(seeds_flat, (spec.rows, spec.cols)), axis=1)
    region_class = np.concatenate([
        np.arange(1, spec.classes + 1),
        region_rng.integers(1, spec.classes + 1, size=spec.region_seeds - spec.classes)
    ])

    grid_r, grid_c = np.mgrid[0:spec.rows, 0:spec.cols]
    coords = np.stack([grid_r.ravel(), grid_c.ravel()], axis=1)
    dist = ((coords[:, None, :] - seed_rc[None, :, :]) ** 2).sum(axis=-1)
    gt = region_class[np.argmin(dist, axis=1)].reshape(spec.rows, spec.cols)

    values = means[gt - 1]
    if spec.noise_sigma > 0:
        noise = noise_rng.normal(0.0, spec.noise_sigma, size=values.shape)
        values = (values.astype(np.float64) + noise).astype(np.float32)

    logger.info(
        f"合成キューブ生成: {spec.rows}x{spec.cols}x{spec.bands}, K={spec.classes}, "
        f"sigma={spec.noise_sigma}, seed={spec.seed}"
    )
    return HsiCube(values=values, gt=gt)


# パッチ切り出し

def _check_patch_size(p: int) -> None:
    if p < 1 or p % 2 == 0:
        raise ConfigurationError(f"パッチサイズは正の奇数である必要があります: {p}", "data.patch_size")


def extract_patch(cube: HsiCube, center: Tuple[int, int], p: int) -> Patch:
    """中心 (row, col) の p×p×B パッチを反射パディング付きで切り出す"""
    _check_patch_size(p)
    row, col = int(center[0]), int(center[1])
    if not (0 <= row < cube.rows and 0 <= col < cube.cols):
        raise PatchRangeError((row, col), cube.rows, cube.cols)

    half = p // 2
    if half <= row < cube.rows - half and half <= col < cube.cols - half:
        # 内部はコピーなしのビュー
        values = cube.values[row - half:row + half + 1, col - half:col + half + 1, :]
    else:
        # 境界では窓をキューブ内に切り詰め、端の画素を繰り返さない反射で補う
        r0, r1 = max(row - half, 0), min(row + half + 1, cube.rows)
        c0, c1 = max(col - half, 0), min(col + half + 1, cube.cols)
        pad = ((r0 - (row - half), row + half + 1 - r1), (c0 - (col - half), col + half + 1 - c1), (0, 0))
        values = np.pad(cube.values[r0:r1, c0:c1, :], pad, mode="reflect")
        values.flags.writeable = False

    label = None
    if cube.gt is not None and cube.gt[row, col] != 0:
        label = int(cube.gt[row, col])

    return Patch(values=values, center=(row, col), label=label)


# アンカー/ポジティブ対

def view_shift(p: int) -> int:
    """ポジティブ中心のずらし量 round(p/3)"""
    return int(round(p / 3))


def overlap_fraction(anchor: Tuple[int, int], positive: Tuple[int, int], p: int) -> float:
    """2つの p×p 窓の面積重なり率"""
    dr = abs(anchor[0] - positive[0])
    dc = abs(anchor[1] - positive[1])
    return max(0, p - dr) * max(0, p - dc) / (p * p)


def sample_view_centers(cube: HsiCube, p: int, count: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """アンカー中心とポジティブ中心（各 count×2）を一様サンプリング"""
    _check_patch_size(p)
    if count <= 0:
        raise ConfigurationError(f"サンプル数は正である必要があります: {count}", "data.unlabeled_count")
    if cube.rows <= p or cube.cols <= p:
        raise ValidationError(
            f"キューブ {cube.rows}x{cube.cols} はパッチサイズ {p} より大きい必要があります", "cube"
        )

    shift = view_shift(p)
    rng = np.random.default_rng(seed)
    axis = rng.integers(0, 2, size=count)
    sign = rng.choice(np.array([-1, 1]), size=count)

    along_rows = axis == 0
    row_low = np.where(along_rows & (sign < 0), shift, 0)
    row_high = np.where(along_rows & (sign > 0), cube.rows - 1 - shift, cube.rows - 1)
    col_low = np.where(~along_rows & (sign < 0), shift, 0)
    col_high = np.where(~along_rows & (sign > 0), cube.cols - 1 - shift, cube.cols - 1)

    anchors = np.stack([
        rng.integers(row_low, row_high + 1),
        rng.integers(col_low, col_high + 1)
    ], axis=1)
    offsets = np.stack([along_rows * sign * shift, ~along_rows * sign * shift], axis=1)
    return anchors, anchors + offsets


def sample_view_pairs(cube: HsiCube, p: int, count: int, seed: int) -> List[ViewPair]:
    """単一軸に round(p/3) 画素ずらした重なりパッチ対を count 個生成"""
    anchors, positives = sample_view_centers(cube, p, count, seed)
    pairs = []
    for a, b in zip(anchors.tolist(), positives.tolist()):
        pairs.append(ViewPair(
            anchor=extract_patch(cube, a, p),
            positive=extract_patch(cube, b, p),
            overlap_fraction=overlap_fraction(a, b, p)
        ))
    logger.debug(f"ビュー対サンプリング: {count}対 (p={p}, shift={view_shift(p)})")
    return pairs


# サポート/テスト分割

def _one_hot(indices: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.zeros((len(indices), class_count))
    labels[np.arange(len(indices)), indices] = 1.0
    return labels


def build_splits(cube: HsiCube,
                 per_class: int,
                 seed: int,
                 test_gt: Optional[np.ndarray] = None,
                 p: int = 9) -> Tuple[SupportSet, List[Patch]]:
    """クラスごとに per_class 個のサポートを抽出し、残りのラベル付き画素をテストにする"""
    if cube.gt is None:
        raise DataError("正解グリッドがないため分割できません")
    if per_class <= 0:
        raise ConfigurationError(f"クラスあたりのサポート数は正である必要があります: {per_class}",
                                 "data.support_per_class")

    class_ids = cube.class_ids
    rng = np.random.default_rng(seed)
    support_patches: List[Patch] = []
    support_classes: List[int] = []
    support_mask = np.zeros(cube.gt.shape, dtype=bool)

    for column, class_id in enumerate(class_ids):
        positions = np.argwhere(cube.gt == class_id)
        if len(positions) < per_class:
            raise DataError(
                f"クラス {class_id} のラベル付き画素が {len(positions)} 個しかありません（必要: {per_class}）",
                class_id=class_id
            )
        chosen = positions[np.sort(rng.choice(len(positions), size=per_class, replace=False))]
        for r, c in chosen.tolist():
            support_patches.append(extract_patch(cube, (r, c), p))
            support_classes.append(column)
            support_mask[r, c] = True

    support = SupportSet(
        patches=support_patches,
        labels=_one_hot(np.array(support_classes), len(class_ids)),
        class_ids=class_ids,
        per_class=per_class
    )

    if test_gt is None:
        test_positions = np.argwhere((cube.gt != 0) & ~support_mask)
        test = [extract_patch(cube, (r, c), p) for r, c in test_positions.tolist()]
    else:
        test_gt = np.asarray(test_gt)
        if test_gt.shape != cube.gt.shape:
            raise ValidationError(f"テスト正解の形状 {test_gt.shape} がキューブと一致しません", "test_gt")
        unknown = set(int(c) for c in np.unique(test_gt) if c != 0) - set(class_ids)
        if unknown:
            raise DataError(f"サポートにないクラスがテスト正解に含まれています: {sorted(unknown)}",
                            class_id=min(unknown))
        test_positions = np.argwhere((test_gt != 0) & ~support_mask)
        test = []
        for r, c in test_positions.tolist():
            patch = extract_patch(cube, (r, c), p)
            test.append(Patch(values=patch.values, center=patch.center, label=int(test_gt[r, c])))

    logger.info(f"分割完了: サポート {len(support)} パッチ ({len(class_ids)}クラス), テスト {len(test)} パッチ")
    return support, test


def class_balanced_draw(support: SupportSet, per_class: int, rng: np.random.Generator) -> SupportSet:
    """サポートセットからクラス均衡なサブセットを抽出"""
    take = min(per_class, support.per_class)
    indices = support.label_indices
    chosen = []
    for column in range(support.class_count):
        members = np.flatnonzero(indices == column)
        chosen.extend(np.sort(rng.choice(members, size=take, replace=False)).tolist())
    return SupportSet(
        patches=[support.patches[i] for i in chosen],
        labels=support.labels[chosen],
        class_ids=support.class_ids,
        per_class=take
    )
