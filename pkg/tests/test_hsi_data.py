# tests/test_hsi_data.py
"""
データ層のテスト
キューブ/正解ファイル・合成キューブ・パッチ切り出し・ビュー対・サポート分割
"""

import struct
import sys
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal

# プロジェクトルートを取得
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from hsi_paws.core.hsi_data import (
    build_splits,
    class_balanced_draw,
    default_gt_path,
    extract_patch,
    generate_synthetic,
    normalize_cube,
    read_cube,
    read_cube_header,
    read_gt,
    sample_view_centers,
    sample_view_pairs,
    synthetic_class_means,
    write_cube,
    write_gt
)
from hsi_paws.core.models import HsiCube, SyntheticSpec
from hsi_paws.core.exceptions import (
    ConfigurationError,
    CubeFormatError,
    CubeTruncatedError,
    DataError,
    PatchRangeError,
    ValidationError
)


def _arange_cube(rows=5, cols=5, bands=3, gt=None):
    values = np.arange(rows * cols * bands, dtype=np.float32).reshape(rows, cols, bands)
    return HsiCube(values=values, gt=gt)


class TestCubeFiles:
    """キューブ・正解ファイルの入出力"""

    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        """書き込み→読み込みでビット単位に一致"""
        values = rng.normal(size=(7, 5, 4)).astype(np.float32)
        gt = rng.integers(0, 4, size=(7, 5))
        path = tmp_path / "cube.hsic"
        write_cube(HsiCube(values=values, gt=gt), path)

        loaded = read_cube(path)
        assert loaded.values.tobytes() == values.tobytes()
        assert_array_equal(loaded.gt, gt)
        assert default_gt_path(path).exists()

    def test_houston_shaped_header(self, tmp_path):
        """Houston 形状 (349×1905×144) のヘッダー"""
        path = tmp_path / "houston.hsic"
        path.write_bytes(struct.pack("<4sHIII", b"HSIC", 1, 349, 1905, 144))
        assert read_cube_header(path) == (349, 1905, 144)

    def test_pavia_shaped_header(self, tmp_path):
        """Pavia 形状 (610×340×103) のヘッダー"""
        path = tmp_path / "pavia.hsic"
        path.write_bytes(struct.pack("<4sHIII", b"HSIC", 1, 610, 340, 103))
        assert read_cube_header(path) == (610, 340, 103)

    @pytest.mark.slow
    def test_houston_sized_round_trip(self, tmp_path):
        """Houston サイズのキューブ全体の往復"""
        values = np.random.default_rng(0).random((349, 1905, 144), dtype=np.float32)
        path = tmp_path / "houston.hsic"
        write_cube(HsiCube(values=values), path)
        assert read_cube(path).values.tobytes() == values.tobytes()

    def test_bad_magic_is_format_error(self, tmp_path):
        path = tmp_path / "bad.hsic"
        path.write_bytes(struct.pack("<4sHIII", b"XXXX", 1, 1, 1, 1) + b"\0" * 4)
        with pytest.raises(CubeFormatError):
            read_cube(path)

    def test_unknown_version_is_format_error(self, tmp_path):
        path = tmp_path / "v2.hsic"
        path.write_bytes(struct.pack("<4sHIII", b"HSIC", 2, 1, 1, 1) + b"\0" * 4)
        with pytest.raises(CubeFormatError):
            read_cube(path)

    def test_truncated_payload(self, tmp_path):
        """宣言サイズよりペイロードが短い"""
        path = tmp_path / "short.hsic"
        path.write_bytes(struct.pack("<4sHIII", b"HSIC", 1, 2, 2, 2) + b"\0" * 12)
        with pytest.raises(CubeTruncatedError) as exc:
            read_cube(path)
        assert exc.value.expected == 32
        assert exc.value.actual == 12

    def test_gt_round_trip(self, tmp_path):
        grid = np.array([[0, 1, 65535], [2, 0, 3]])
        path = tmp_path / "labels.gt"
        write_gt(grid, path)
        assert_array_equal(read_gt(path), grid)

    def test_zero_band_cube_rejected(self):
        with pytest.raises(ValidationError):
            HsiCube(values=np.zeros((2, 2, 0), dtype=np.float32))

    def test_normalize_is_per_band_min_max(self):
        values = np.zeros((2, 2, 2), dtype=np.float32)
        values[..., 0] = [[1, 3], [5, 9]]
        values[..., 1] = 7.0
        out = normalize_cube(HsiCube(values=values))
        np.testing.assert_allclose(out.values[..., 0], [[0, 0.25], [0.5, 1.0]])
        assert_array_equal(out.values[..., 1], 0.0)


class TestSynthetic:
    """合成キューブ"""

    def test_zero_noise_pixels_equal_class_means(self):
        """σ=0 なら各画素はクラス平均曲線そのもの"""
        spec = SyntheticSpec(rows=16, cols=16, bands=8, classes=3, noise_sigma=0.0, region_seeds=5, seed=2)
        cube = generate_synthetic(spec)
        means = synthetic_class_means(spec)
        for class_id in cube.class_ids:
            pixels = cube.values[cube.gt == class_id]
            assert_array_equal(pixels, np.broadcast_to(means[class_id - 1], pixels.shape))

    def test_every_class_present(self):
        cube = generate_synthetic(SyntheticSpec(rows=20, cols=20, bands=8, classes=4, region_seeds=4, seed=9))
        assert cube.class_ids == (1, 2, 3, 4)

    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(rows=12, cols=12, bands=8, classes=2, region_seeds=3, seed=5)
        assert generate_synthetic(spec).values.tobytes() == generate_synthetic(spec).values.tobytes()

    def test_more_classes_than_regions_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic(SyntheticSpec(classes=5, region_seeds=4))

    def test_class_means_separated_by_four_sigma(self):
        """生成キューブから再計算したクラス平均の距離 > 4σ"""
        spec = SyntheticSpec(rows=64, cols=64, bands=32, classes=4, noise_sigma=0.05, seed=0)
        cube = generate_synthetic(spec)
        means = np.stack([cube.values[cube.gt == class_id].mean(axis=0) for class_id in cube.class_ids])
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                assert np.linalg.norm(means[i] - means[j]) > 4 * spec.noise_sigma


class TestExtractPatch:
    """パッチ切り出し"""

    def test_interior_patch_is_view(self):
        cube = _arange_cube()
        patch = extract_patch(cube, (2, 2), 3)
        assert_array_equal(patch.values, cube.values[1:4, 1:4, :])
        assert np.shares_memory(patch.values, cube.values)

    def test_reflect_padding_at_corner(self):
        """境界は端の画素を繰り返さない反射"""
        cube = _arange_cube()
        patch = extract_patch(cube, (0, 0), 3)
        assert_array_equal(patch.values[0, 0], cube.values[1, 1])
        assert_array_equal(patch.values[1, 1], cube.values[0, 0])
        assert_array_equal(patch.values[2, 0], cube.values[1, 1])

    def test_corner_patches_on_4x4x2_cube(self):
        """4×4×2 キューブの角パッチを手計算の値と比較"""
        cube = _arange_cube(4, 4, 2)
        top_left = extract_patch(cube, (0, 0), 3).values
        assert_array_equal(top_left[..., 0], [[10, 8, 10], [2, 0, 2], [10, 8, 10]])
        assert_array_equal(top_left[..., 1], [[11, 9, 11], [3, 1, 3], [11, 9, 11]])
        bottom_right = extract_patch(cube, (3, 3), 3).values
        assert_array_equal(bottom_right[..., 0], [[20, 22, 20], [28, 30, 28], [20, 22, 20]])

    @pytest.mark.parametrize("p", [3, 5])
    def test_every_center_matches_scalar_reflection(self, p):
        cube = _arange_cube(4, 4, 2)
        half = p // 2

        def reflect(i, n):
            if i < 0:
                return -i
            if i >= n:
                return 2 * (n - 1) - i
            return i

        for row in range(4):
            for col in range(4):
                patch = extract_patch(cube, (row, col), p).values
                for i in range(p):
                    for j in range(p):
                        r = reflect(row - half + i, 4)
                        c = reflect(col - half + j, 4)
                        assert_array_equal(patch[i, j], cube.values[r, c])

    def test_pavia_shaped_patch(self):
        """p=9 で 9×9×103、中心は元画素と一致"""
        values = np.arange(610 * 340 * 103, dtype=np.float32).reshape(610, 340, 103)
        cube = HsiCube(values=values)
        for center in [(300, 200), (0, 0), (609, 339), (4, 338)]:
            patch = extract_patch(cube, center, 9)
            assert patch.values.shape == (9, 9, 103)
            assert_array_equal(patch.values[4, 4], cube.values[center])

    def test_center_label(self):
        gt = np.zeros((5, 5), dtype=int)
        gt[2, 2] = 4
        cube = _arange_cube(gt=gt)
        assert extract_patch(cube, (2, 2), 3).label == 4
        assert extract_patch(cube, (1, 1), 3).label is None

    def test_out_of_range_center(self):
        with pytest.raises(PatchRangeError):
            extract_patch(_arange_cube(), (5, 0), 3)

    def test_even_patch_size_rejected(self):
        with pytest.raises(ConfigurationError):
            extract_patch(_arange_cube(), (2, 2), 4)


class TestViewPairs:
    """アンカー/ポジティブ対"""

    def test_overlap_is_two_thirds_at_p9(self, small_cube):
        """p=9 では全ペアの重なり率が 6/9"""
        pairs = sample_view_pairs(small_cube, 9, 200, seed=0)
        assert all(pair.overlap_fraction == 6 / 9 for pair in pairs)

    def test_overlap_law_on_many_centers(self):
        """10^5 対の中心はすべて単一軸に3画素ずれ、範囲内"""
        cube = HsiCube(values=np.zeros((40, 50, 1), dtype=np.float32))
        anchors, positives = sample_view_centers(cube, 9, 100_000, seed=11)
        delta = np.abs(anchors - positives)
        assert np.all(np.sort(delta, axis=1) == [0, 3])
        assert positives[:, 0].min() >= 0 and positives[:, 0].max() < 40
        assert positives[:, 1].min() >= 0 and positives[:, 1].max() < 50

    def test_deterministic(self, small_cube):
        a = sample_view_centers(small_cube, 5, 50, seed=4)
        b = sample_view_centers(small_cube, 5, 50, seed=4)
        assert_array_equal(a[0], b[0])
        assert_array_equal(a[1], b[1])

    def test_nonpositive_count_rejected(self, small_cube):
        with pytest.raises(ConfigurationError):
            sample_view_pairs(small_cube, 9, 0, seed=0)

    def test_houston_pair_count(self):
        cube = HsiCube(values=np.zeros((64, 64, 2), dtype=np.float32))
        pairs = sample_view_pairs(cube, 9, 71416, seed=0)
        assert len(pairs) == 71416
        assert pairs[0].anchor.values.shape == (9, 9, 2)

    def test_cube_not_larger_than_patch(self):
        cube = HsiCube(values=np.zeros((9, 20, 2), dtype=np.float32))
        with pytest.raises(ValidationError):
            sample_view_pairs(cube, 9, 1, seed=0)


class TestSplits:
    """サポート/テスト分割"""

    def test_support_has_per_class_samples(self, small_cube):
        support, test = build_splits(small_cube, 5, seed=0, p=5)
        assert len(support) == 5 * len(small_cube.class_ids)
        assert_array_equal(support.labels.sum(axis=0), 5)
        assert len(test) == small_cube.labelled_count - len(support)

    def test_support_centers_not_in_test(self, small_cube):
        support, test = build_splits(small_cube, 3, seed=1, p=5)
        assert not set(support.centers) & {patch.center for patch in test}

    def test_too_few_samples_names_class(self):
        gt = np.zeros((6, 6), dtype=int)
        gt[:3] = 1
        gt[5, 5] = 2
        cube = _arange_cube(6, 6, 2, gt=gt)
        with pytest.raises(DataError) as exc:
            build_splits(cube, 2, seed=0, p=3)
        assert exc.value.class_id == 2

    def test_zero_per_class_rejected(self, small_cube):
        with pytest.raises(ConfigurationError):
            build_splits(small_cube, 0, seed=0, p=5)

    def test_houston_support_size(self):
        """15クラス × 100 = 1500"""
        gt = np.zeros((349, 1905), dtype=int)
        gt.ravel()[:15 * 120] = np.repeat(np.arange(1, 16), 120)
        cube = HsiCube(values=np.zeros((349, 1905, 1), dtype=np.float32), gt=gt)
        support, test = build_splits(cube, 100, seed=0, p=9)
        assert len(support) == 1500
        assert len(test) == 15 * 20

    def test_pavia_split_sizes(self):
        """9クラス・ラベル付き 42776 画素 → サポート 900, テスト 41876"""
        gt = np.zeros((610, 340), dtype=int)
        gt.ravel()[:42776] = np.arange(42776) % 9 + 1
        cube = HsiCube(values=np.zeros((610, 340, 1), dtype=np.float32), gt=gt)
        support, test = build_splits(cube, 100, seed=0, p=9)
        assert len(support) == 900
        assert len(test) == 41876

    def test_separate_test_ground_truth(self, small_cube):
        """テスト用正解を与えるとその画素のみがテストになる"""
        test_gt = np.zeros_like(small_cube.gt)
        test_gt[0, :] = small_cube.gt[0, :]
        support, test = build_splits(small_cube, 2, seed=0, test_gt=test_gt, p=5)
        assert all(patch.center[0] == 0 for patch in test)
        assert all(patch.label == small_cube.gt[patch.center] for patch in test)

    def test_class_balanced_draw(self, small_cube):
        support, _ = build_splits(small_cube, 6, seed=0, p=5)
        draw = class_balanced_draw(support, 10, np.random.default_rng(0))
        assert draw.per_class == 6
        draw = class_balanced_draw(support, 2, np.random.default_rng(0))
        assert_array_equal(draw.labels.sum(axis=0), 2)
