# tests/conftest.py
"""
pytest 共通設定
slow マーカーと --runslow オプション、共通フィクスチャ
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# プロジェクトルートを取得
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="時間のかかるテストも実行する")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 時間のかかるテスト（--runslow で実行）")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="--runslow を指定すると実行されます")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch):
    """テストごとにグローバル設定と環境変数をリセット"""
    from hsi_paws.config import reset_settings
    from utils.logger import reset_logging

    for name in ("PAWS_LOG_LEVEL", "PAWS_LOG_FILE", "PAWS_SEED"):
        monkeypatch.delenv(name, raising=False)
    reset_settings()
    reset_logging()
    yield
    reset_settings()
    reset_logging()


def make_quadrant_cube(size: int = 24, bands: int = 16, noise: float = 0.02, seed: int = 3):
    """四象限にクラス 1..4 を置いた小さなキューブ（各クラス size²/4 画素）"""
    from hsi_paws.core.hsi_data import synthetic_class_means
    from hsi_paws.core.models import HsiCube, SyntheticSpec

    half = size // 2
    gt = np.ones((size, size), dtype=np.int64)
    gt[:half, half:] = 2
    gt[half:, :half] = 3
    gt[half:, half:] = 4
    means = synthetic_class_means(SyntheticSpec(rows=size, cols=size, bands=bands, classes=4, seed=seed))
    values = means[gt - 1] + np.random.default_rng(seed).normal(0.0, noise, size=(size, size, bands))
    return HsiCube(values=values.astype(np.float32), gt=gt)


@pytest.fixture
def small_cube():
    """4クラスの小さなキューブ（24×24×16）"""
    return make_quadrant_cube()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
