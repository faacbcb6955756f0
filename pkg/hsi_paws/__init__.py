# hsi_paws/__init__.py
"""
ハイパースペクトル画像パッチの PAWS 半教師あり事前学習
データ層・拡張・エンコーダー・損失・オプティマイザ・下流評価・CLI
"""

__version__ = "1.0.0"
__description__ = "PAWS-style semi-supervised pretraining for hyperspectral image patches"
