# paws.py
"""
PAWS パイプラインのコマンドライン起動スクリプト

このファイルの配置場所: プロジェクトルート/paws.py
"""

import sys
from pathlib import Path

project_root = Path(__file__).parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from hsi_paws.cli import main


if __name__ == "__main__":
    main()
