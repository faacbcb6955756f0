# hsi_paws/core/interfaces.py
"""
インターフェース定義
結果保存層を差し替え可能にするための抽象クラス
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional

from hsi_paws.core.models import EvalReport, PretrainResult


class ResultRepositoryInterface(ABC):
    """事前学習ラン・評価結果リポジトリインターフェース"""

    @abstractmethod
    def save_pretrain_run(self, result: PretrainResult, config_digest: str, seed: int,
                          model_path: Optional[str] = None) -> int:
        """事前学習ランを保存して ID を返す"""
        pass

    @abstractmethod
    def save_evaluation(self, report: EvalReport, model_path: Optional[str] = None,
                        note: Optional[str] = None) -> int:
        """評価レポートを保存して ID を返す"""
        pass

    @abstractmethod
    def list_evaluations(self, mode: Optional[str] = None, limit: Optional[int] = None) -> List[Dict[str, Any]]:
        """評価結果を新しい順に取得"""
        pass

    @abstractmethod
    def best_accuracy(self, mode: str) -> Optional[float]:
        """モード別の最高精度"""
        pass
