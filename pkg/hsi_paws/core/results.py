# hsi_paws/core/results.py
"""
結果記録サービス
事前学習ランと評価レポートを SQLAlchemy で保存する
"""

from typing import Any, Dict, List, Optional

from sqlalchemy import func, select

from database.connection import DatabaseConnection
from database.models import PretrainRun, EvaluationRecord
from hsi_paws.core.interfaces import ResultRepositoryInterface
from hsi_paws.core.models import EvalReport, PretrainResult
from utils.logger import get_logger


class ResultsService(ResultRepositoryInterface):
    """結果データベース操作サービス"""

    def __init__(self, database_url: str):
        self.logger = get_logger()
        self._db_connection = DatabaseConnection(database_url)
        self._db_connection.initialize()

    @property
    def database_url(self) -> str:
        return self._db_connection.database_url

    def save_pretrain_run(self, result: PretrainResult, config_digest: str, seed: int,
                          model_path: Optional[str] = None) -> int:
        with self._db_connection.get_session() as session:
            record = PretrainRun(
                config_digest=config_digest,
                seed=seed,
                epochs=result.epochs,
                steps_per_epoch=result.steps_per_epoch,
                final_loss=result.final_loss,
                loss_trace=[float(v) for v in result.loss_trace],
                model_path=model_path
            )
            session.add(record)
            session.flush()
            run_id = record.id
        self.logger.debug(f"事前学習ランを記録: id={run_id}")
        return run_id

    def save_evaluation(self, report: EvalReport, model_path: Optional[str] = None,
                        note: Optional[str] = None) -> int:
        with self._db_connection.get_session() as session:
            record = EvaluationRecord(
                mode=report.mode,
                overall_accuracy=report.overall_accuracy,
                per_class_accuracy=[float(v) for v in report.per_class_accuracy],
                sample_count=report.sample_count,
                config_digest=report.config_digest,
                model_path=model_path,
                note=note
            )
            session.add(record)
            session.flush()
            record_id = record.id
        self.logger.debug(f"評価結果を記録: id={record_id} mode={report.mode}")
        return record_id

    def list_evaluations(self, mode: Optional[str] = None, limit: Optional[int] = None) -> List[Dict[str, Any]]:
        with self._db_connection.get_session() as session:
            query = select(EvaluationRecord).order_by(EvaluationRecord.id.desc())
            if mode:
                query = query.where(EvaluationRecord.mode == mode)
            if limit:
                query = query.limit(limit)
            return [record.to_dict() for record in session.scalars(query)]

    def list_pretrain_runs(self, limit: Optional[int] = None) -> List[Dict[str, Any]]:
        with self._db_connection.get_session() as session:
            query = select(PretrainRun).order_by(PretrainRun.id.desc())
            if limit:
                query = query.limit(limit)
            return [record.to_dict() for record in session.scalars(query)]

    def best_accuracy(self, mode: str) -> Optional[float]:
        with self._db_connection.get_session() as session:
            value = session.scalar(
                select(func.max(EvaluationRecord.overall_accuracy)).where(EvaluationRecord.mode == mode)
            )
            return float(value) if value is not None else None

    def close(self) -> None:
        self._db_connection.close()
