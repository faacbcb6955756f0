# database/models.py
"""
SQLAlchemyモデル定義
事前学習ランと評価結果の記録テーブル
"""

from datetime import datetime
from typing import Any, Dict

from sqlalchemy import Column, Integer, String, Text, JSON, DateTime, Float
from sqlalchemy.orm import declarative_base

Base = declarative_base()


class PretrainRun(Base):
    """事前学習ランテーブル"""
    __tablename__ = 'pretrain_runs'

    id = Column(Integer, primary_key=True, autoincrement=True)

    config_digest = Column(String(16), nullable=False, index=True, comment="解決済み設定の SHA-256 先頭16桁")
    seed = Column(Integer, nullable=False)
    epochs = Column(Integer, nullable=False)
    steps_per_epoch = Column(Integer, nullable=False)
    final_loss = Column(Float, comment="最終エポックの平均損失")
    loss_trace = Column(JSON, comment="エポックごとの平均損失")
    model_path = Column(String(500), comment="エンコーダーファイルのパス")

    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'config_digest': self.config_digest,
            'seed': self.seed,
            'epochs': self.epochs,
            'steps_per_epoch': self.steps_per_epoch,
            'final_loss': self.final_loss,
            'loss_trace': self.loss_trace or [],
            'model_path': self.model_path,
            'created_at': self.created_at.isoformat() if self.created_at else None
        }


class EvaluationRecord(Base):
    """評価結果テーブル"""
    __tablename__ = 'evaluations'

    id = Column(Integer, primary_key=True, autoincrement=True)

    mode = Column(String(20), nullable=False, index=True, comment="linear/finetune/snn/supervised/raw_snn")
    overall_accuracy = Column(Float, nullable=False)
    per_class_accuracy = Column(JSON, comment="クラス別精度")
    sample_count = Column(Integer, nullable=False)
    config_digest = Column(String(16), nullable=False)
    model_path = Column(String(500), comment="評価したエンコーダーファイル（未学習なら空）")
    note = Column(Text, comment="補足")

    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'mode': self.mode,
            'overall_accuracy': self.overall_accuracy,
            'per_class_accuracy': self.per_class_accuracy or [],
            'sample_count': self.sample_count,
            'config_digest': self.config_digest,
            'model_path': self.model_path,
            'note': self.note,
            'created_at': self.created_at.isoformat() if self.created_at else None
        }
