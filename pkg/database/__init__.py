# database/__init__.py
"""
結果データベースパッケージ
"""

from database.models import Base, PretrainRun, EvaluationRecord
from database.connection import DatabaseConnection, to_database_url

__all__ = [
    "Base",
    "PretrainRun",
    "EvaluationRecord",
    "DatabaseConnection",
    "to_database_url",
]
