# database/connection.py
"""
結果データベース接続管理（SQLite）
"""

from contextlib import contextmanager
from pathlib import Path
from typing import Generator, Optional

from sqlalchemy import create_engine, event, text
from sqlalchemy.engine import Engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import sessionmaker, Session

from hsi_paws.core.exceptions import StorageError
from utils.logger import get_logger


def to_database_url(target: str) -> str:
    """ファイルパスまたは URL を SQLAlchemy の URL に変換"""
    if "://" in target:
        return target
    return f"sqlite:///{Path(target).resolve()}"


class DatabaseConnection:
    """結果データベース接続クラス"""

    def __init__(self, database_url: str):
        self.logger = get_logger()
        self.database_url = to_database_url(database_url)
        self.engine: Optional[Engine] = None
        self.SessionLocal: Optional[sessionmaker] = None
        self._is_initialized = False

    def initialize(self) -> None:
        """エンジン作成とテーブル作成"""
        if self._is_initialized:
            return
        try:
            self._ensure_database_directory()
            self.engine = create_engine(
                self.database_url,
                connect_args={"timeout": 30} if self.database_url.startswith("sqlite") else {},
                pool_pre_ping=True,
                echo=False
            )
            if self.database_url.startswith("sqlite"):
                self._configure_sqlite_engine()
            self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)

            from database.models import Base
            Base.metadata.create_all(bind=self.engine)

            with self.engine.connect() as connection:
                connection.execute(text("SELECT 1"))

            self._is_initialized = True
            self.logger.debug(f"結果データベース初期化: {self.database_url}")

        except SQLAlchemyError as e:
            self.logger.error(f"結果データベースの初期化に失敗しました: {e}")
            raise StorageError(f"結果データベースの初期化に失敗しました: {self.database_url}", e)
        except OSError as e:
            raise StorageError(f"結果データベースのディレクトリを作成できません: {self.database_url}", e)

    def _ensure_database_directory(self) -> None:
        if self.database_url.startswith("sqlite:///"):
            db_dir = Path(self.database_url.replace("sqlite:///", "")).parent
            db_dir.mkdir(parents=True, exist_ok=True)

    def _configure_sqlite_engine(self) -> None:
        @event.listens_for(self.engine, "connect")
        def set_sqlite_pragma(dbapi_connection, connection_record):
            cursor = dbapi_connection.cursor()
            cursor.execute("PRAGMA foreign_keys=ON")
            cursor.execute("PRAGMA synchronous=NORMAL")
            cursor.close()

    @contextmanager
    def get_session(self) -> Generator[Session, None, None]:
        """
        セッションを取得（コンテキストマネージャー）

        使用例:
            with connection.get_session() as session:
                session.add(record)
        """
        if not self._is_initialized:
            self.initialize()

        session = self.SessionLocal()
        try:
            yield session
            session.commit()
        except SQLAlchemyError as e:
            session.rollback()
            self.logger.error(f"結果データベースのセッションエラー: {e}")
            raise StorageError("結果データベースへの書き込みに失敗しました", e)
        except Exception:
            session.rollback()
            raise
        finally:
            session.close()

    def close(self) -> None:
        """接続を閉じる"""
        if self.engine:
            self.engine.dispose()
        self._is_initialized = False
