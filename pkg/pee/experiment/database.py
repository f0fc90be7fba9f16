from __future__ import annotations

import datetime
from typing import List, Optional

from sqlalchemy import DateTime, String
from sqlalchemy.orm import Mapped, Session, mapped_column

from pee.database import Base

VERSION = 1


class StageRecord(Base):
    """Cached output of one pipeline stage.

    :param stage: Stage name.
    :param key: Config hash of the stage and of everything it depends on.
    :param path: Artifact directory, relative to the experiment output.
    :param content_hash: Hash over the artifact files.
    :param created: When the stage finished.
    """

    __tablename__ = "stage_records"

    stage: Mapped[str] = mapped_column(String, primary_key=True)
    key: Mapped[str] = mapped_column(String, primary_key=True)
    path: Mapped[str] = mapped_column(String)
    content_hash: Mapped[str] = mapped_column(String)
    created: Mapped[datetime.datetime] = mapped_column(DateTime)

    def __repr__(self) -> str:
        return (
            f"<{self.__class__.__name__} stage='{self.stage}' key='{self.key[:8]}' "
            f"path='{self.path}'>"
        )

    @staticmethod
    def get(session: Session, stage: str, key: str) -> Optional[StageRecord]:
        return session.query(StageRecord).filter_by(stage=stage, key=key).one_or_none()

    @staticmethod
    def set(
        session: Session, stage: str, key: str, path: str, content_hash: str
    ) -> StageRecord:
        record = StageRecord(
            stage=stage,
            key=key,
            path=path,
            content_hash=content_hash,
            created=datetime.datetime.now().replace(microsecond=0),
        )
        session.merge(record)
        session.commit()
        return record

    @staticmethod
    def remove(session: Session, stage: str, key: str) -> int:
        count = session.query(StageRecord).filter_by(stage=stage, key=key).delete()
        session.commit()
        return count

    @staticmethod
    def get_all(session: Session, stage: Optional[str] = None) -> List[StageRecord]:
        query = session.query(StageRecord)
        if stage is not None:
            query = query.filter_by(stage=stage)
        return query.order_by(StageRecord.stage, StageRecord.created).all()

    def dump(self) -> dict:
        return {
            "stage": self.stage,
            "key": self.key,
            "path": self.path,
            "content_hash": self.content_hash,
            "created": self.created.isoformat(),
        }
