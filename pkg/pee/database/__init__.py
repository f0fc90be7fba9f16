from __future__ import annotations

import importlib
import os
from pathlib import Path
from typing import Optional, Union

from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import DeclarativeBase, Session, sessionmaker

from pee.cli import COLOR


class Base(DeclarativeBase):
    pass


class Database:
    """Connection to the stage cache index of one experiment.

    :param url: SQLAlchemy database URL.
    """

    def __init__(self, url: str):
        self.url: str = url
        self.base = Base
        self.db: Engine = create_engine(url)
        self.session: Session = sessionmaker(self.db, future=True)()

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} url='{self.url}'>"

    def close(self) -> None:
        self.session.close()
        self.db.dispose()


def database_url(directory: Union[str, Path]) -> str:
    """``PEEL_DB_STRING`` if set, SQLite file in ``directory`` otherwise."""
    url: Optional[str] = os.getenv("PEEL_DB_STRING")
    if url:
        return url
    path = Path(directory).resolve() / "cache.db"
    path.parent.mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{path}"


def connect(directory: Union[str, Path], *, verbose: bool = False) -> Database:
    """Open the database and create the tables of all known models."""
    database = Database(database_url(directory))
    for module_name in ("pee.experiment.database",):
        _import_database(database, module_name, verbose=verbose)
    return database


def _import_database(database: Database, module_name: str, *, verbose: bool) -> None:
    try:
        db_module = importlib.import_module(module_name)
        module_version: int = getattr(db_module, "VERSION", 1)
        database.base.metadata.create_all(database.db)
        database.session.commit()
        if verbose:
            print(
                f"Database models {COLOR.green}{module_name}{COLOR.none}"
                + f" version {COLOR.green}{module_version}{COLOR.none} imported."
            )
    except Exception as exc:
        database.session.rollback()
        print(
            f"Database models {COLOR.red}{module_name}{COLOR.none} failed: "
            f"{COLOR.cursive}{exc}{COLOR.none}."
        )  # noqa: T001
        raise
