from pathlib import Path
from typing import Optional
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine, make_url
from sqlalchemy.orm import sessionmaker, Session
from .database import Base
from ..config import settings

_engine: Optional[Engine] = None
SessionLocal = sessionmaker(autocommit=False, autoflush=False)

def get_engine(url: Optional[str] = None) -> Engine:
    """Ledger engine, created on first use; sqlite parent directories are created as needed"""
    global _engine
    if _engine is not None and url is None:
        return _engine
    url = url or settings.ledger_url
    parsed = make_url(url)
    if parsed.drivername.startswith("sqlite") and parsed.database not in (None, "", ":memory:"):
        Path(parsed.database).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(
        url,
        echo=False,
        pool_pre_ping=True,
        connect_args={"check_same_thread": False} if parsed.drivername.startswith("sqlite") else {}
    )
    _engine = engine
    SessionLocal.configure(bind=engine)
    return engine

def init_db(url: Optional[str] = None) -> Engine:
    engine = get_engine(url)
    Base.metadata.create_all(bind=engine)
    return engine

def get_session() -> Session:
    if _engine is None:
        init_db()
    return SessionLocal()
