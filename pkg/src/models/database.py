from sqlalchemy import Column, String, DateTime, Text, ForeignKey, Enum as SQLEnum, Integer
from sqlalchemy.ext.declarative import declarative_base
from sqlalchemy.orm import relationship
from datetime import datetime
import uuid
from .enums import RunStatus

Base = declarative_base()

def generate_uuid():
    return str(uuid.uuid4())

class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(String(36), primary_key=True, default=generate_uuid)
    command = Column(String, nullable=False)
    run_dir = Column(String, nullable=False)
    config_hash = Column(String(64))
    tool_version = Column(String, nullable=False)
    status = Column(SQLEnum(RunStatus), default=RunStatus.RUNNING)
    exit_code = Column(Integer)
    summary = Column(Text)  # the one-line summary printed by the command
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime)

    events = relationship("AuditLog", back_populates="run", cascade="all, delete-orphan")

class AuditLog(Base):
    __tablename__ = "audit_logs"

    id = Column(String(36), primary_key=True, default=generate_uuid)
    timestamp = Column(DateTime, default=datetime.utcnow)
    run_id = Column(String(36), ForeignKey("runs.id"))
    action = Column(String, nullable=False)
    details = Column(Text, default="{}")
    performed_by = Column(String, default="ddnet")
    severity = Column(String, default="info")

    run = relationship("RunRecord", back_populates="events")
