import json
import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from src.models.database import Base, AuditLog, RunRecord
from src.models.enums import RunStatus
from src.services.audit_logger import AuditLogger

@pytest.fixture
def db_session():
    engine = create_engine("sqlite:///:memory:")
    Base.metadata.create_all(engine)
    SessionLocal = sessionmaker(bind=engine)
    session = SessionLocal()
    yield session
    session.close()

def test_start_run(db_session):
    logger = AuditLogger(db_session)
    logger.start_run("gen-data", "runs/abc", "f" * 64, "0.1.0")

    runs = db_session.query(RunRecord).all()
    assert len(runs) == 1
    assert runs[0].command == "gen-data"
    assert runs[0].status == RunStatus.RUNNING
    assert runs[0].finished_at is None

def test_log_attaches_to_open_run(db_session):
    logger = AuditLogger(db_session)
    run = logger.start_run("train-prednet", "runs/abc", None, "0.1.0")

    logger.log(
        action="epoch_finished",
        details={"epoch": 1, "loss": 0.25},
        severity="info"
    )

    logs = db_session.query(AuditLog).all()
    assert len(logs) == 1
    assert logs[0].run_id == run.id
    assert json.loads(logs[0].details) == {"epoch": 1, "loss": 0.25}
    assert logs[0].performed_by == "ddnet"

def test_log_without_run(db_session):
    logger = AuditLogger(db_session)

    logger.log(action="verify_started")

    logs = db_session.query(AuditLog).all()
    assert logs[0].run_id is None
    assert logs[0].details == "{}"

def test_log_warning(db_session):
    logger = AuditLogger(db_session)
    logger.start_run("cycle", "runs/abc", None, "0.1.0")

    logger.log(action="da_skipped", details={"step": 67}, severity="warning")
    logger.log(action="da_applied", details={"step": 68})

    logs = db_session.query(AuditLog).filter(AuditLog.severity == "warning").all()
    assert len(logs) == 1
    assert logs[0].action == "da_skipped"

def test_finish_run_success(db_session):
    logger = AuditLogger(db_session)
    logger.start_run("report", "runs/abc", None, "0.1.0")

    run = logger.finish_run(0, "report: 12 files")

    assert run.status == RunStatus.SUCCEEDED
    assert run.exit_code == 0
    assert run.summary == "report: 12 files"
    assert run.finished_at is not None

def test_finish_run_failure(db_session):
    logger = AuditLogger(db_session)
    logger.start_run("cycle", "runs/abc", None, "0.1.0")

    run = logger.finish_run(2, "cycle failed")

    assert db_session.query(RunRecord).filter(RunRecord.status == RunStatus.FAILED).count() == 1
    assert run.exit_code == 2

def test_finish_without_run(db_session):
    assert AuditLogger(db_session).finish_run(0) is None
