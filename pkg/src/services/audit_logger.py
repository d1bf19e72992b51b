from sqlalchemy.orm import Session
from src.models.database import AuditLog, RunRecord
from src.models.enums import RunStatus
from datetime import datetime
import json
import logging
from typing import Optional, Dict

logger = logging.getLogger(__name__)

class AuditLogger:
    """Records every command run and its stage events in the run ledger"""

    def __init__(self, db: Session):
        self.db = db
        self.run: Optional[RunRecord] = None

    def start_run(self, command: str, run_dir: str, config_hash: Optional[str], tool_version: str) -> RunRecord:
        self.run = RunRecord(
            command=command,
            run_dir=str(run_dir),
            config_hash=config_hash,
            tool_version=tool_version,
            status=RunStatus.RUNNING,
            started_at=datetime.utcnow()
        )
        self.db.add(self.run)
        self.db.commit()
        return self.run

    def log(
        self,
        action: str,
        details: Dict = None,
        performed_by: str = "ddnet",
        severity: str = "info"
    ):
        log_entry = AuditLog(
            action=action,
            run_id=self.run.id if self.run else None,
            details=json.dumps(details or {}, sort_keys=True, default=str),
            performed_by=performed_by,
            severity=severity,
            timestamp=datetime.utcnow()
        )
        self.db.add(log_entry)
        self.db.commit()

    def finish_run(self, exit_code: int, summary: str = "") -> Optional[RunRecord]:
        if self.run is None:
            logger.warning("finish_run called without an open run")
            return None
        self.run.exit_code = exit_code
        self.run.status = RunStatus.SUCCEEDED if exit_code == 0 else RunStatus.FAILED
        self.run.summary = summary
        self.run.finished_at = datetime.utcnow()
        self.db.commit()
        return self.run
