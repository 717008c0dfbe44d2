from sqlalchemy import create_engine, Column, Integer, String, Text, DateTime, Float, Boolean
from sqlalchemy.orm import sessionmaker, declarative_base
from datetime import datetime
from contextlib import contextmanager
from typing import Iterable, List, Optional
import json
import os
from dotenv import load_dotenv
import logging
import pytz

load_dotenv()
logger = logging.getLogger(__name__)

Base = declarative_base()


def utc_now():
    return datetime.now(pytz.utc).replace(tzinfo=None)


class RunRecord(Base):
    __tablename__ = "run_records"

    id = Column(Integer, primary_key=True, autoincrement=True)
    command = Column(String(50), nullable=False)
    subject_id = Column(String(255), nullable=False, index=True)
    model = Column(String(50), nullable=False)
    train_cycles = Column(Integer, nullable=True)
    horizon = Column(Integer, nullable=False)
    mae = Column(Float, nullable=True)
    sd = Column(Float, nullable=True)
    me = Column(Float, nullable=True)
    aami_pass = Column(Boolean, nullable=True)
    n_windows = Column(Integer, nullable=True, default=0)
    status = Column(String(20), nullable=False, default="ok")
    error = Column(Text, nullable=True)
    config = Column(Text, nullable=True)
    created_at = Column(DateTime, default=utc_now)

# --- Ledger configuration and session management ---

# Initialize variables so commands can run without a ledger
engine = None
SessionLocal = None
LEDGER_AVAILABLE = False


def configure_ledger(url: Optional[str] = None) -> bool:
    """Point the ledger at a SQLAlchemy URL (default: TABFORECAST_DB_URL); create tables."""
    global engine, SessionLocal, LEDGER_AVAILABLE
    url = url or os.getenv("TABFORECAST_DB_URL")
    engine, SessionLocal, LEDGER_AVAILABLE = None, None, False
    if not url:
        logger.warning("Run ledger URL not configured. Results will not be recorded.")
        return False
    try:
        engine = create_engine(url, pool_pre_ping=True)
        SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
        Base.metadata.create_all(bind=engine)
        LEDGER_AVAILABLE = True
        logger.info("Run ledger tables checked/created successfully")
    except Exception as e:
        logger.error(f"Run ledger connection failed: {e}. Results will not be recorded.")
    return LEDGER_AVAILABLE


@contextmanager
def get_db_session():
    if not LEDGER_AVAILABLE:
        raise RuntimeError("Run ledger not available")

    db = SessionLocal()
    try:
        yield db
        db.commit()
    except Exception as e:
        db.rollback()
        logger.error(f"Run ledger session error: {e}")
        raise
    finally:
        db.close()


def record_reports(command: str, reports: Iterable, effective_config: Optional[dict] = None,
                   failures: Iterable = ()) -> int:
    """Append one row per ForecastReport plus one per failed (subject, model, cycles, horizon, error)."""
    if not LEDGER_AVAILABLE:
        logger.warning("Run ledger not available, skipping recording")
        return 0
    config_text = json.dumps(effective_config, sort_keys=True, default=str) if effective_config else None
    rows: List[RunRecord] = []
    for report in reports:
        rows.append(RunRecord(
            command=command,
            subject_id=report.subject_id,
            model=report.model,
            train_cycles=report.train_cycles,
            horizon=report.horizon,
            mae=report.mae_mmHg,
            sd=report.sd_mmHg,
            me=report.me_mmHg,
            aami_pass=report.aami_pass,
            n_windows=report.n_windows,
            status="ok",
            config=config_text,
        ))
    for subject_id, model, train_cycles, horizon, error in failures:
        rows.append(RunRecord(command=command, subject_id=subject_id, model=model, train_cycles=train_cycles,
                              horizon=horizon, status="failed", error=error, config=config_text))
    try:
        with get_db_session() as db:
            db.add_all(rows)
        logger.info(f"Recorded {len(rows)} run(s) in the ledger")
    except Exception as e:
        logger.error(f"Error recording runs: {str(e)}")
        return 0
    return len(rows)


def recent_runs(limit: int = 20) -> List[dict]:
    if not LEDGER_AVAILABLE:
        return []
    with get_db_session() as db:
        records = db.query(RunRecord).order_by(RunRecord.id.desc()).limit(limit).all()
        return [
            {
                "id": r.id,
                "command": r.command,
                "subject_id": r.subject_id,
                "model": r.model,
                "train_cycles": r.train_cycles,
                "horizon": r.horizon,
                "mae": r.mae,
                "sd": r.sd,
                "status": r.status,
                "created_at": r.created_at.isoformat() if r.created_at else None,
            }
            for r in records
        ]
