"""Run registry backed by SQLite.

Every CLI run that produces estimates can be recorded with its seed, a
digest of its configuration and its final log-likelihoods, together with the
per-parameter estimates.  The registry lives outside the output directory
and never influences the artifacts of a run.  It uses SQLAlchemy so the
location can be any database URL; set ``LATENTCHOICE_DATABASE_URL`` to move
it, or ``LATENTCHOICE_RECORD_RUNS=false`` to disable recording.

Functions
---------
record_run(command, seed, config_digest, model, final_ll, n_obs, converged, out_dir) -> int | None
    Persist a run and return its id.
record_estimates(run_id, model, parameters) -> None
    Persist the parameter table of one model of a run.
get_runs(limit=None) -> list[dict]
    Runs, newest first.
get_estimates(run_id) -> list[dict]
    Estimates of a run in insertion order.
clear_runs() -> None
    Delete all runs and estimates.
"""

from __future__ import annotations

import logging
from functools import lru_cache
from typing import Iterable, List, Optional

from sqlalchemy import Boolean, Column, Float, ForeignKey, Integer, String, create_engine, delete, select
from sqlalchemy.orm import declarative_base, sessionmaker

from .config import get_settings
from .inference import ParameterStat

logger = logging.getLogger(__name__)

Base = declarative_base()


class Run(Base):
    """ORM model of one recorded CLI run."""

    __tablename__ = "runs"
    id = Column(Integer, primary_key=True, autoincrement=True)
    command = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    config_digest = Column(String, nullable=False)
    model = Column(String, nullable=False)
    final_ll = Column(Float, nullable=True)
    n_obs = Column(Integer, nullable=False)
    converged = Column(Boolean, nullable=False)
    out_dir = Column(String, nullable=True)


class Estimate(Base):
    """ORM model of one parameter estimate of a recorded run."""

    __tablename__ = "estimates"
    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True, nullable=False)
    model = Column(String, nullable=False)
    name = Column(String, nullable=False)
    value = Column(Float, nullable=False)
    std_err = Column(Float, nullable=True)
    t_stat = Column(Float, nullable=True)


@lru_cache
def _session_factory(database_url: str) -> sessionmaker:
    connect_args = {"check_same_thread": False} if database_url.startswith("sqlite") else {}
    engine = create_engine(database_url, connect_args=connect_args)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(bind=engine, autocommit=False, autoflush=False)


def _session():
    return _session_factory(get_settings().database_url)()


def _finite(value: Optional[float]) -> Optional[float]:
    # NaN is stored as NULL
    if value is None or value != value:
        return None
    return float(value)


def record_run(
    command: str,
    seed: int,
    config_digest: str,
    model: str,
    final_ll: Optional[float],
    n_obs: int,
    converged: bool,
    out_dir: Optional[str] = None,
) -> Optional[int]:
    """Persist a run; returns ``None`` when recording is disabled."""
    if not get_settings().record_runs:
        return None
    db = _session()
    try:
        run = Run(
            command=command,
            seed=seed,
            config_digest=config_digest,
            model=model,
            final_ll=_finite(final_ll),
            n_obs=n_obs,
            converged=converged,
            out_dir=out_dir,
        )
        db.add(run)
        db.commit()
        logger.debug(f"Recorded run {run.id} ({command}, seed {seed})")
        return int(run.id)
    finally:
        db.close()


def record_estimates(run_id: Optional[int], model: str, parameters: Iterable[ParameterStat]) -> None:
    """Persist a parameter table for ``run_id``; no-op when ``run_id`` is None."""
    if run_id is None:
        return
    db = _session()
    try:
        db.add_all(
            Estimate(
                run_id=run_id,
                model=model,
                name=p.name,
                value=float(p.value),
                std_err=_finite(p.std_err),
                t_stat=_finite(p.t_stat),
            )
            for p in parameters
        )
        db.commit()
    finally:
        db.close()


def get_runs(limit: Optional[int] = None) -> List[dict]:
    """Recorded runs, newest first."""
    db = _session()
    try:
        stmt = select(Run).order_by(Run.id.desc())
        if limit is not None:
            stmt = stmt.limit(limit)
        rows = db.execute(stmt).scalars().all()
        return [
            {
                "id": row.id,
                "command": row.command,
                "seed": row.seed,
                "config_digest": row.config_digest,
                "model": row.model,
                "final_ll": row.final_ll,
                "n_obs": row.n_obs,
                "converged": row.converged,
                "out_dir": row.out_dir,
            }
            for row in rows
        ]
    finally:
        db.close()


def get_estimates(run_id: int) -> List[dict]:
    """Estimates of a run ordered by insertion."""
    db = _session()
    try:
        stmt = select(Estimate).where(Estimate.run_id == run_id).order_by(Estimate.id)
        rows = db.execute(stmt).scalars().all()
        return [
            {"model": row.model, "name": row.name, "value": row.value, "std_err": row.std_err, "t_stat": row.t_stat}
            for row in rows
        ]
    finally:
        db.close()


def clear_runs() -> None:
    """Remove every recorded run and estimate."""
    db = _session()
    try:
        db.execute(delete(Estimate))
        db.execute(delete(Run))
        db.commit()
    finally:
        db.close()
