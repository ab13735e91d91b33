from datetime import datetime
import enum

from sqlalchemy import Column, DateTime, Enum, Float, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from partdescent.config import DATABASE_URL

Base = declarative_base()
engine = create_engine(DATABASE_URL, echo=False)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


class RunStatus(str, enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, default="run")  # run | compare
    mode = Column(String)
    preset = Column(String, nullable=True)
    strategy = Column(String)

    graph_seed = Column(Integer, nullable=True)
    data_seed = Column(Integer, nullable=True)
    sim_seed = Column(Integer, nullable=True)
    num_nodes = Column(Integer, nullable=True)

    # Results
    iterations = Column(Integer, nullable=True)
    final_value = Column(Float, nullable=True)
    residual = Column(Float, nullable=True)
    violations = Column(Integer, nullable=True)
    max_deviation = Column(Float, nullable=True)

    # Metadata
    created_at = Column(DateTime, default=datetime.now)
    status = Column(Enum(RunStatus), default=RunStatus.PENDING)
    output_dir = Column(String, nullable=True)
    trace_sha256 = Column(String, nullable=True)
    error_message = Column(Text, nullable=True)

    def __repr__(self):
        return f"<ExperimentRun(id={self.id}, mode='{self.mode}', status='{self.status}')>"


def configure(url: str):
    """Rebinds the registry to another database (tests, scratch registries)."""
    global engine
    engine = create_engine(url, echo=False)
    SessionLocal.configure(bind=engine)


def init_db():
    Base.metadata.create_all(bind=engine)


def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
