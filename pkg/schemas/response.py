from pydantic import BaseModel, Field, field_validator
from typing import Any, Dict, List, Optional

REPORT_VERSION = "1"


class _Report(BaseModel):
    report_version: str = REPORT_VERSION
    library_version: str = ""
    config: Optional[Dict[str, Any]] = None


class CertifiedPoint(BaseModel):
    epsilon: float
    accuracy: float = Field(..., ge=0.0, le=1.0)


class CertificationReport(_Report):
    head_kind: str
    distance_kind: str
    kappa: Optional[float] = None
    sigma_min: Optional[float] = None
    n_samples: int
    clean_accuracy: float
    predictions: List[int] = []
    correct: List[bool] = []
    bounds: List[Optional[float]] = []
    certified: List[CertifiedPoint] = []


class EvaluationReport(_Report):
    n_samples: int
    accuracy: float = Field(..., ge=0.0, le=1.0)
    per_class_accuracy: List[Optional[float]] = []


class AttackReport(_Report):
    epsilon: float
    steps: int
    step_size: float
    restarts: int
    seed: int
    n_samples: int
    clean_accuracy: float
    robust_accuracy: float


class CurvePoint(BaseModel):
    epsilon: float
    empirical: float
    certified: Optional[float] = None
    violations: int = 0


class RobustnessCurve(_Report):
    points: List[CurvePoint] = []

    @field_validator('points')
    @classmethod
    def sorted_epsilons(cls, v):
        eps = [p.epsilon for p in v]
        if eps != sorted(eps):
            raise ValueError('curve points must be sorted by epsilon')
        return v


class DivergenceReport(_Report):
    class_a: int
    class_b: int
    divergence: float = Field(..., ge=0.0)


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    accuracy: float
    sigma_min: Optional[float] = None
    sigma_max: Optional[float] = None
    clamp_events: int = 0


class TrainingHistory(_Report):
    epochs: List[EpochRecord] = []
    min_component_distance: Optional[float] = None

    @property
    def losses(self) -> List[float]:
        return [e.loss for e in self.epochs]

    @property
    def accuracies(self) -> List[float]:
        return [e.accuracy for e in self.epochs]
