from typing import Dict, List, Optional

from pydantic import BaseModel, Field, computed_field


# Model for per-joint errors in millimeters
class JointMetrics(BaseModel):
    neck: float = Field(..., ge=0.0, description="Neck error (mm)")
    head: float = Field(..., ge=0.0, description="Head error (mm)")
    jaw: float = Field(..., ge=0.0, description="Jaw error (mm)")

    @computed_field
    @property
    def avg(self) -> float:
        return (self.neck + self.head + self.jaw) / 3.0

    @classmethod
    def mean_of(cls, rows: List["JointMetrics"]) -> "JointMetrics":
        n = len(rows)
        return cls(
            neck=sum(r.neck for r in rows) / n,
            head=sum(r.head for r in rows) / n,
            jaw=sum(r.jaw for r in rows) / n,
        )


class FoldRow(BaseModel):
    label: str = Field(..., description="Row label, e.g. 'person 3' or 'Average'")
    person_id: Optional[int] = Field(None, description="Held-out person, None for the average")
    mpjpe: JointMetrics
    mpve: JointMetrics
    n_windows: int = Field(0, ge=0, description="Evaluated test windows")


class ComparisonRow(BaseModel):
    label: str = Field(..., description="Predictor variant")
    per_fold_mpjpe: Dict[int, float] = Field(..., description="Average MPJPE (mm) per held-out person")

    @computed_field
    @property
    def average_mpjpe(self) -> float:
        values = list(self.per_fold_mpjpe.values())
        return sum(values) / len(values) if values else 0.0


class ComposedRow(BaseModel):
    label: str
    reference_mm: float = Field(..., ge=0.0, description="Reference error of the label source")
    measured_mm: float = Field(..., ge=0.0, description="Fold-average MPJPE of the trained model")
    composed_mm: float = Field(..., ge=0.0, description="sqrt(reference^2 + measured^2)")


class EpochStats(BaseModel):
    epoch: int = Field(..., ge=0)
    learning_rate: float
    loss: float = Field(..., description="Mean training loss over the epoch")
    mse: float
    bio: float
    val_mse: Optional[float] = Field(None, description="Validation MSE, when a validation slice exists")


class Report(BaseModel):
    folds: List[FoldRow]
    average: FoldRow
    comparisons: List[ComparisonRow] = Field(default_factory=list)
    composed: ComposedRow
    fingerprint: str = Field(..., description="Config fingerprint")
    seed: int = Field(..., ge=0)
