"""Request and response models of the monitoring service.

Matrices travel as nested lists (row-major); baseline bundles travel as the
same JSON document that ``netcusum baseline`` writes to disk.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator

from ..detectors import CHARTS
from ..harness import DEFAULT_BMAX, DEFAULT_HORIZON, DEFAULT_M
from ..simgen import CONDITIONS

ChartName = Literal["WSCUSUM", "TCUSUM", "DTCUSUM", "DTCUSUM-n", "NEWMA"]
ConditionName = Literal["I", "II", "III", "Double", "RowCorr"]
Matrix = list[list[float]]
CountMatrix = list[list[int]]

assert set(ChartName.__args__) == set(CHARTS)
assert set(ConditionName.__args__) == set(CONDITIONS)


class Snapshot(BaseModel):
    t: int
    counts: CountMatrix


class ProbabilityRequest(BaseModel):
    counts: CountMatrix


class ProbabilityResponse(BaseModel):
    probs: Matrix
    row_totals: list[int]
    row_valid: list[bool]
    weights: Optional[list[float]] = None


class BaselineRequest(BaseModel):
    snapshots: list[Snapshot] = Field(min_length=1)
    mu1: Matrix
    b_max: int = Field(DEFAULT_BMAX, ge=0)
    count_mu1: Optional[Matrix] = Field(
        None, description="OC count means per row; enables DTCUSUM-n baselines")


class BaselineResponse(BaseModel):
    bundle: dict
    k_ref: list[float]
    gamma: Matrix


class ChartOptions(BaseModel):
    chart: ChartName = "WSCUSUM"
    lam: float = Field(0.1, gt=0, le=1)
    chi_form: bool = False


class DetectorCreate(ChartOptions):
    bundle: dict
    limit: float = Field(gt=0)


class DetectorInfo(BaseModel):
    id: str
    chart: ChartName
    limit: float
    t: int
    first_alarm: Optional[int]
    row_statistics: list[float]


class StepRequest(BaseModel):
    counts: CountMatrix


class StepResponse(BaseModel):
    t: int
    stat: float
    alarm: bool
    spring: int


class MonitorRequest(DetectorCreate):
    snapshots: list[Snapshot]


class MonitorResponse(BaseModel):
    chart: ChartName
    limit: float
    steps: int
    first_alarm: Optional[int]
    trace: list[StepResponse]


class ScenarioModel(BaseModel):
    condition: ConditionName = "II"
    totals: tuple[int, int] = (100, 100)
    mu11: float = Field(0.45, gt=0, lt=1)
    mu22: float = Field(0.05, gt=0, lt=1)
    noise_center: Literal["previous", "mean"] = "previous"
    seed: int = 0


class RunOptions(BaseModel):
    reps: int = Field(10_000, ge=1)
    horizon: int = Field(DEFAULT_HORIZON, ge=1)
    b_max: int = Field(DEFAULT_BMAX, ge=0)
    m: int = Field(DEFAULT_M, ge=2)
    workers: int = Field(1, ge=1)
    shared_baseline: bool = False


class CalibrateRequest(ChartOptions, RunOptions):
    scenario: ScenarioModel = ScenarioModel()
    target_arl0: float = Field(200.0, gt=1)
    tolerance: float = Field(0.02, gt=0)


class CalibrateResponse(BaseModel):
    chart: ChartName
    scenario: str
    limit: float
    achieved_arl0: float
    reps: int
    target_arl0: float
    history: list[tuple[float, float]]


class SimulateRequest(ChartOptions, RunOptions):
    scenario: ScenarioModel = ScenarioModel()
    limit: float = Field(ge=0)
    shifts: list[float] = Field(default_factory=lambda: [0.45], min_length=1)

    @field_validator("shifts")
    @classmethod
    def _open_interval(cls, v):
        bad = [x for x in v if not 0 < x < 1]
        if bad:
            raise ValueError(f"shifts must lie in (0, 1): {bad}")
        return v


class Summary(BaseModel):
    chart: str
    scenario: str
    mu11: float
    reps: int
    arl: float
    sdrl: float
    p5: float
    p50: float
    p95: float
    censored: int
    horizon: int
    limit: float


class SimulateResponse(BaseModel):
    summaries: list[Summary]
    csv: str
