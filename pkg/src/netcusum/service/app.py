"""HTTP surface for baselines, live detector sessions and Monte Carlo jobs.

Each endpoint is a thin wrapper around a plain handler function taking and
returning the pydantic models of :mod:`.schemas`; the command-line client
calls the same handlers in-process unless it is pointed at a server.

Run with ``netcusum serve`` or ``uvicorn netcusum.service.app:app``.
"""

from __future__ import annotations

import dataclasses
import logging
import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..baseline import (InsufficientDataError, DegenerateCovarianceError, bundle_from_dict,
                        bundle_to_dict, estimate_network_baselines)
from ..detectors import Detector
from ..harness import ChartConfig, arl_sdrl, calibrate_limit, monitor, write_summaries
from ..network import TransitionSnapshot, row_weights, snapshots_to_array, to_probability
from ..simgen import ScenarioConfig
from .schemas import (BaselineRequest, BaselineResponse, CalibrateRequest, CalibrateResponse,
                      DetectorCreate, DetectorInfo, MonitorRequest, MonitorResponse,
                      ProbabilityRequest, ProbabilityResponse, ScenarioModel, SimulateRequest,
                      SimulateResponse, StepRequest, StepResponse, Summary)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# handlers

def probability(req: ProbabilityRequest) -> ProbabilityResponse:
    snap = TransitionSnapshot(t=0, counts=np.asarray(req.counts))
    p = to_probability(snap)
    weights = row_weights(snap).tolist() if p.row_totals.sum() > 0 else None
    return ProbabilityResponse(probs=p.probs.tolist(), row_totals=p.row_totals.tolist(),
                               row_valid=p.row_valid.tolist(), weights=weights)


def baselines(req: BaselineRequest) -> BaselineResponse:
    snaps = [TransitionSnapshot(t=s.t, counts=np.asarray(s.counts)) for s in req.snapshots]
    counts = snapshots_to_array(snaps)
    rows = estimate_network_baselines(counts, np.asarray(req.mu1), req.b_max, kind="prob")
    count_rows = []
    if req.count_mu1 is not None:
        count_rows = estimate_network_baselines(counts, np.asarray(req.count_mu1), req.b_max,
                                                kind="count")
    bundle = bundle_to_dict(rows, count_rows, t_first=snaps[0].t, t_last=snaps[-1].t)
    return BaselineResponse(bundle=bundle, k_ref=[r.k_ref for r in rows],
                            gamma=[r.gamma.tolist() for r in rows])


def _scenario(model: ScenarioModel) -> ScenarioConfig:
    return ScenarioConfig(condition=model.condition, initial_totals=tuple(model.totals),
                          true_mu11=model.mu11, true_mu22=model.mu22, seed=model.seed,
                          noise_center=model.noise_center)


def _chart(req) -> ChartConfig:
    return ChartConfig(req.chart, b_max=req.b_max, lam=req.lam, chi_form=req.chi_form)


def calibrate(req: CalibrateRequest) -> CalibrateResponse:
    res = calibrate_limit(_chart(req), _scenario(req.scenario), target_arl0=req.target_arl0,
                          reps=req.reps, tolerance=req.tolerance, horizon=req.horizon,
                          workers=req.workers, m=req.m, shared_baseline=req.shared_baseline)
    return CalibrateResponse(**res.to_dict())


def simulate(req: SimulateRequest) -> SimulateResponse:
    cfg = _scenario(req.scenario)
    out = [arl_sdrl(_chart(req), cfg, req.limit, req.reps, horizon=req.horizon, mu11=mu,
                    workers=req.workers, m=req.m, shared_baseline=req.shared_baseline)
           for mu in req.shifts]
    return SimulateResponse(summaries=[Summary(**dataclasses.asdict(s)) for s in out],
                            csv=write_summaries(out))


def _detector_rows(bundle: dict):
    rows, count_rows, _ = bundle_from_dict(bundle)
    return rows, count_rows


def run_monitor(req: MonitorRequest) -> MonitorResponse:
    rows, count_rows = _detector_rows(req.bundle)
    snaps = [TransitionSnapshot(t=s.t, counts=np.asarray(s.counts)) for s in req.snapshots]
    rep = monitor(rows, snaps, req.chart, req.limit, count_rows=count_rows, lam=req.lam,
                  chi_form=req.chi_form)
    trace = [StepResponse(t=t, stat=stat, alarm=alarm, spring=spring)
             for t, stat, alarm, spring in rep.trace]
    return MonitorResponse(chart=req.chart, limit=req.limit, steps=rep.steps,
                           first_alarm=rep.first_alarm, trace=trace)


class SessionStore:
    """Live detector sessions keyed by id; each detector is only touched under its lock."""

    def __init__(self):
        self._items: dict[str, tuple[Detector, threading.Lock]] = {}
        self._lock = threading.Lock()

    def create(self, req: DetectorCreate) -> DetectorInfo:
        rows, count_rows = _detector_rows(req.bundle)
        det = Detector(req.chart, rows, req.limit, count_rows=count_rows, lam=req.lam,
                       chi_form=req.chi_form)
        key = uuid.uuid4().hex
        with self._lock:
            self._items[key] = (det, threading.Lock())
        return self.info(key)

    def _get(self, key: str):
        with self._lock:
            if key not in self._items:
                raise KeyError(key)
            return self._items[key]

    def step(self, key: str, req: StepRequest) -> StepResponse:
        det, lock = self._get(key)
        with lock:
            res = det.step(np.asarray(req.counts))
        return StepResponse(**dataclasses.asdict(res))

    def info(self, key: str) -> DetectorInfo:
        det, lock = self._get(key)
        with lock:
            return DetectorInfo(id=key, chart=det.name, limit=det.limit, t=det.chart.t,
                                first_alarm=det.first_alarm,
                                row_statistics=det.row_statistics.tolist())

    def delete(self, key: str) -> None:
        with self._lock:
            if self._items.pop(key, None) is None:
                raise KeyError(key)

    def __len__(self) -> int:
        return len(self._items)


# ---------------------------------------------------------------------------
# application

def create_app() -> FastAPI:
    app = FastAPI(title="netcusum", version=__version__)
    sessions = SessionStore()
    app.state.sessions = sessions

    @app.exception_handler(ValueError)
    async def _bad_input(request: Request, exc: ValueError):
        status = 422 if isinstance(exc, (InsufficientDataError, DegenerateCovarianceError)) \
            else 400
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    def _session(fn, *args):
        try:
            return fn(*args)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no detector {args[0]!r}") from None

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__, "sessions": len(sessions)}

    @app.post("/probability", response_model=ProbabilityResponse)
    def post_probability(req: ProbabilityRequest):
        return probability(req)

    @app.post("/baselines", response_model=BaselineResponse)
    def post_baselines(req: BaselineRequest):
        return baselines(req)

    @app.post("/calibrate", response_model=CalibrateResponse)
    def post_calibrate(req: CalibrateRequest):
        return calibrate(req)

    @app.post("/simulate", response_model=SimulateResponse)
    def post_simulate(req: SimulateRequest):
        return simulate(req)

    @app.post("/monitor", response_model=MonitorResponse)
    def post_monitor(req: MonitorRequest):
        return run_monitor(req)

    @app.post("/detectors", response_model=DetectorInfo, status_code=201)
    def create_detector(req: DetectorCreate):
        return sessions.create(req)

    @app.post("/detectors/{key}/step", response_model=StepResponse)
    def step_detector(key: str, req: StepRequest):
        return _session(sessions.step, key, req)

    @app.get("/detectors/{key}", response_model=DetectorInfo)
    def get_detector(key: str):
        return _session(sessions.info, key)

    @app.delete("/detectors/{key}", status_code=204)
    def delete_detector(key: str):
        _session(sessions.delete, key)

    return app


app = create_app()
