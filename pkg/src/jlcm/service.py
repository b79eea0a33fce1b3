"""HTTP interface to the workflows.

Requests carry table text and parsed documents, never server-side paths
(apart from the optional Monte Carlo cache folder), so the same payloads
work in-process and against a remote ``uvicorn jlcm.service:app``.

Errors come back as ``{"detail": {"kind": ..., "message": ...}}`` with
``kind`` one of ``config`` (HTTP 400) or ``data`` (HTTP 422). A run that
finishes without convergence is a normal 200 response whose ``status`` is
``not-converged``.
"""

from __future__ import annotations

import logging
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__, workflows
from .data import DataError
from .model import SpecError

log = logging.getLogger(__name__)


class Tables(BaseModel):
    longitudinal: str
    survival: str
    covariates: Optional[str] = None


class Optimizer(BaseModel):
    max_iterations: Optional[int] = None
    tolerance_function: Optional[float] = None
    tolerance_parameters: Optional[float] = None
    tolerance_derivatives: Optional[float] = None


class FitRequest(BaseModel):
    model: dict
    data: Tables
    G: Optional[int] = None
    n_starts: int = 100
    seed: int = 0
    jobs: int = 1
    optimizer: Optimizer = Field(default_factory=Optimizer)


class SelectRequest(BaseModel):
    model: dict
    data: Tables
    G_range: tuple[int, int]
    n_starts: int = 100
    seed: int = 0
    jobs: int = 1
    optimizer: Optimizer = Field(default_factory=Optimizer)


class ClassifyRequest(BaseModel):
    fit: dict
    data: Tables


class Grid(BaseModel):
    start: float = 0.0
    stop: Optional[float] = None
    points: int = 51


class PredictRequest(BaseModel):
    fit: dict
    grid: Grid = Field(default_factory=Grid)
    covariates: dict[str, float] = Field(default_factory=dict)
    n_draws: int = 200
    seed: int = 0
    data: Optional[Tables] = None


class GofRequest(BaseModel):
    fit: dict
    data: Tables
    bin_width: float = 1.0
    knot_spacing: float = 2.0
    n_boot: int = 200
    seed: int = 0


class ExternalSpec(BaseModel):
    case: int
    table: str
    value: str = "value"
    covariates: list[str] = Field(default_factory=list)
    class_specific_effects: bool = False


class ExternalRequest(BaseModel):
    fit: dict
    data: Tables
    external: ExternalSpec


class SimulateRequest(BaseModel):
    scenario: dict
    seed: int = 0
    N: Optional[int] = None


class MonteCarloRequest(BaseModel):
    scenario: dict
    seed: int = 0
    replicates: int = 100
    n_starts: int = 30
    jobs: int = 1
    cache_dir: Optional[str] = None
    optimizer: Optimizer = Field(default_factory=Optimizer)


class RunResponse(BaseModel):
    status: str
    files: dict[str, str]
    messages: list[str] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)


app = FastAPI(title="jlcm", version=__version__)


@app.exception_handler(workflows.ConfigError)
@app.exception_handler(SpecError)
async def _config_error(request: Request, exc: Exception):
    return JSONResponse(status_code=400, content={"detail": {"kind": "config", "message": str(exc)}})


@app.exception_handler(RequestValidationError)
async def _request_error(request: Request, exc: RequestValidationError):
    msg = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
    return JSONResponse(status_code=400, content={"detail": {"kind": "config", "message": msg}})


@app.exception_handler(DataError)
async def _data_error(request: Request, exc: Exception):
    return JSONResponse(status_code=422, content={"detail": {"kind": "data", "message": str(exc)}})


def _respond(out: workflows.RunOutput) -> RunResponse:
    return RunResponse(status=out.status, files=out.files, messages=out.messages, warnings=out.warnings)


def _opt(o: Optimizer) -> dict:
    return o.model_dump(exclude_none=True)


@app.get("/v1/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/v1/fit", response_model=RunResponse)
def fit(req: FitRequest):
    return _respond(workflows.run_fit(req.model, req.data.model_dump(), req.G, req.n_starts, req.seed, req.jobs,
                                      _opt(req.optimizer)))


@app.post("/v1/select", response_model=RunResponse)
def select(req: SelectRequest):
    return _respond(workflows.run_select(req.model, req.data.model_dump(), req.G_range, req.n_starts, req.seed,
                                         req.jobs, _opt(req.optimizer)))


@app.post("/v1/classify", response_model=RunResponse)
def classify(req: ClassifyRequest):
    return _respond(workflows.run_classify(req.fit, req.data.model_dump()))


@app.post("/v1/predict", response_model=RunResponse)
def predict(req: PredictRequest):
    grid = req.grid.model_dump(exclude_none=True)
    tables = req.data.model_dump() if req.data is not None else None
    return _respond(workflows.run_predict(req.fit, grid, req.covariates, req.n_draws, req.seed, tables))


@app.post("/v1/gof", response_model=RunResponse)
def gof(req: GofRequest):
    return _respond(workflows.run_gof(req.fit, req.data.model_dump(), req.bin_width, req.knot_spacing, req.n_boot,
                                      req.seed))


@app.post("/v1/external", response_model=RunResponse)
def external(req: ExternalRequest):
    return _respond(workflows.run_external(req.fit, req.data.model_dump(), req.external.model_dump()))


@app.post("/v1/simulate", response_model=RunResponse)
def simulate(req: SimulateRequest):
    return _respond(workflows.run_simulate(req.scenario, req.seed, req.N))


@app.post("/v1/mc", response_model=RunResponse)
def mc(req: MonteCarloRequest):
    return _respond(workflows.run_mc(req.scenario, req.seed, req.replicates, req.n_starts, req.jobs, req.cache_dir,
                                     _opt(req.optimizer)))
