"""HTTP ranking service over a frozen model and index."""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..checkpoint import load_checkpoint
from ..data import load_dataset
from ..errors import ConfigurationError
from ..model import HybridRetriever
from ..retrieval import RetrievalIndex, build_index, rank_items
from .schemas import ErrorResponse, HealthResponse, RankRequest, RankResponse, RankResult

log = logging.getLogger(__name__)

DEFAULT_PORT = 8750
DEFAULT_MAX_CONCURRENCY = 8


@dataclass
class ServiceState:
    model: HybridRetriever
    index: RetrievalIndex
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY
    requests: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _slots: threading.BoundedSemaphore = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(self.max_concurrency)

    def rank(self, query: str, k: int) -> list[tuple[str, float]]:
        with self._lock:
            self.requests += 1
        with self._slots:
            return rank_items(self.index, query, self.model, k)


def state_checksum(model: HybridRetriever, index: RetrievalIndex) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    reps = index.reps if isinstance(index.reps, tuple) else (index.reps,)
    for r in reps:
        h.update(np.ascontiguousarray(r).tobytes())
    h.update("\n".join(index.ids).encode())
    return h.hexdigest()


def load_state(checkpoint: str | Path, dataset: str | Path, mode: str | None = None,
               metadata: str = "OS", split: str = "test",
               max_concurrency: int = DEFAULT_MAX_CONCURRENCY) -> ServiceState:
    model, _, _ = load_checkpoint(checkpoint)
    if mode is not None and mode != model.mode:
        raise ConfigurationError(f"checkpoint was trained in {model.mode!r} mode, not {mode!r}")
    ds = load_dataset(dataset, metadata)
    items = ds.items if split == "all" else ds.split(split)
    if not items:
        raise ConfigurationError(f"split {split!r} of {dataset} is empty")
    return ServiceState(model, build_index(items, model, metadata), max_concurrency)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content=ErrorResponse(error=message).model_dump())


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="fusebed ranking service")
    app.state.service = state

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError) -> JSONResponse:
        msgs = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        return _error(400, msgs or "malformed request body")

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception) -> JSONResponse:
        log.exception("scoring failed")
        return _error(500, f"internal error: {exc}")

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", items=len(state.index))

    @app.post("/rank", response_model=RankResponse, responses={400: {"model": ErrorResponse}})
    def rank(req: RankRequest) -> RankResponse:
        results = state.rank(req.query, req.k)
        return RankResponse(results=[RankResult(id=i, score=s) for i, s in results])

    return app


def serve(checkpoint: str | Path, dataset: str | Path, mode: str | None = None,
          port: int = DEFAULT_PORT, metadata: str = "OS", split: str = "test",
          host: str = "127.0.0.1") -> None:
    import uvicorn

    state = load_state(checkpoint, dataset, mode, metadata, split)
    log.info("serving %d items in %s mode on %s:%d", len(state.index), state.model.mode, host, port)
    uvicorn.run(create_app(state), host=host, port=port, log_level="warning")
