"""HTTP editing API over a frozen EditorRuntime.

Stateless except for a bounded LRU store of inverted noises keyed by
noise_id (content hash). Sync endpoints run in the server's worker threads;
the runtime is immutable, so concurrent requests are safe.
"""

from __future__ import annotations

import base64
import hashlib
import io
import threading
from collections import OrderedDict

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import ode, persist
from .errors import FlowEditError, ValidationError
from .runtime import EditorRuntime, solver_from_params

NOISE_STORE_CAPACITY = 256


class NoiseStore:
    """Bounded LRU of inverted latents; the key is the content digest."""

    def __init__(self, capacity: int = NOISE_STORE_CAPACITY):
        self.capacity = capacity
        self._store: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def put(self, noise: np.ndarray) -> str:
        key = hashlib.sha256(noise.tobytes()).hexdigest()[:16]
        with self._lock:
            self._store[key] = noise
            self._store.move_to_end(key)
            while len(self._store) > self.capacity:
                self._store.popitem(last=False)
        return key

    def get(self, key: str) -> np.ndarray | None:
        with self._lock:
            noise = self._store.get(key)
            if noise is not None:
                self._store.move_to_end(key)
            return noise

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)


class SolverParams(BaseModel):
    family: str = "dopri5"
    steps: int | None = None
    atol: float | None = None
    rtol: float | None = None

    def to_spec(self, direction: str) -> ode.SolverSpec:
        return solver_from_params(self.family, self.steps, self.atol, self.rtol, direction)


class SampleRequest(BaseModel):
    seed: int
    prompt: str = ""
    solver: SolverParams | None = None


class SampleResponse(BaseModel):
    image: str = Field(description="base64 PNG")
    seconds: float


class InvertRequest(BaseModel):
    image: str = Field(description="base64 PNG")
    prompt: str = ""
    solver: SolverParams | None = None


class InvertResponse(BaseModel):
    noise_id: str


class AttrWeight(BaseModel):
    k: str
    w: float


class TokenReweight(BaseModel):
    word: str
    c: float


class EditRequest(BaseModel):
    seed: int | None = None
    noise_id: str | None = None
    prompt: str = ""
    attrs: list[AttrWeight] = []
    t_edit: float = 0.5
    solver: SolverParams | None = None
    reweights: list[TokenReweight] = []


class EditResponse(BaseModel):
    image: str
    relative_edit_error: float


class TokenHeatmap(BaseModel):
    position: int
    word: str
    heatmap: str = Field(description="base64 PNG of the normalized map")
    grid: list[int]


def _b64_png(image: np.ndarray) -> str:
    return base64.b64encode(persist.image_to_png_bytes(image)).decode("ascii")


def _decode_png(data: str) -> np.ndarray:
    from PIL import Image

    try:
        raw = base64.b64decode(data)
        img = Image.open(io.BytesIO(raw))
    except Exception as exc:
        raise ValidationError(f"could not decode base64 PNG: {exc}") from exc
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)


def create_app(runtime: EditorRuntime | None) -> FastAPI:
    app = FastAPI(title="flowedit", version="0.1.0")
    store = NoiseStore()
    app.state.runtime = runtime
    app.state.noise_store = store

    def need_runtime() -> EditorRuntime:
        if app.state.runtime is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return app.state.runtime

    @app.exception_handler(FlowEditError)
    def _flowedit_error(request, exc: FlowEditError):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400,
                            content={"error": exc.category, "message": str(exc)})

    @app.get("/model")
    def model_info():
        return need_runtime().describe()

    @app.post("/sample", response_model=SampleResponse)
    def sample(req: SampleRequest):
        rt = need_runtime()
        spec = req.solver.to_spec(ode.GENERATE) if req.solver else None
        image, _, elapsed = rt.sample(seed=req.seed, prompt=req.prompt, solver=spec)
        return SampleResponse(image=_b64_png(image), seconds=round(elapsed, 4))

    @app.post("/invert", response_model=InvertResponse)
    def invert(req: InvertRequest):
        rt = need_runtime()
        spec = req.solver.to_spec(ode.INVERT) if req.solver else None
        noise, _ = rt.invert(_decode_png(req.image), prompt=req.prompt, solver=spec)
        return InvertResponse(noise_id=store.put(noise))

    @app.post("/edit", response_model=EditResponse)
    def edit(req: EditRequest):
        rt = need_runtime()
        noise = None
        if req.noise_id is not None:
            noise = store.get(req.noise_id)
            if noise is None:
                raise HTTPException(status_code=404, detail=f"unknown noise_id '{req.noise_id}'")
        elif req.seed is None:
            raise HTTPException(status_code=400, detail="edit needs a seed or a noise_id")
        spec = req.solver.to_spec(ode.GENERATE) if req.solver else None
        outcome = rt.edit(
            seed=req.seed, noise=noise, prompt=req.prompt,
            attributes=tuple((a.k, a.w) for a in req.attrs),
            t_edit=req.t_edit, solver=spec,
            reweights=tuple((r.word, r.c) for r in req.reweights),
        )
        return EditResponse(image=_b64_png(outcome.edited),
                            relative_edit_error=outcome.relative_error)

    @app.get("/attention", response_model=list[TokenHeatmap])
    def attention(prompt: str, block: int = 0, step: int = 10, seed: int = 0,
                  n_steps: int = 100):
        rt = need_runtime()
        maps = rt.attention_maps(prompt, block, step, seed, n_steps)
        return [TokenHeatmap(position=m["position"], word=m["word"],
                             heatmap=_b64_png(m["heatmap"]), grid=m["grid"])
                for m in maps]

    return app
