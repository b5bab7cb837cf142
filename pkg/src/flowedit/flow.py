"""Conditional flow-matching objective, training loop, and sampling entry points.

Time convention: t=0 is prior noise, t=1 is data. Generation integrates the
learned field 0 -> 1, inversion 1 -> 0. The probability path is Gaussian
with mean t*x1 and scale 1 - (1 - sigma_min)*t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ode
from . import tensor as T
from .errors import NonFiniteError, ShapeError, SolverError, ValidationError
from .optim import Adam
from .prompts import ReweightSpec
from .tensor import Tensor
from .uvit import EditHooks, UViT, UViTConfig, sinusoidal_features


def _default_generate_solver() -> ode.SolverSpec:
    return ode.SolverSpec("dopri5", atol=1e-5, rtol=1e-5, direction=ode.GENERATE)


def _default_invert_solver() -> ode.SolverSpec:
    return ode.SolverSpec("euler", step_count=100, direction=ode.INVERT)


@dataclass(frozen=True)
class FlowConfig:
    sigma_min: float = 1e-4
    time_grid_n: int = 100
    generate_solver: ode.SolverSpec = field(default_factory=_default_generate_solver)
    invert_solver: ode.SolverSpec = field(default_factory=_default_invert_solver)

    def __post_init__(self):
        if not (0.0 < self.sigma_min < 1.0):
            raise ValidationError(f"sigma_min must lie in (0, 1), got {self.sigma_min}")
        if self.time_grid_n < 1:
            raise ValidationError("time_grid_n must be positive")

    def to_dict(self) -> dict:
        return {
            "sigma_min": self.sigma_min,
            "time_grid_n": self.time_grid_n,
            "generate_solver": self.generate_solver.to_dict(),
            "invert_solver": self.invert_solver.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        return cls(
            sigma_min=d["sigma_min"],
            time_grid_n=d["time_grid_n"],
            generate_solver=ode.SolverSpec.from_dict(d["generate_solver"]),
            invert_solver=ode.SolverSpec.from_dict(d["invert_solver"]),
        )


def _expand_t(t, ndim: int) -> np.ndarray:
    """Broadcast scalar or per-sample t against a batched value array."""
    t_arr = np.asarray(t, dtype=np.float32)
    if t_arr.ndim == 0:
        return t_arr
    return t_arr.reshape(t_arr.shape[0], *([1] * (ndim - 1)))


def sample_path_point(x1: np.ndarray, t, noise: np.ndarray, sigma_min: float) -> np.ndarray:
    """x_t = t*x1 + (1-(1-sigma_min)*t)*noise along the Gaussian path."""
    x1 = np.asarray(x1, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    if x1.shape != noise.shape:
        raise ShapeError(f"x1 {x1.shape} vs noise {noise.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValidationError(f"t outside [0, 1]: {t}")
    tb = _expand_t(t, x1.ndim)
    scale = 1.0 - (1.0 - np.float32(sigma_min)) * tb
    return (tb * x1 + scale * noise).astype(np.float32)


def target_field(x_t: np.ndarray, x1: np.ndarray, t, sigma_min: float) -> np.ndarray:
    """Conditional target w = (x1 - (1-sigma_min)*x_t) / (1 - (1-sigma_min)*t)."""
    x_t = np.asarray(x_t, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x_t.shape != x1.shape:
        raise ShapeError(f"x_t {x_t.shape} vs x1 {x1.shape}")
    tb = _expand_t(t, x_t.ndim)
    denom = 1.0 - (1.0 - np.float32(sigma_min)) * tb
    if np.any(denom < 1e-8):
        raise ValidationError("target field denominator below 1e-8")
    return ((x1 - (1.0 - np.float32(sigma_min)) * x_t) / denom).astype(np.float32)


@dataclass
class TrainingBatch:
    x1: np.ndarray                       # (B, ...) data latents
    prompt_tokens: Optional[np.ndarray]  # (B, L) int ids, or None for unconditional models
    t: np.ndarray                        # (B,) uniform times
    noise: np.ndarray                    # (B, ...) standard normal, same shape as x1

    def __post_init__(self):
        b = self.x1.shape[0]
        if self.noise.shape != self.x1.shape:
            raise ShapeError(f"noise {self.noise.shape} vs x1 {self.x1.shape}")
        if self.t.shape != (b,):
            raise ShapeError(f"t shape {self.t.shape}, expected ({b},)")
        if np.any(self.t < 0) or np.any(self.t > 1):
            raise ValidationError("batch times outside [0, 1]")
        if self.prompt_tokens is not None and self.prompt_tokens.shape[0] != b:
            raise ShapeError("prompt batch dimension mismatch")


def cfm_loss(model, batch: TrainingBatch, sigma_min: float) -> Tensor:
    """Mean over the batch of squared L2 distance to the conditional target."""
    x_t = sample_path_point(batch.x1, batch.t, batch.noise, sigma_min)
    w = target_field(x_t, batch.x1, batch.t, sigma_min)
    v = model.forward(x_t, batch.prompt_tokens, batch.t)
    diff = T.sub(v, Tensor(w))
    return T.scale(T.sum_of_squares(diff), 1.0 / batch.x1.shape[0])


class ArrayDataset:
    """In-memory (latents, prompt tokens) pairs with seeded batch sampling."""

    def __init__(self, latents: np.ndarray, prompts: Optional[np.ndarray] = None):
        self.latents = np.asarray(latents, dtype=np.float32)
        self.prompts = None if prompts is None else np.asarray(prompts)
        if self.prompts is not None and len(self.prompts) != len(self.latents):
            raise ShapeError("latents and prompts disagree in length")

    def __len__(self) -> int:
        return len(self.latents)

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, len(self.latents), size=batch_size)
        prompts = None if self.prompts is None else self.prompts[idx]
        return self.latents[idx], prompts


@dataclass
class TrainResult:
    checkpoint: dict
    loss_history: np.ndarray
    aborted: bool = False


def make_checkpoint(model, flow: FlowConfig, optimizer: Adam | None = None,
                    rng: np.random.Generator | None = None,
                    loss_history: np.ndarray | None = None, seed: int | None = None) -> dict:
    return {
        "arch": model.config.to_dict(),
        "params": {k: p.data.copy() for k, p in model.parameters().items()},
        "optimizer": optimizer.state_dict() if optimizer else None,
        "rng_state": rng.bit_generator.state if rng else None,
        "flow": flow.to_dict(),
        "loss_history": np.asarray(loss_history if loss_history is not None else [], dtype=np.float32),
        "seed": seed,
    }


def train(model, dataset: ArrayDataset, optimizer_config: dict, steps: int, seed: int,
          flow: FlowConfig | None = None) -> TrainResult:
    """Seeded CFM training. Divergence aborts with the last finite-loss checkpoint.

    `optimizer_config` may carry `caption_dropout`: the probability of
    replacing a sample's prompt with all-pad tokens, which keeps the empty
    prompt in-distribution for unconditional sampling and editing.
    """
    flow = flow or FlowConfig()
    cfg = dict(optimizer_config)
    batch_size = int(cfg.pop("batch_size", 64))
    caption_dropout = float(cfg.pop("caption_dropout", 0.0))
    optimizer = Adam(model.parameters(), **cfg)
    rng = np.random.default_rng(seed)
    history: list[float] = []
    aborted = False
    good_params = {k: p.data.copy() for k, p in model.parameters().items()}

    for _ in range(steps):
        x1, prompts = dataset.sample(rng, batch_size)
        if prompts is not None and caption_dropout > 0.0:
            drop = rng.uniform(size=batch_size) < caption_dropout
            prompts = prompts.copy()
            prompts[drop] = 0
        t = rng.uniform(0.0, 1.0, size=batch_size).astype(np.float32)
        noise = rng.standard_normal(x1.shape).astype(np.float32)
        try:
            loss = cfm_loss(model, TrainingBatch(x1, prompts, t, noise), flow.sigma_min)
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step()
        except NonFiniteError:
            for k, p in model.parameters().items():
                p.data[...] = good_params[k]
            aborted = True
            break
        history.append(loss.item())
        for k, p in model.parameters().items():
            good_params[k][...] = p.data

    checkpoint = make_checkpoint(model, flow, optimizer, rng,
                                 loss_history=np.array(history, dtype=np.float32), seed=seed)
    return TrainResult(checkpoint=checkpoint, loss_history=np.array(history, dtype=np.float32),
                       aborted=aborted)


def ema(values: np.ndarray, alpha: float = 0.02) -> np.ndarray:
    out = np.empty(len(values), dtype=np.float64)
    acc = values[0] if len(values) else 0.0
    for i, v in enumerate(values):
        acc = (1 - alpha) * acc + alpha * v
        out[i] = acc
    return out


# -- sampling ------------------------------------------------------------------


@dataclass
class SamplingHooks:
    """Editing callbacks evaluated at every field evaluation time.

    u_offset_fn(t) returns the latent offset to inject (or None); reweight_fn(t)
    returns the attention reweight spec active at t (or None). attention_tap
    captures attention maps of the evaluation closest to its time:
    (t_target, sink dict).
    """

    u_offset_fn: Optional[Callable[[float], Optional[np.ndarray]]] = None
    reweight_fn: Optional[Callable[[float], Optional[ReweightSpec]]] = None
    attention_tap: Optional[tuple[float, dict]] = None


def model_field(model, prompt_tokens, hooks: SamplingHooks | None = None) -> ode.Field:
    """Wrap a model as an ODE field; editing hooks resolve per evaluation time."""

    def fieldfn(t: float, y: np.ndarray) -> np.ndarray:
        u_offset = None
        reweight = None
        sink = None
        if hooks is not None:
            if hooks.u_offset_fn is not None:
                u_offset = hooks.u_offset_fn(t)
            if hooks.reweight_fn is not None:
                reweight = hooks.reweight_fn(t)
            if hooks.attention_tap is not None and abs(t - hooks.attention_tap[0]) < 1e-12:
                sink = hooks.attention_tap[1]
        edit_hooks = None
        if u_offset is not None or reweight is not None or sink is not None:
            edit_hooks = EditHooks(u_offset=u_offset, reweight=reweight, attention_sink=sink)
        with T.no_grad():
            v = model.forward(y, prompt_tokens, t, edit_hooks)
        return v.data

    return fieldfn


def generate(model, x0: np.ndarray, prompt_tokens, spec: ode.SolverSpec,
             hooks: SamplingHooks | None = None) -> np.ndarray:
    """Integrate the learned field 0 -> 1 from prior noise x0."""
    if spec.direction != ode.GENERATE:
        raise SolverError(f"generate needs direction '{ode.GENERATE}', got '{spec.direction}'")
    x1, _ = ode.integrate(model_field(model, prompt_tokens, hooks), np.asarray(x0, np.float32), spec)
    return x1


def invert(model, x1: np.ndarray, prompt_tokens, spec: ode.SolverSpec):
    """Integrate 1 -> 0, returning (latent noise, trajectory)."""
    if spec.direction != ode.INVERT:
        raise SolverError(f"invert needs direction '{ode.INVERT}', got '{spec.direction}'")
    x0, traj = ode.integrate(model_field(model, prompt_tokens), np.asarray(x1, np.float32), spec)
    return x0, traj


# -- toy field model -------------------------------------------------------------


@dataclass(frozen=True)
class MLPFieldConfig:
    dim: int = 2
    hidden: tuple[int, ...] = (128, 128, 128)
    time_features: int = 16

    def to_dict(self) -> dict:
        return {"kind": "mlp_field", "dim": self.dim, "hidden": list(self.hidden),
                "time_features": self.time_features}

    @classmethod
    def from_dict(cls, d: dict) -> "MLPFieldConfig":
        return cls(dim=d["dim"], hidden=tuple(d["hidden"]), time_features=d["time_features"])

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return (self.dim,)


class MLPField:
    """Small MLP velocity field for low-dimensional data; prompts are ignored."""

    def __init__(self, config: MLPFieldConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        dims = [config.dim + config.time_features, *config.hidden, config.dim]
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            std = float(np.sqrt(2.0 / fan_in))
            last = i == len(dims) - 2
            w = np.zeros((fan_in, fan_out), np.float32) if last else \
                rng.normal(0.0, std, (fan_in, fan_out)).astype(np.float32)
            self.params[f"w{i}"] = Tensor(w, requires_grad=True)
            self.params[f"b{i}"] = Tensor(np.zeros(fan_out, np.float32), requires_grad=True)
        self.n_layers = len(dims) - 1

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def forward(self, x_t, prompt_tokens, t, hooks: EditHooks | None = None) -> Tensor:
        x = T.as_tensor(x_t)
        squeeze = x.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, *x.shape))
        if hooks is not None and hooks.u_offset is not None:
            x = T.add(x, Tensor(np.asarray(hooks.u_offset, dtype=np.float32)))
        b = x.shape[0]
        t_arr = np.full((b,), t, dtype=np.float32) if np.ndim(t) == 0 else np.asarray(t, np.float32)
        feats = Tensor(sinusoidal_features(t_arr, self.config.time_features))
        h = T.concat([x, feats], axis=1)
        for i in range(self.n_layers):
            h = T.add(T.matmul(h, self.params[f"w{i}"]), self.params[f"b{i}"])
            if i < self.n_layers - 1:
                h = T.gelu(h)
        return T.reshape(h, h.shape[1:]) if squeeze else h


def build_model(arch: dict, seed: int = 0):
    """Instantiate a model from a checkpoint architecture descriptor."""
    kind = arch.get("kind")
    if kind == "uvit":
        return UViT(UViTConfig.from_dict(arch), seed=seed)
    if kind == "mlp_field":
        return MLPField(MLPFieldConfig.from_dict(arch), seed=seed)
    raise ValidationError(f"unknown model kind '{kind}'")


def load_model_from_checkpoint(checkpoint: dict):
    model = build_model(checkpoint["arch"])
    params = model.parameters()
    stored = checkpoint["params"]
    if set(params) != set(stored):
        raise ValidationError("checkpoint parameter names do not match architecture")
    for k, p in params.items():
        if p.data.shape != stored[k].shape:
            raise ShapeError(f"parameter '{k}' shape mismatch")
        p.data[...] = stored[k]
    return model
