"""Semantic direction collection, interpolation, and gated injection.

Directions live at the network input (the latent fed to the model before
patchify): per attribute, a mean difference between attribute-positive and
attribute-negative latents recorded along inversion trajectories at grid
times j/N. During edited generation the offset w * s_t is added at every
field evaluation with 0 < t < t_edit, with s_t linearly interpolated
between its grid neighbors so adaptive solvers can query arbitrary times.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import flow, ode
from .errors import (
    FlowEditError,
    NonFiniteError,
    ShapeError,
    SolverError,
    UnknownAttributeError,
    ValidationError,
)
from .prompts import ReweightSpec, Vocabulary, find_target_tokens


class CollectionAbortedError(FlowEditError):
    """Inversion failed mid-collection; carries the finished trajectories."""

    category = "collection_aborted"

    def __init__(self, message: str, completed: list):
        super().__init__(message)
        self.completed = completed


@dataclass
class DirectionBank:
    """Immutable per-attribute direction sets on the uniform grid {j/N}."""

    grid_n: int
    latent_shape: tuple[int, ...]
    directions: dict[str, np.ndarray] = dc_field(default_factory=dict)   # (N+1, *latent_shape)
    provenance: dict[str, dict] = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.grid_n < 1:
            raise ValidationError("direction grid needs N >= 1")
        for name, arr in self.directions.items():
            arr = np.asarray(arr, dtype=np.float32)
            if arr.shape != (self.grid_n + 1, *self.latent_shape):
                raise ShapeError(
                    f"direction '{name}' has shape {arr.shape}, expected "
                    f"{(self.grid_n + 1, *self.latent_shape)}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"direction '{name}' holds non-finite values")
            arr.flags.writeable = False
            self.directions[name] = arr

    @property
    def attributes(self) -> list[str]:
        return sorted(self.directions)

    def grid_times(self) -> np.ndarray:
        return np.arange(self.grid_n + 1) / self.grid_n

    def has(self, attribute: str) -> bool:
        return attribute in self.directions


def collect_u_trajectories(model, images: np.ndarray, prompts, n_grid: int):
    """Invert each image with fixed-step euler (N steps), recording the latent
    at every grid time. Returns, per image, [(t_j, u_j)] ordered t ascending."""
    spec = ode.SolverSpec("euler", step_count=n_grid, direction=ode.INVERT)
    images = np.asarray(images, dtype=np.float32)
    config = getattr(model, "config", None)
    latent_shape = getattr(config, "latent_shape", None)
    if latent_shape is not None and images.shape == tuple(latent_shape):
        images = images[None]
    out = []
    for i, image in enumerate(images):
        prompt = None if prompts is None else np.asarray(prompts)[i]
        try:
            _, traj = flow.invert(model, image, prompt, spec)
        except (SolverError, NonFiniteError) as exc:
            raise CollectionAbortedError(
                f"inversion failed on image {i} after {len(out)} completed: {exc}", out
            ) from exc
        points = sorted(traj.points, key=lambda p: p[0])
        out.append([(float(t), state) for t, state in points])
    return out


def compute_direction(pos_trajectories, neg_trajectories) -> np.ndarray:
    """Per-grid-time difference of per-side means (positive minus negative)."""
    if not pos_trajectories or not neg_trajectories:
        raise ValidationError("both direction sides must be nonempty")
    t_ref = np.array([t for t, _ in pos_trajectories[0]])
    for traj in (*pos_trajectories, *neg_trajectories):
        ts = np.array([t for t, _ in traj])
        if ts.shape != t_ref.shape or not np.allclose(ts, t_ref, atol=1e-9):
            raise ValidationError("trajectory grids do not match")
    pos_mean = np.mean([[u for _, u in traj] for traj in pos_trajectories], axis=0, dtype=np.float64)
    neg_mean = np.mean([[u for _, u in traj] for traj in neg_trajectories], axis=0, dtype=np.float64)
    return (pos_mean - neg_mean).astype(np.float32)


def build_direction_bank(model, pos_images, neg_images, prompts_pos, prompts_neg,
                         attribute: str, grid_n: int, provenance: str = "real-image inversion") -> DirectionBank:
    """End-to-end: invert both sides, difference the means, wrap in a bank."""
    pos = collect_u_trajectories(model, pos_images, prompts_pos, grid_n)
    neg = collect_u_trajectories(model, neg_images, prompts_neg, grid_n)
    direction = compute_direction(pos, neg)
    latent_shape = tuple(direction.shape[1:])
    return DirectionBank(
        grid_n=grid_n,
        latent_shape=latent_shape,
        directions={attribute: direction},
        provenance={attribute: {
            "provenance": provenance,
            "pos_count": len(pos),
            "neg_count": len(neg),
        }},
    )


def merge_banks(banks: list[DirectionBank]) -> DirectionBank:
    first = banks[0]
    directions, provenance = {}, {}
    for b in banks:
        if b.grid_n != first.grid_n or b.latent_shape != first.latent_shape:
            raise ValidationError("banks disagree on grid or latent shape")
        directions.update({k: v.copy() for k, v in b.directions.items()})
        provenance.update(b.provenance)
    return DirectionBank(first.grid_n, first.latent_shape, directions, provenance)


def interpolate_direction(bank: DirectionBank, attribute: str, t: float) -> np.ndarray:
    """s_t linear between the two nearest grid directions; exact on grid hits."""
    if not bank.has(attribute):
        raise UnknownAttributeError(f"attribute '{attribute}' not in bank {bank.attributes}")
    if not (-1e-9 <= t <= 1.0 + 1e-9):
        raise ValidationError(f"t={t} outside [0, 1]")
    t = min(max(t, 0.0), 1.0)
    x = t * bank.grid_n
    j0 = int(np.floor(x))
    j1 = min(j0 + 1, bank.grid_n)
    stored = bank.directions[attribute]
    if j0 == j1 or x == j0:
        return stored[j0].copy()
    frac = np.float32(x - j0)
    return stored[j0] + (stored[j1] - stored[j0]) * frac


def nearest_direction(bank: DirectionBank, attribute: str, t: float) -> np.ndarray:
    """Nearest-neighbor grid lookup (the non-interpolated baseline)."""
    if not bank.has(attribute):
        raise UnknownAttributeError(f"attribute '{attribute}' not in bank {bank.attributes}")
    j = int(round(min(max(t, 0.0), 1.0) * bank.grid_n))
    return bank.directions[attribute][j].copy()


def apply_guidance(u: np.ndarray, s: np.ndarray, w: float) -> np.ndarray:
    """Guided latent u + w*s."""
    u = np.asarray(u, dtype=np.float32)
    s = np.asarray(s, dtype=np.float32)
    if u.shape != s.shape:
        raise ShapeError(f"guidance shape mismatch: {u.shape} vs {s.shape}")
    return u + np.float32(w) * s


def guidance_offset(bank: DirectionBank, attributes, t: float,
                    lookup=interpolate_direction) -> np.ndarray | None:
    """Sum of w_k * s_k(t) in canonical (sorted-by-name) order.

    The fixed accumulation order makes composition exactly order-independent
    at the float level. Returns None when every weight is zero.
    """
    live = [(k, w) for k, w in sorted(attributes) if w != 0.0]
    if not live:
        return None
    total = None
    for k, w in live:
        term = np.float32(w) * lookup(bank, k, t)
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class EditPlan:
    """A complete edit request over one generation."""

    attributes: tuple[tuple[str, float], ...] = ()
    t_edit: float = 0.5
    solver: ode.SolverSpec = dc_field(default_factory=lambda: ode.SolverSpec(
        "dopri5", atol=1e-5, rtol=1e-5, direction=ode.GENERATE))
    seed: int | None = None
    reweights: tuple[tuple[str, float], ...] = ()   # (word, scale c)
    use_interpolation: bool = True

    def __post_init__(self):
        if not (0.0 < self.t_edit <= 1.0):
            raise ValidationError(f"t_edit must lie in (0, 1], got {self.t_edit}")
        if self.solver.direction != ode.GENERATE:
            raise ValidationError("edit plans integrate in the generate direction")

    def validate_against(self, bank: DirectionBank | None):
        missing = [k for k, _ in self.attributes if bank is None or not bank.has(k)]
        if missing:
            raise UnknownAttributeError(f"attributes not in bank: {missing}")


def edit_generate(model, x0: np.ndarray, prompt_tokens, plan: EditPlan,
                  bank: DirectionBank | None, vocab: Vocabulary | None = None) -> np.ndarray:
    """Generate 0 -> 1 with gated u-space guidance and prompt reweighting.

    At every field evaluation with 0 < t < t_edit the latent offset
    sum_k w_k * s_k(t) is injected and any token reweights are active; at
    t >= t_edit the evaluation is unmodified. With all weights zero and no
    reweights this is bit-identical to plain generation.
    """
    if plan.attributes:
        plan.validate_against(bank)
    lookup = interpolate_direction if plan.use_interpolation else nearest_direction

    def u_offset_fn(t: float):
        if not (0.0 < t < plan.t_edit) or not plan.attributes:
            return None
        return guidance_offset(bank, plan.attributes, t, lookup=lookup)

    reweight = _resolve_reweights(plan, prompt_tokens, vocab)

    def reweight_fn(t: float):
        if reweight is None or not (0.0 < t < plan.t_edit):
            return None
        return reweight

    hooks = flow.SamplingHooks(
        u_offset_fn=u_offset_fn if plan.attributes else None,
        reweight_fn=reweight_fn if reweight is not None else None,
    )
    if hooks.u_offset_fn is None and hooks.reweight_fn is None:
        hooks = None
    return flow.generate(model, x0, prompt_tokens, plan.solver, hooks)


def _resolve_reweights(plan: EditPlan, prompt_tokens, vocab: Vocabulary | None):
    if not plan.reweights:
        return None
    if vocab is None:
        raise ValidationError("token reweights need a vocabulary to resolve words")
    specs = []
    for word, scale in plan.reweights:
        positions = find_target_tokens(np.atleast_2d(prompt_tokens)[0], [word], vocab)
        if not positions:
            continue
        specs.append(ReweightSpec(positions=tuple(positions), scale=scale,
                                  t_edit=plan.t_edit, allow_negative=scale < 0))
    if not specs:
        warnings.warn("no reweight target matched the prompt; reweighting disabled")
        return None
    return tuple(specs)


def relative_edit_error(candidate: np.ndarray, reference: np.ndarray) -> float:
    """L2 distance between edits, relative to the reference magnitude."""
    cand = np.asarray(candidate, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if cand.shape != ref.shape:
        raise ShapeError(f"edit error shapes differ: {candidate.shape} vs {reference.shape}")
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ValidationError("reference edit has zero norm")
    return float(np.linalg.norm(cand - ref) / denom)


def pca_directions(u_samples: np.ndarray, n_components: int):
    """Top principal components of mean-centered flattened samples.

    Returns (components, explained_variance), components unit-norm with
    variance descending. Degenerate covariance yields fewer components with
    a warning instead of an error.
    """
    samples = np.asarray(u_samples, dtype=np.float64)
    n = samples.shape[0]
    if n < n_components:
        raise ValidationError(f"{n} samples cannot support {n_components} components")
    flat = samples.reshape(n, -1)
    centered = flat - flat.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    explained = (svals ** 2) / max(n - 1, 1)
    tol = svals.max() * max(centered.shape) * np.finfo(np.float64).eps if svals.size else 0.0
    rank = int((svals > tol).sum())
    if rank < n_components:
        warnings.warn(f"covariance rank {rank} < requested {n_components}; returning {rank}")
        n_components = rank
    comps = vt[:n_components].astype(np.float32)
    return comps, explained[:n_components].astype(np.float32)
