"""Explicit Runge-Kutta integrators over the unit time span.

Two families:
  * fixed-step (euler, rk4): exactly N macro-steps on the grid t_i = i/N,
  * adaptive embedded pairs (dopri5, bosh3, adaptive_heun): per-step error
    control under a weighted RMS norm with a PI step-size controller
    (safety 0.9, growth clamped to [0.2, 10], Hairer-Norsett-Wanner
    initial step heuristic).

The integrator is array-level and dtype-generic: states keep the dtype of
`x_init` (callers pass float32 in production paths). `direction` selects
generation (0 -> 1) or inversion (1 -> 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalBlowupError, SolverError, StepUnderflowError

GENERATE = "generate"
INVERT = "invert"

FIXED_FAMILIES = ("euler", "rk4")
ADAPTIVE_FAMILIES = ("dopri5", "bosh3", "adaptive_heun")

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_H_UNDERFLOW = 1e-12


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    order: int                      # order of the propagating solution
    error_order: int | None         # order of the embedded solution, None if no pair
    c: tuple[float, ...]
    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    b_emb: tuple[float, ...] | None

    @property
    def stages(self) -> int:
        return len(self.c)


_TABLEAUS = {
    "euler": ButcherTableau(
        name="euler", order=1, error_order=None,
        c=(0.0,), a=((),), b=(1.0,), b_emb=None,
    ),
    "rk4": ButcherTableau(
        name="rk4", order=4, error_order=None,
        c=(0.0, 0.5, 0.5, 1.0),
        a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
        b_emb=None,
    ),
    "adaptive_heun": ButcherTableau(
        name="adaptive_heun", order=2, error_order=1,
        c=(0.0, 1.0),
        a=((), (1.0,)),
        b=(0.5, 0.5),
        b_emb=(1.0, 0.0),
    ),
    "bosh3": ButcherTableau(
        name="bosh3", order=3, error_order=2,
        c=(0.0, 0.5, 0.75, 1.0),
        a=((), (0.5,), (0.0, 0.75), (2 / 9, 1 / 3, 4 / 9)),
        b=(2 / 9, 1 / 3, 4 / 9, 0.0),
        b_emb=(7 / 24, 0.25, 1 / 3, 0.125),
    ),
    "dopri5": ButcherTableau(
        name="dopri5", order=5, error_order=4,
        c=(0.0, 0.2, 0.3, 0.8, 8 / 9, 1.0, 1.0),
        a=(
            (),
            (0.2,),
            (3 / 40, 9 / 40),
            (44 / 45, -56 / 15, 32 / 9),
            (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
            (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
            (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
        ),
        b=(35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0),
        b_emb=(5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40),
    ),
}


def solver_tableaus() -> dict[str, ButcherTableau]:
    """All supported Butcher tableaus, keyed by solver family."""
    return dict(_TABLEAUS)


@dataclass(frozen=True)
class SolverSpec:
    """Which solver to run and in which direction over [0, 1]."""

    family: str
    step_count: Optional[int] = None
    atol: Optional[float] = None
    rtol: Optional[float] = None
    direction: str = GENERATE

    def __post_init__(self):
        if self.family not in _TABLEAUS:
            raise SolverError(f"unknown solver family '{self.family}'")
        if self.direction not in (GENERATE, INVERT):
            raise SolverError(f"direction must be '{GENERATE}' or '{INVERT}', got '{self.direction}'")
        if self.is_adaptive:
            if self.atol is None or self.rtol is None or self.atol <= 0 or self.rtol <= 0:
                raise SolverError(f"adaptive family '{self.family}' requires atol > 0 and rtol > 0")
        else:
            if self.step_count is None or self.step_count < 1:
                raise SolverError(f"fixed-step family '{self.family}' requires step_count >= 1")

    @property
    def is_adaptive(self) -> bool:
        return self.family in ADAPTIVE_FAMILIES

    def with_direction(self, direction: str) -> "SolverSpec":
        return SolverSpec(self.family, self.step_count, self.atol, self.rtol, direction)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "step_count": self.step_count,
            "atol": self.atol,
            "rtol": self.rtol,
            "direction": self.direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolverSpec":
        return cls(
            family=d["family"],
            step_count=d.get("step_count"),
            atol=d.get("atol"),
            rtol=d.get("rtol"),
            direction=d.get("direction", GENERATE),
        )


@dataclass
class StepRecord:
    t: float                 # time the step started from
    step_size: float
    error_norm: Optional[float]   # None for fixed-step families
    accepted: bool


@dataclass
class Trajectory:
    """Visited (t, state) points plus per-step controller metadata."""

    points: list[tuple[float, np.ndarray]] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.points]

    @property
    def states(self) -> list[np.ndarray]:
        return [s for _, s in self.points]

    def accepted_count(self) -> int:
        return sum(1 for s in self.steps if s.accepted)

    def rejected_count(self) -> int:
        return sum(1 for s in self.steps if not s.accepted)


Field = Callable[[float, np.ndarray], np.ndarray]
Observer = Callable[[float, np.ndarray], None]


def rk_step(tab: ButcherTableau, f: Field, t: float, y: np.ndarray, h: float):
    """One explicit RK step. Returns (y_next, error_estimate | None)."""
    k = []
    for i in range(tab.stages):
        yi = y
        if i:
            acc = tab.a[i][0] * k[0]
            for j in range(1, i):
                aij = tab.a[i][j]
                if aij:
                    acc = acc + aij * k[j]
            yi = y + h * acc
        k.append(np.asarray(f(t + tab.c[i] * h, yi)))
    acc = None
    for i, bi in enumerate(tab.b):
        if bi:
            acc = bi * k[i] if acc is None else acc + bi * k[i]
    y_next = y + h * acc
    if tab.b_emb is None:
        return y_next, None
    err = None
    for i in range(tab.stages):
        d = tab.b[i] - tab.b_emb[i]
        if d:
            err = d * k[i] if err is None else err + d * k[i]
    return y_next, h * err


def _error_norm(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, atol: float, rtol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f: Field, t0: float, y0: np.ndarray, f0: np.ndarray,
                  sign: float, order: int, atol: float, rtol: float) -> float:
    scale = atol + rtol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + sign * h0 * f0
    f1 = np.asarray(f(t0 + sign * h0, y1))
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1, 1.0)


def integrate(field: Field, x_init, spec: SolverSpec, observer: Observer | None = None):
    """Integrate dx/dt = field(t, x) across [0,1] in the spec's direction.

    Returns (x_final, Trajectory). The trajectory's points include the
    initial state, so fixed-step euler with N steps yields N+1 grid points.
    The observer fires once per accepted step with the new (t, state).
    """
    y = np.array(getattr(x_init, "data", x_init), copy=True)
    if not np.all(np.isfinite(y)):
        raise NumericalBlowupError("initial state is non-finite")
    t0, t1 = (0.0, 1.0) if spec.direction == GENERATE else (1.0, 0.0)
    tab = _TABLEAUS[spec.family]
    traj = Trajectory()
    traj.points.append((t0, y.copy()))

    if not spec.is_adaptive:
        n = spec.step_count
        span = t1 - t0
        for i in range(n):
            t_here = t0 + span * (i / n)
            t_next = t1 if i == n - 1 else t0 + span * ((i + 1) / n)
            h = t_next - t_here
            y, _ = rk_step(tab, field, t_here, y, h)
            if not np.all(np.isfinite(y)):
                raise NumericalBlowupError(f"state blew up at t={t_next:.6f}")
            traj.points.append((t_next, y.copy()))
            traj.steps.append(StepRecord(t=t_here, step_size=h, error_norm=None, accepted=True))
            if observer is not None:
                observer(t_next, y)
        return y, traj

    atol, rtol = spec.atol, spec.rtol
    sign = 1.0 if t1 > t0 else -1.0
    f0 = np.asarray(field(t0, y))
    h = _initial_step(field, t0, y, f0, sign, tab.order, atol, rtol)
    t = t0
    err_order = tab.error_order
    k_exp = 1.0 / (err_order + 1)
    prev_err = 1.0
    while (t1 - t) * sign > 0:
        h = min(h, abs(t1 - t))
        if h < _H_UNDERFLOW:
            raise StepUnderflowError(f"step size underflow at t={t:.6f}")
        y_new, err = rk_step(tab, field, t, y, sign * h)
        if not np.all(np.isfinite(y_new)):
            raise NumericalBlowupError(f"state blew up at t={t:.6f}")
        err_norm = _error_norm(err, y, y_new, atol, rtol)
        if err_norm <= 1.0:
            t_new = t1 if abs(t1 - (t + sign * h)) < 1e-14 else t + sign * h
            traj.steps.append(StepRecord(t=t, step_size=h, error_norm=err_norm, accepted=True))
            traj.points.append((t_new, y_new.copy()))
            if observer is not None:
                observer(t_new, y_new)
            t, y = t_new, y_new
            # PI growth: current error at weight 0.7, previous at 0.4.
            factor = _SAFETY * (err_norm + 1e-16) ** (-0.7 * k_exp) * prev_err ** (0.4 * k_exp)
            h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            prev_err = max(err_norm, 1e-10)
        else:
            traj.steps.append(StepRecord(t=t, step_size=h, error_norm=err_norm, accepted=False))
            factor = max(_MIN_FACTOR, _SAFETY * err_norm ** (-k_exp))
            h *= factor  # safety < 1 and err_norm > 1 force strict decrease
    return y, traj
