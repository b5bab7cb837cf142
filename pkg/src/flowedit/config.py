"""Run configuration: dataset, model, flow, optimizer, and output layout.

Configs serialize to JSON; every command writes its resolved config next to
its artifacts so any run can be reproduced from the output directory alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import MissingFileError, ValidationError
from .flow import FlowConfig
from .uvit import UViTConfig


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "shapes"          # shapes | two_moons
    n: int = 4096
    seed: int = 100
    noise_sd: float = 0.1         # two_moons only

    def __post_init__(self):
        if self.kind not in ("shapes", "two_moons"):
            raise ValidationError(f"unknown dataset kind '{self.kind}'")
        if self.n < 1:
            raise ValidationError("dataset size must be positive")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    batch_size: int = 16
    steps: int = 4000
    caption_dropout: float = 0.0

    def optimizer_kwargs(self) -> dict:
        return {
            "lr": self.lr,
            "betas": (self.beta1, self.beta2),
            "eps": self.eps,
            "grad_clip": self.grad_clip,
            "batch_size": self.batch_size,
            "caption_dropout": self.caption_dropout,
        }


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: dict = field(default_factory=lambda: UViTConfig().to_dict())
    flow: FlowConfig = field(default_factory=FlowConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    codec: str = "identity"
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "model": dict(self.model),
            "flow": self.flow.to_dict(),
            "optim": asdict(self.optim),
            "codec": self.codec,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"dataset", "model", "flow", "optim", "codec", "seed", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            dataset=DatasetConfig(**d.get("dataset", {})),
            model=dict(d.get("model", UViTConfig().to_dict())),
            flow=FlowConfig.from_dict(d["flow"]) if "flow" in d else FlowConfig(),
            optim=OptimConfig(**d.get("optim", {})),
            codec=d.get("codec", "identity"),
            seed=d.get("seed", 0),
            out_dir=d.get("out_dir", "runs/default"),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValidationError(f"invalid config {path}: {exc}") from exc

    def write_resolved(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "config.json"
        target.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return target
