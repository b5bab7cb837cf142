"""High-level editing runtime over a frozen checkpoint.

Wraps model + flow config + optional direction bank behind the operations
the CLI commands and HTTP endpoints expose: sample, invert, edit, attention
maps. A loaded runtime is immutable and safe to share across concurrent
requests; every call owns its buffers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import flow, ode
from .codec import get_codec
from .data import default_vocabulary
from .editing import DirectionBank, EditPlan, edit_generate, relative_edit_error
from .errors import ValidationError
from .flow import FlowConfig, SamplingHooks, load_model_from_checkpoint
from .prompts import ReweightSpec, Vocabulary, find_target_tokens, tokenize


def solver_from_params(family: str | None, steps: int | None = None,
                       atol: float | None = None, rtol: float | None = None,
                       direction: str = ode.GENERATE) -> ode.SolverSpec:
    """Build a SolverSpec from loose CLI/HTTP parameters with sane defaults."""
    family = family or "dopri5"
    if family in ode.ADAPTIVE_FAMILIES:
        return ode.SolverSpec(family, atol=atol or 1e-5, rtol=rtol or 1e-5, direction=direction)
    return ode.SolverSpec(family, step_count=steps or 100, direction=direction)


@dataclass
class EditOutcome:
    edited: np.ndarray           # decoded image
    unedited: np.ndarray
    relative_error: float
    noise: np.ndarray


class EditorRuntime:
    """Frozen model + bank + vocabulary, exposing the editing workflow."""

    def __init__(self, checkpoint: dict, bank: DirectionBank | None = None,
                 codec_name: str | None = None):
        self.model = load_model_from_checkpoint(checkpoint)
        self.flow_config = FlowConfig.from_dict(checkpoint["flow"])
        self.arch = checkpoint["arch"]
        self.bank = bank
        self.codec = get_codec(codec_name or checkpoint.get("codec", "identity"))
        if self.arch["kind"] == "uvit":
            self.vocab: Vocabulary | None = default_vocabulary(self.arch["vocab_size"])
            self.prompt_length = self.arch["prompt_length"]
        else:
            self.vocab = None
            self.prompt_length = 0
        self.latent_shape = tuple(self.model.config.latent_shape)

    # -- helpers ---------------------------------------------------------------

    def noise_for_seed(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self.latent_shape).astype(np.float32)

    def tokens(self, prompt: str | None) -> np.ndarray | None:
        if self.vocab is None:
            return None
        return tokenize(prompt or "", self.vocab, self.prompt_length)

    def describe(self) -> dict:
        info = {
            "arch": self.arch,
            "flow": self.flow_config.to_dict(),
            "latent_shape": list(self.latent_shape),
            "attributes": self.bank.attributes if self.bank else [],
            "vocabulary": self.vocab.words if self.vocab else [],
            "prompt_length": self.prompt_length,
            "codec": self.codec.name,
        }
        if self.arch["kind"] == "uvit":
            info["depth"] = self.arch["depth"]
            info["patch_size"] = self.arch["patch_size"]
        return info

    # -- operations --------------------------------------------------------------

    def sample(self, seed: int | None = None, x0: np.ndarray | None = None,
               prompt: str | None = None, solver: ode.SolverSpec | None = None,
               reweights: tuple[tuple[str, float], ...] = (), t_edit: float = 0.5):
        """Generate one image; reweights (word, c) apply while 0 < t < t_edit."""
        if x0 is None:
            if seed is None:
                raise ValidationError("sample needs a seed or an explicit x0")
            x0 = self.noise_for_seed(seed)
        spec = (solver or self.flow_config.generate_solver).with_direction(ode.GENERATE)
        ids = self.tokens(prompt)
        hooks = self._reweight_hooks(ids, reweights, t_edit)
        t0 = time.perf_counter()
        latent = flow.generate(self.model, x0, ids, spec, hooks)
        elapsed = time.perf_counter() - t0
        return self.codec.decode(latent), latent, elapsed

    def invert(self, image: np.ndarray, prompt: str | None = None,
               solver: ode.SolverSpec | None = None):
        spec = (solver or self.flow_config.invert_solver).with_direction(ode.INVERT)
        latent = self.codec.encode(np.asarray(image, dtype=np.float32))
        ids = self.tokens(prompt)
        x0, traj = flow.invert(self.model, latent, ids, spec)
        return x0, traj

    def edit(self, *, seed: int | None = None, noise: np.ndarray | None = None,
             prompt: str | None = None, attributes: tuple[tuple[str, float], ...] = (),
             t_edit: float = 0.5, solver: ode.SolverSpec | None = None,
             reweights: tuple[tuple[str, float], ...] = ()) -> EditOutcome:
        """Edited generation plus its unedited reference from the same noise."""
        if noise is None:
            if seed is None:
                raise ValidationError("edit needs a seed or an inverted noise")
            noise = self.noise_for_seed(seed)
        spec = (solver or self.flow_config.generate_solver).with_direction(ode.GENERATE)
        ids = self.tokens(prompt)
        plan = EditPlan(attributes=tuple(attributes), t_edit=t_edit, solver=spec,
                        reweights=tuple(reweights))
        edited = edit_generate(self.model, noise, ids, plan, self.bank, self.vocab)
        unedited = flow.generate(self.model, noise, ids, spec)
        rel = relative_edit_error(edited, unedited) if np.linalg.norm(unedited) > 0 else 0.0
        return EditOutcome(
            edited=self.codec.decode(edited),
            unedited=self.codec.decode(unedited),
            relative_error=rel,
            noise=noise,
        )

    def attention_maps(self, prompt: str, block: int, step: int, seed: int,
                       n_steps: int = 100):
        """Per-prompt-token attention heatmaps at one sampling step of one block.

        Runs fixed-step euler generation and captures the maps of the
        evaluation at t = step/n_steps; heads are averaged and each map is
        normalized to [0, 1] over the image-token grid.
        """
        if self.vocab is None:
            raise ValidationError("attention maps need a prompt-conditioned model")
        cfg = self.model.config
        if not (0 <= block < cfg.depth):
            raise ValidationError(f"block {block} outside depth {cfg.depth}")
        if not (0 <= step < n_steps):
            raise ValidationError(f"step {step} outside [0, {n_steps})")
        ids = self.tokens(prompt)
        sink: dict = {}
        hooks = SamplingHooks(attention_tap=(step / n_steps, sink))
        spec = ode.SolverSpec("euler", step_count=n_steps, direction=ode.GENERATE)
        flow.generate(self.model, self.noise_for_seed(seed), ids, spec, hooks)
        if block not in sink:
            raise ValidationError(f"no attention captured for block {block}")
        maps = sink[block][0].mean(axis=0)      # heads averaged -> (T, T)
        side = cfg.tokens_per_side
        rows = cfg.image_token_range
        out = []
        for j in range(cfg.prompt_length):
            col = maps[rows.start: rows.stop, 1 + j]
            grid = col.reshape(side, side)
            span = grid.max() - grid.min()
            norm = (grid - grid.min()) / span if span > 0 else np.zeros_like(grid)
            word = self.vocab.id_to_word.get(int(ids[j]), "<pad>")
            out.append({"position": j, "token_id": int(ids[j]), "word": word,
                        "heatmap": norm.astype(np.float32), "grid": [side, side]})
        return out

    def _reweight_hooks(self, ids, reweights, t_edit):
        if not reweights or self.vocab is None:
            return None
        specs = []
        for word, scale in reweights:
            positions = find_target_tokens(ids, [word], self.vocab)
            if positions:
                specs.append(ReweightSpec(positions=tuple(positions), scale=scale,
                                          t_edit=t_edit, allow_negative=scale < 0))
        if not specs:
            return None
        specs = tuple(specs)

        def reweight_fn(t: float):
            return specs if 0.0 < t < t_edit else None

        return SamplingHooks(reweight_fn=reweight_fn)
