"""Reusable acceptance-style evaluations over trained checkpoints.

These functions are the substance behind both the `eval` CLI command and
the acceptance test suite; they are deterministic given their seeds.
"""

from __future__ import annotations

import numpy as np

from . import flow, ode, persist
from .data import attribute_oracle, dataset_arrays, default_vocabulary, gen_shapes, gen_two_moons
from .editing import DirectionBank, EditPlan, edit_generate, relative_edit_error
from .errors import OracleError
from .flow import ArrayDataset, SamplingHooks, generate, invert, model_field
from .metrics import energy_distance, pixel_l2_relative_error
from .prompts import tokenize


def dopri(direction: str = ode.GENERATE, tol: float = 1e-5) -> ode.SolverSpec:
    return ode.SolverSpec("dopri5", atol=tol, rtol=tol, direction=direction)


def euler(n: int, direction: str = ode.GENERATE) -> ode.SolverSpec:
    return ode.SolverSpec("euler", step_count=n, direction=direction)


# -- two-moons generation quality ---------------------------------------------------


def two_moons_energy_report(model, n: int = 2000, data_seed: int = 500,
                            noise_seed: int = 501, noise_sd: float = 0.1) -> dict:
    """Energy distance of generated samples vs held-out data, with a
    same-distribution baseline from two disjoint held-out splits."""
    held = gen_two_moons(3 * n, noise_sd=noise_sd, seed=data_seed)
    held_a, held_b = held[:n], held[n:2 * n]
    rng = np.random.default_rng(noise_seed)
    x0 = rng.standard_normal((n, 2)).astype(np.float32)
    samples = generate(model, x0, None, dopri())
    baseline = energy_distance(held_a, held_b)
    gen_vs_held = energy_distance(samples, held_a)
    return {
        "baseline_energy": float(baseline),
        "generated_energy": float(gen_vs_held),
        "ratio": float(gen_vs_held / baseline),
    }


# -- cycle consistency ---------------------------------------------------------------


def cycle_consistency_report(model, images: np.ndarray, tokens, tol: float = 1e-5) -> dict:
    """invert -> generate round trip per image with dopri5 at the given tolerance."""
    errors = []
    for i, image in enumerate(images):
        ids = None if tokens is None else tokens[i]
        x0, _ = invert(model, image, ids, dopri(ode.INVERT, tol))
        rec = generate(model, x0, ids, dopri(ode.GENERATE, tol))
        errors.append(pixel_l2_relative_error(rec, image))
    errors = np.array(errors)
    return {"mean": float(errors.mean()), "max": float(errors.max()), "count": len(errors)}


# -- direction banks -----------------------------------------------------------------


def collect_bank_batched(model, pos_images, pos_tokens, neg_images, neg_tokens,
                         attribute: str, grid_n: int) -> DirectionBank:
    """Batched fixed-step collection: one inversion per side (euler couples
    nothing across batch elements, so per-image and batched grids agree)."""
    sides = []
    for images, tokens in ((pos_images, pos_tokens), (neg_images, neg_tokens)):
        f = model_field(model, tokens)
        _, traj = ode.integrate(f, np.asarray(images, np.float32),
                                euler(grid_n, ode.INVERT))
        points = sorted(traj.points, key=lambda p: p[0])
        sides.append(points)
    direction = np.stack([
        p[1].mean(axis=0, dtype=np.float64) - q[1].mean(axis=0, dtype=np.float64)
        for p, q in zip(sides[0], sides[1])
    ]).astype(np.float32)
    return DirectionBank(
        grid_n=grid_n, latent_shape=tuple(direction.shape[1:]),
        directions={attribute: direction},
        provenance={attribute: {"provenance": "real-image inversion",
                                "pos_count": len(pos_images), "neg_count": len(neg_images)}},
    )


def size_direction_sets(dataset_seed: int = 300, dataset_n: int = 4000, per_side: int = 128,
                        pos_range=(4.4, 6.0), neg_range=(2.0, 3.6)):
    """Margin-separated large/small image sets for the "large" attribute."""
    pool = gen_shapes(dataset_n, seed=dataset_seed)
    pos = [s for s in pool if pos_range[0] <= s.size <= pos_range[1]][:per_side]
    neg = [s for s in pool if neg_range[0] <= s.size <= neg_range[1]][:per_side]
    return pos, neg


# -- edits ------------------------------------------------------------------------------


def batched_edit_generate(model, x0_batch, tokens, bank, attribute, w, t_edit,
                          solver=None, use_interpolation=True):
    """Edited generation over a seed batch (fixed-step solvers only)."""
    from .editing import guidance_offset, interpolate_direction, nearest_direction

    solver = solver or euler(100)
    lookup = interpolate_direction if use_interpolation else nearest_direction

    def offset(t):
        if not (0.0 < t < t_edit) or w == 0.0:
            return None
        return guidance_offset(bank, ((attribute, w),), t, lookup=lookup)

    hooks = SamplingHooks(u_offset_fn=offset) if w != 0.0 else None
    return generate(model, x0_batch, tokens, solver, hooks)


def _oracle_or_nan(image, attribute):
    try:
        return attribute_oracle(image, attribute)
    except OracleError:
        return np.nan


def edit_flip_report(model, bank, attribute: str = "large", w: float = 2.0,
                     t_edit: float = 0.5, n_seeds: int = 100, seed: int = 900,
                     prompt_tokens=None, oracle_attribute: str = "size") -> dict:
    """Directional oracle movement under +w and -w edits from shared noise."""
    latent_shape = tuple(model.config.latent_shape)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n_seeds, *latent_shape)).astype(np.float32)
    tokens = None
    if prompt_tokens is not None:
        tokens = np.tile(np.asarray(prompt_tokens), (n_seeds, 1))
    base = batched_edit_generate(model, x0, tokens, bank, attribute, 0.0, t_edit)
    up = batched_edit_generate(model, x0, tokens, bank, attribute, +w, t_edit)
    down = batched_edit_generate(model, x0, tokens, bank, attribute, -w, t_edit)
    vb = np.array([_oracle_or_nan(im, oracle_attribute) for im in base])
    vu = np.array([_oracle_or_nan(im, oracle_attribute) for im in up])
    vd = np.array([_oracle_or_nan(im, oracle_attribute) for im in down])
    ok = ~(np.isnan(vb) | np.isnan(vu) | np.isnan(vd))
    return {
        "increase_rate": float(np.mean(vu[ok] > vb[ok])),
        "decrease_rate": float(np.mean(vd[ok] < vb[ok])),
        "oracle_base_mean": float(np.nanmean(vb)),
        "oracle_up_mean": float(np.nanmean(vu)),
        "oracle_down_mean": float(np.nanmean(vd)),
        "valid": int(ok.sum()),
    }


def t_edit_sweep_report(model, bank, attribute: str = "large", w: float = 2.0,
                        t_edits=(0.05, 0.1, 0.3, 0.5, 1.0), n_seeds: int = 50,
                        seed: int = 901, prompt_tokens=None) -> dict:
    """Mean L2 distance between edited and unedited outputs per gate time."""
    latent_shape = tuple(model.config.latent_shape)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n_seeds, *latent_shape)).astype(np.float32)
    tokens = None
    if prompt_tokens is not None:
        tokens = np.tile(np.asarray(prompt_tokens), (n_seeds, 1))
    base = batched_edit_generate(model, x0, tokens, bank, attribute, 0.0, 0.5)
    distances = []
    for t_edit in t_edits:
        edited = batched_edit_generate(model, x0, tokens, bank, attribute, w, t_edit)
        d = np.linalg.norm((edited - base).reshape(n_seeds, -1), axis=1)
        distances.append(float(d.mean()))
    return {"t_edits": list(t_edits), "distances": distances}


def interpolation_error_table(model, banks: dict[int, DirectionBank], attribute: str = "large",
                              w: float = 1.0, t_edit: float = 0.5, n_seeds: int = 6,
                              seed: int = 902, prompt_tokens=None,
                              solvers=("dopri5", "bosh3", "adaptive_heun")) -> dict:
    """Relative edit error of adaptive-solver edits vs the euler-N=100 reference.

    Compares interpolated direction lookup across bank grids, plus the
    nearest-neighbor baseline at the coarse grids.
    """
    latent_shape = tuple(model.config.latent_shape)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n_seeds, *latent_shape)).astype(np.float32)
    tokens = None
    if prompt_tokens is not None:
        tokens = np.tile(np.asarray(prompt_tokens), (n_seeds, 1))
    ref_bank = banks[max(banks)]
    references = batched_edit_generate(model, x0, tokens, ref_bank, attribute, w, t_edit,
                                       solver=euler(100))

    def run(solver_family, bank, interpolate):
        errors = []
        spec = ode.SolverSpec(solver_family, atol=1e-5, rtol=1e-5, direction=ode.GENERATE)
        for i in range(n_seeds):
            tk = None if tokens is None else tokens[i]
            plan = EditPlan(attributes=((attribute, w),), t_edit=t_edit, solver=spec,
                            use_interpolation=interpolate)
            edited = edit_generate(model, x0[i], tk, plan, bank)
            errors.append(relative_edit_error(edited, references[i]))
        return float(np.mean(errors))

    table: dict = {"grids": sorted(banks), "interpolated": {}, "nearest": {}}
    for family in solvers:
        table["interpolated"][family] = [run(family, banks[n], True) for n in sorted(banks)]
        table["nearest"][family] = {n: run(family, banks[n], False)
                                    for n in sorted(banks)[:2]}
    return table


# -- orchestration -------------------------------------------------------------------


def evaluate_checkpoint(checkpoint_path, bank_path=None, quick: bool = True) -> dict:
    checkpoint = persist.load_checkpoint(checkpoint_path)
    model = flow.load_model_from_checkpoint(checkpoint)
    report: dict = {"arch": checkpoint["arch"]["kind"]}
    if checkpoint["arch"]["kind"] == "mlp_field":
        n = 500 if quick else 2000
        report["two_moons"] = two_moons_energy_report(model, n=n)
        return report

    vocab = default_vocabulary(checkpoint["arch"]["vocab_size"])
    length = checkpoint["arch"]["prompt_length"]
    n_images = 10 if quick else 50
    test = gen_shapes(200, seed=777)[:n_images]
    images, tokens = dataset_arrays(test, vocab, length)
    report["cycle"] = cycle_consistency_report(model, images, tokens)
    if bank_path is not None:
        bank = persist.load_bank(bank_path)
        attribute = bank.attributes[0]
        n_seeds = 20 if quick else 100
        report["edit_flip"] = edit_flip_report(model, bank, attribute, n_seeds=n_seeds)
        report["t_edit_sweep"] = t_edit_sweep_report(model, bank, attribute,
                                                     n_seeds=10 if quick else 50)
    return report
