"""Command-line workflow: train, sample, invert, edit, reweight, pca,
attention maps, evaluation, and the HTTP server.

Every command is deterministic given (config, seed), writes its resolved
inputs next to its outputs, and exits nonzero with a machine-readable
error category on failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import flow, ode, persist
from .codec import get_codec
from .config import DatasetConfig, OptimConfig, RunConfig
from .data import dataset_arrays, default_vocabulary, gen_shapes, gen_two_moons
from .editing import build_direction_bank, merge_banks, pca_directions
from .errors import FlowEditError, MissingFileError, ValidationError
from .flow import ArrayDataset, FlowConfig, build_model, train
from .runtime import EditorRuntime, solver_from_params
from .uvit import UViTConfig

_EXIT_CODES = {
    "validation": 2, "vocabulary": 2, "unknown_attribute": 2, "solver": 2,
    "shape": 2, "collection_aborted": 2,
    "missing_file": 3, "digest_mismatch": 3, "unsupported_format": 3, "persistence": 3,
    "divergence": 4, "blowup": 4, "non_finite": 4, "gradient": 4, "oracle": 4,
}


def cli_errors(fn):
    """Convert FlowEditError into an error-category JSON line and exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FlowEditError as exc:
            payload = {"error": exc.category, "message": str(exc)}
            click.echo(json.dumps(payload), err=True)
            sys.exit(_EXIT_CODES.get(exc.category, 1))

    return wrapper


def _load_config(config_path: str | None, **overrides) -> RunConfig:
    cfg = RunConfig.from_file(config_path) if config_path else RunConfig()
    live = {k: v for k, v in overrides.items() if v is not None}
    if not live:
        return cfg
    d = cfg.to_dict()
    for key, value in live.items():
        section, _, name = key.partition(".")
        if name:
            d[section][name] = value
        else:
            d[key] = value
    return RunConfig.from_dict(d)


def _solver_options(fn):
    for opt in reversed([
        click.option("--solver", type=click.Choice(["euler", "rk4", "dopri5", "bosh3", "adaptive_heun"]),
                     default=None, help="Solver family (default from the checkpoint flow config)."),
        click.option("--steps", type=int, default=None, help="Step count for fixed-step families."),
        click.option("--atol", type=float, default=None),
        click.option("--rtol", type=float, default=None),
    ]):
        fn = opt(fn)
    return fn


def _runtime(checkpoint: str, bank: str | None = None) -> EditorRuntime:
    ckpt = persist.load_checkpoint(checkpoint)
    bank_obj = persist.load_bank(bank) if bank else None
    return EditorRuntime(ckpt, bank_obj)


def _parse_attr(values: tuple[str, ...]) -> tuple[tuple[str, float], ...]:
    out = []
    for item in values:
        name, _, w = item.partition("=")
        if not w:
            raise ValidationError(f"attribute weight must look like name=w, got '{item}'")
        out.append((name, float(w)))
    return tuple(out)


def _parse_filter(expr: str):
    """Comma-separated clauses over sample fields: size>=4.2,shape==circle."""
    import operator

    ops = [(">=", operator.ge), ("<=", operator.le), ("!=", operator.ne),
           ("==", operator.eq), (">", operator.gt), ("<", operator.lt)]
    clauses = []
    for raw in expr.split(","):
        raw = raw.strip()
        if not raw:
            continue
        for sym, op in ops:
            if sym in raw:
                field, _, value = raw.partition(sym)
                field = field.strip()
                value = value.strip()
                clauses.append((field, op, value))
                break
        else:
            raise ValidationError(f"cannot parse filter clause '{raw}'")

    def predicate(sample):
        for field, op, value in clauses:
            if not hasattr(sample, field):
                raise ValidationError(f"unknown sample field '{field}' in filter")
            current = getattr(sample, field)
            cast = float(value) if isinstance(current, (int, float)) else value
            if not op(current, cast):
                return False
        return True

    return predicate


@click.group()
def main():
    """Desk-scale flow-matching generation and image editing."""


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--caption-dropout", type=float, default=None)
@click.option("--seed", type=int, default=None)
@cli_errors
def train_cmd(config_path, out_dir, steps, lr, batch_size, caption_dropout, seed):
    """Train a model and write checkpoint + loss history."""
    cfg = _load_config(
        config_path,
        **{"out_dir": out_dir, "seed": seed, "optim.steps": steps, "optim.lr": lr,
           "optim.batch_size": batch_size, "optim.caption_dropout": caption_dropout},
    )
    out = Path(cfg.out_dir)
    cfg.write_resolved(out)

    if cfg.dataset.kind == "shapes":
        samples = gen_shapes(cfg.dataset.n, seed=cfg.dataset.seed)
        vocab = default_vocabulary(cfg.model.get("vocab_size", 64))
        codec = get_codec(cfg.codec)
        images, tokens = dataset_arrays(samples, vocab, cfg.model["prompt_length"])
        latents = np.stack([codec.encode(im) for im in images])
        dataset = ArrayDataset(latents, tokens)
    else:
        dataset = ArrayDataset(gen_two_moons(cfg.dataset.n, cfg.dataset.noise_sd, cfg.dataset.seed))

    model = build_model(cfg.model, seed=cfg.seed)
    result = train(model, dataset, cfg.optim.optimizer_kwargs(), cfg.optim.steps, cfg.seed,
                   flow=cfg.flow)
    result.checkpoint["codec"] = cfg.codec
    persist.save_checkpoint(out / "checkpoint.bin", result.checkpoint)
    np.savetxt(out / "loss_history.txt", result.loss_history)
    click.echo(json.dumps({
        "checkpoint": str(out / "checkpoint.bin"),
        "steps": len(result.loss_history),
        "final_loss": float(result.loss_history[-1]) if len(result.loss_history) else None,
        "aborted": result.aborted,
    }))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--prompt", type=str, default="")
@click.option("--count", type=int, default=1)
@click.option("--out", "out_dir", type=click.Path(), default="samples")
@_solver_options
@cli_errors
def sample(checkpoint, seed, prompt, count, out_dir, solver, steps, atol, rtol):
    """Generate image(s) from seeded noise."""
    rt = _runtime(checkpoint)
    spec = solver_from_params(solver, steps, atol, rtol) if solver else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(count):
        image, _, elapsed = rt.sample(seed=seed + i, prompt=prompt, solver=spec)
        path = out / f"sample_{seed + i}.png"
        persist.save_png(path, image)
        files.append({"file": str(path), "seed": seed + i, "seconds": round(elapsed, 3)})
    (out / "sample_config.json").write_text(json.dumps({
        "checkpoint": checkpoint, "prompt": prompt, "seed": seed, "count": count,
        "solver": (spec or rt.flow_config.generate_solver).to_dict(),
    }, indent=2, sort_keys=True))
    click.echo(json.dumps(files))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--prompt", type=str, default="")
@click.option("--out", "out_path", type=click.Path(), default="inverted.bin")
@_solver_options
@cli_errors
def invert(checkpoint, image_path, prompt, out_path, solver, steps, atol, rtol):
    """Invert an image to latent noise; writes the noise and a trajectory summary."""
    rt = _runtime(checkpoint)
    image = persist.load_png(image_path)
    spec = solver_from_params(solver, steps, atol, rtol, direction=ode.INVERT) if solver else None
    x0, traj = rt.invert(image, prompt=prompt, solver=spec)
    persist.save_container(out_path, "noise", {"source_image": str(image_path), "prompt": prompt},
                           {"noise": x0})
    summary = {
        "accepted_steps": traj.accepted_count(),
        "rejected_steps": traj.rejected_count(),
        "first_t": traj.times[0],
        "last_t": traj.times[-1],
    }
    Path(str(out_path) + ".trajectory.json").write_text(json.dumps(summary, indent=2))
    click.echo(json.dumps({"noise": str(out_path), **summary}))


@main.command("collect-directions")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--attribute", "attributes", required=True, multiple=True,
              help="Attribute name, repeatable.")
@click.option("--pos-filter", "pos_filters", required=True, multiple=True)
@click.option("--neg-filter", "neg_filters", required=True, multiple=True)
@click.option("--grid", "grid_n", type=int, default=100)
@click.option("--per-side", type=int, default=128, help="Images per side.")
@click.option("--dataset-n", type=int, default=4096)
@click.option("--dataset-seed", type=int, default=100)
@click.option("--out", "out_path", type=click.Path(), default="directions.bin")
@cli_errors
def collect_directions(checkpoint, attributes, pos_filters, neg_filters, grid_n,
                       per_side, dataset_n, dataset_seed, out_path):
    """Build a direction bank from filtered dataset images (one filter pair per attribute)."""
    if not (len(attributes) == len(pos_filters) == len(neg_filters)):
        raise ValidationError("--attribute, --pos-filter, --neg-filter must repeat together")
    rt = _runtime(checkpoint)
    samples = gen_shapes(dataset_n, seed=dataset_seed)
    vocab = rt.vocab
    banks = []
    for attr, pf, nf in zip(attributes, pos_filters, neg_filters):
        pos = [s for s in samples if _parse_filter(pf)(s)][:per_side]
        neg = [s for s in samples if _parse_filter(nf)(s)][:per_side]
        if not pos or not neg:
            raise ValidationError(f"filters matched {len(pos)} positive / {len(neg)} negative samples")
        pos_imgs, pos_toks = dataset_arrays(pos, vocab, rt.prompt_length)
        neg_imgs, neg_toks = dataset_arrays(neg, vocab, rt.prompt_length)
        banks.append(build_direction_bank(rt.model, pos_imgs, neg_imgs, pos_toks, neg_toks,
                                          attr, grid_n))
    bank = merge_banks(banks)
    persist.save_bank(out_path, bank)
    click.echo(json.dumps({"bank": str(out_path), "attributes": bank.attributes,
                           "grid_n": bank.grid_n}))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--bank", required=True, type=click.Path())
@click.option("--noise", "noise_path", type=click.Path(), default=None)
@click.option("--image", "image_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--prompt", type=str, default="")
@click.option("--attr", "attrs", multiple=True, help="name=weight, repeatable.")
@click.option("--t-edit", type=float, default=0.5)
@click.option("--out", "out_path", type=click.Path(), default="edited.png")
@_solver_options
@cli_errors
def edit(checkpoint, bank, noise_path, image_path, seed, prompt, attrs, t_edit, out_path,
         solver, steps, atol, rtol):
    """Apply semantic direction edits during generation."""
    rt = _runtime(checkpoint, bank)
    spec = solver_from_params(solver, steps, atol, rtol) if solver else None
    noise = None
    if noise_path:
        _, _, tensors = persist.load_container(noise_path, expect_kind="noise")
        noise = tensors["noise"]
    elif image_path:
        noise, _ = rt.invert(persist.load_png(image_path), prompt=prompt)
    elif seed is None:
        raise ValidationError("edit needs --noise, --image, or --seed")
    outcome = rt.edit(seed=seed, noise=noise, prompt=prompt, attributes=_parse_attr(attrs),
                      t_edit=t_edit, solver=spec)
    persist.save_png(out_path, outcome.edited)
    click.echo(json.dumps({"edited": str(out_path),
                           "relative_edit_error": outcome.relative_error}))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--prompt", required=True, type=str)
@click.option("--target", required=True, type=str, help="Word whose attention is rescaled.")
@click.option("--scale", required=True, type=float)
@click.option("--t-edit", type=float, default=0.5)
@click.option("--out", "out_path", type=click.Path(), default="reweighted.png")
@_solver_options
@cli_errors
def reweight(checkpoint, seed, prompt, target, scale, t_edit, out_path, solver, steps, atol, rtol):
    """Rescale attention on a prompt token during generation."""
    rt = _runtime(checkpoint)
    spec = solver_from_params(solver, steps, atol, rtol) if solver else None
    image, _, _ = rt.sample(seed=seed, prompt=prompt, solver=spec,
                            reweights=((target, scale),), t_edit=t_edit)
    persist.save_png(out_path, image)
    click.echo(json.dumps({"image": str(out_path), "target": target, "scale": scale}))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--grid-time", type=float, default=0.5)
@click.option("--components", type=int, default=4)
@click.option("--samples", "n_samples", type=int, default=256)
@click.option("--dataset-n", type=int, default=1024)
@click.option("--dataset-seed", type=int, default=100)
@click.option("--grid", "grid_n", type=int, default=100)
@click.option("--out", "out_path", type=click.Path(), default="pca.bin")
@cli_errors
def pca(checkpoint, grid_time, components, n_samples, dataset_n, dataset_seed, grid_n, out_path):
    """PCA over u-space latents of inverted dataset images at one grid time."""
    from .editing import collect_u_trajectories

    rt = _runtime(checkpoint)
    samples = gen_shapes(dataset_n, seed=dataset_seed)[:n_samples]
    images, tokens = dataset_arrays(samples, rt.vocab, rt.prompt_length)
    trajectories = collect_u_trajectories(rt.model, images, tokens, grid_n)
    j = int(round(grid_time * grid_n))
    at_time = np.stack([traj[j][1] for traj in trajectories])
    comps, variance = pca_directions(at_time, components)
    persist.save_container(out_path, "pca", {
        "grid_time": grid_time, "components": int(comps.shape[0]),
        "latent_shape": list(rt.latent_shape),
    }, {"components": comps, "explained_variance": variance})
    click.echo(json.dumps({"pca": str(out_path),
                           "explained_variance": [float(v) for v in variance]}))


@main.command("attn-maps")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--prompt", required=True, type=str)
@click.option("--block", type=int, required=True)
@click.option("--step", type=int, required=True)
@click.option("--n-steps", type=int, default=100)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), default="attention")
@cli_errors
def attn_maps(checkpoint, prompt, block, step, n_steps, seed, out_dir):
    """Per-prompt-token attention heatmaps at one block and sampling step."""
    rt = _runtime(checkpoint)
    maps = rt.attention_maps(prompt, block, step, seed, n_steps)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in maps:
        path = out / f"block{block}_step{step}_tok{m['position']}_{m['word']}.png"
        persist.save_png(path, m["heatmap"])
        entries.append({"file": str(path), "word": m["word"], "position": m["position"]})
    click.echo(json.dumps(entries))


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--bank", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default="eval_report.json")
@click.option("--quick/--full", default=True,
              help="Quick uses fewer seeds/images than the acceptance suite.")
@cli_errors
def eval_cmd(checkpoint, bank, out_path, quick):
    """Acceptance-style metric report for a trained run."""
    from .evaluation import evaluate_checkpoint

    report = evaluate_checkpoint(checkpoint, bank, quick=quick)
    Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    click.echo(json.dumps(report))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--bank", type=click.Path(), default=None)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8174)
@cli_errors
def serve(checkpoint, bank, host, port):
    """Run the HTTP editing API."""
    import uvicorn

    from .service import create_app

    app = create_app(_runtime(checkpoint, bank))
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
