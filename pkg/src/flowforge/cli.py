"""Command-line entry points: train, eval, infer, viz, gradcheck, gen-data,
init-config."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import gradcheck as gc
from .checkpoint import CheckpointError
from .config import RunConfig, default_config, smoke_config
from .data import SceneConfig, gen_batch, read_flo, render_flow_png, render_mask_png, write_flo
from .losses import aepe as aepe_metric
from .model import ModelConfig
from .tensor import Tensor
from .train import evaluate, load_model, make_eval_set, predict_pair, train_run

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@click.group()
def main():
    """Occlusion-aware optical flow: train, evaluate, and run the networks."""


def _load_run_config(config, seed):
    cfg = RunConfig.load(config) if config else smoke_config()
    if seed is not None:
        cfg.seed = seed
    return cfg


@main.command()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Run-config JSON; defaults to the smoke profile.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(file_okay=False), default="runs/train",
              show_default=True)
@click.option("--checkpoint", "stage1", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Stage-1 checkpoint (required for stage-2 configs).")
def train(config, seed, out, stage1):
    """Train a model and write checkpoints plus a metrics log."""
    cfg = _load_run_config(config, seed)
    if stage1:
        cfg.stage1_checkpoint = stage1
    try:
        result = train_run(cfg, out, log=click.echo)
    except (ValueError, CheckpointError) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"checkpoint: {result.checkpoint}")
    click.echo(f"metrics: {result.metrics_log}")
    ev = result.final_eval
    click.echo(f"eval aepe={ev['aepe']:.4f} fl_all={ev['fl_all']:.3f}% "
               f"zero_flow_aepe={ev['zero_flow_aepe']:.4f}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Run config supplying the dataset; defaults to the smoke profile.")
@click.option("--seed", type=int, default=None, help="Override the eval stream seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Directory for eval.json (optional).")
def eval_cmd(checkpoint, config, seed, out):
    """Report AEPE / Fl-all on a held-out synthetic set, with the zero-flow
    baseline for scale."""
    cfg = _load_run_config(config, None)
    if seed is not None:
        cfg.dataset.eval_seed = seed
    try:
        model, model_cfg = load_model(checkpoint)
    except CheckpointError as exc:
        raise click.ClickException(str(exc))
    if config is not None and model_cfg.to_dict() != cfg.model.to_dict():
        raise click.ClickException(
            "checkpoint architecture disagrees with --config model section; "
            "refusing to evaluate"
        )
    metrics = evaluate(model, cfg.dataset)
    line = (f"aepe={metrics['aepe']:.6g} fl_all={metrics['fl_all']:.6g} "
            f"zero_flow_aepe={metrics['zero_flow_aepe']:.6g} samples={metrics['samples']}")
    click.echo(line)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


@main.command()
@click.argument("image1", type=click.Path(exists=True, dir_okay=False))
@click.argument("image2", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default="flow", show_default=True,
              help="Output prefix for .flo / .png / _mask.png.")
def infer(image1, image2, checkpoint, out):
    """Estimate flow for an image pair; writes flow.flo, a color-coded PNG,
    and the visibility mask PNG (white = visible)."""
    try:
        model, _ = load_model(checkpoint)
    except CheckpointError as exc:
        raise click.ClickException(str(exc))
    try:
        a = np.asarray(Image.open(image1).convert("RGB"), dtype=np.float32) / 255.0
        b = np.asarray(Image.open(image2).convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise click.ClickException(f"cannot read images: {exc}")
    if a.shape != b.shape:
        raise click.ClickException(f"image sizes differ: {a.shape[:2]} vs {b.shape[:2]}")
    flow, mask = predict_pair(model, a, b)
    flow_t = Tensor(flow)
    write_flo(flow_t, f"{out}.flo")
    render_flow_png(flow_t, f"{out}.png")
    outputs = [f"{out}.flo", f"{out}.png"]
    if mask is not None:
        render_mask_png(Tensor(mask), f"{out}_mask.png")
        outputs.append(f"{out}_mask.png")
    click.echo("wrote " + ", ".join(outputs))


@main.command()
@click.argument("flo", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Output PNG path (default: <flo>.png).")
def viz(flo, out):
    """Render a .flo file with the flow color wheel."""
    flow = read_flo(flo)
    target = out or f"{flo}.png"
    render_flow_png(flow, target)
    click.echo(f"wrote {target}")


@main.command("gradcheck")
@click.argument("op", required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tolerance", type=float, default=1e-3, show_default=True)
def gradcheck_cmd(op, seed, tolerance):
    """Finite-difference check of one op ('list' to enumerate)."""
    if op == "list":
        click.echo("\n".join(gc.registered_ops()))
        return
    try:
        report = gc.run_check(op, seed=seed)
    except KeyError as exc:
        raise click.ClickException(str(exc.args[0]))
    for name, err in sorted(report.per_input.items()):
        click.echo(f"  d/d{name}: max rel err {err:.3e}")
    ok = report.passed(tolerance)
    click.echo(f"{op}: max rel err {report.max_rel_err:.3e} -> {'PASS' if ok else 'FAIL'}")
    if not ok:
        sys.exit(1)


@main.command("gen-data")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Run config supplying the scene; defaults to the smoke profile.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--count", type=int, default=8, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def gen_data(config, seed, count, out):
    """Write synthetic samples: images, .flo flow, occlusion and valid PNGs."""
    cfg = _load_run_config(config, None)
    scene = cfg.dataset.scene
    outp = Path(out)
    outp.mkdir(parents=True, exist_ok=True)
    samples = gen_batch(seed, 0, count, scene)
    for i, s in enumerate(samples):
        stem = outp / f"{i:05d}"
        for tag, img in (("img1", s.image1), ("img2", s.image2)):
            arr = (img.data[0].transpose(1, 2, 0) * 255).round().astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(f"{stem}_{tag}.png")
        write_flo(s.flow, f"{stem}_flow.flo")
        render_flow_png(s.flow, f"{stem}_flow.png")
        render_mask_png(s.occlusion, f"{stem}_occ.png")
        render_mask_png(s.valid, f"{stem}_valid.png")
    (outp / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {count} samples to {out}")


@main.command("init-config")
@click.option("--profile", type=click.Choice(["smoke", "default"]), default="smoke",
              show_default=True)
@click.option("--stage", type=int, default=1, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def init_config(profile, stage, out):
    """Write a fully populated run-config JSON."""
    cfg = smoke_config(stage=stage) if profile == "smoke" else default_config(stage=stage)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
