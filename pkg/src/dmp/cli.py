"""Command-line interface: ``dmp match | synth | eval | bench``.

Exit codes: 0 success, 1 input error (bad files, arguments or configuration),
2 internal error.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from .config import RunConfig, load_config
from .engine import DMPModel, load_pretrained, optimize_pair, save_weights
from .errors import ConfigurationError, FormatError, InputError
from .formats import (
    read_flo,
    read_image,
    read_mask,
    validate_report,
    write_flo,
    write_image,
    write_json,
)
from .metrics import MetricReport, evaluate
from .optim import OptimSchedule
from .transforms import random_transform, synth_pair, textured_image, warp_image
from .viz import flow_to_color

log = logging.getLogger("dmp")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2

SUITES = {
    # the synthetic homography suite used for acceptance
    "homography-small": dict(size=96, kind="homography", magnitude=10.0, iters=500),
}


def resolve_seed(seed: int | None) -> int:
    """``DMP_SEED`` in the environment overrides ``--seed``."""
    env = os.environ.get("DMP_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as exc:
            raise click.BadParameter(f"DMP_SEED={env!r} is not an integer") from exc
    return 0 if seed is None else seed


def seeded(cfg: RunConfig, seed: int) -> RunConfig:
    """Apply the run seed to the trainable init, the sampler and the augmentation stream."""
    return RunConfig(
        backbone=cfg.backbone,
        matcher=dataclasses.replace(cfg.matcher, seed=seed),
        loss=dataclasses.replace(cfg.loss, rng_seed=seed),
        schedule=cfg.schedule,
        augment=dataclasses.replace(cfg.augment, seed=seed),
    )


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def cli(verbose):
    """Test-time dense matching of one image pair."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--src", "src_path", required=True, type=click.Path(dir_okay=False))
@click.option("--tgt", "tgt_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Output .flo file.")
@click.option("--viz", default=None, help="Comma-separated warped-source and colour-coded flow PNGs.")
@click.option("--iters", type=int, default=None, help="Iterations (default from config or schedule).")
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--weights", "weights_path", type=click.Path(dir_okay=False), default=None,
              help="Start from DMPW weights (300 iterations at lr 1e-5 unless overridden).")
@click.option("--save-weights", "save_path", type=click.Path(dir_okay=False), default=None)
@click.option("--admp", is_flag=True, help="Add a randomly warped target each iteration.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None)
@click.option("--patience", type=int, default=None, help="Stop after this many iterations without improvement.")
def match(src_path, tgt_path, out_path, viz, iters, seed, config_path, weights_path, save_path, admp, trace_path,
          patience):
    """Estimate the flow that warps SRC onto TGT."""
    cfg = load_config(config_path) if config_path else RunConfig()
    cfg = seeded(cfg, resolve_seed(seed))
    src, tgt = read_image(src_path), read_image(tgt_path)
    if src.shape != tgt.shape:
        raise InputError(f"source {src.shape[:2]} and target {tgt.shape[:2]} sizes differ")

    model = DMPModel(cfg.backbone, cfg.matcher)
    schedule = cfg.schedule
    if weights_path:
        load_pretrained(weights_path, model)
        if not (config_path and "schedule" in json.loads(Path(config_path).read_text())):
            schedule = OptimSchedule.pretrained(snapshot_every=schedule.snapshot_every)
    overrides = {}
    if iters is not None:
        overrides["max_iters"] = iters
    if patience is not None:
        overrides["patience"] = patience
    if overrides:
        schedule = dataclasses.replace(schedule, **overrides)

    flow, trace = optimize_pair(src, tgt, loss=cfg.loss, schedule=schedule, model=model,
                                augment=cfg.augment if admp else None)
    write_flo(out_path, flow)
    if save_path:
        save_weights(save_path, model)
    if trace_path:
        write_json(trace_path, trace.to_dict())
    if viz:
        paths = [p for p in viz.split(",") if p]
        if paths:
            warped, _ = warp_image(src, flow.uv)
            write_image(paths[0], warped)
        if len(paths) > 1:
            write_image(paths[1], flow_to_color(flow))
    done = [x for x in trace.losses if x is not None]
    click.echo(f"{trace.iterations} iterations, final loss {done[-1] if done else float('nan'):.4f}, wrote {out_path}")


@cli.command()
@click.option("--image", "image_path", required=True, type=click.Path(dir_okay=False))
@click.option("--kind", type=click.Choice(["homography", "affine", "tps", "mixed"]), default="homography")
@click.option("--magnitude", type=float, default=10.0)
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", "out_dir", required=True, type=click.Path(file_okay=False))
def synth(image_path, kind, magnitude, seed, out_dir):
    """Render a synthetic pair with analytic ground-truth flow."""
    rng = np.random.default_rng(resolve_seed(seed))
    image = read_image(image_path)
    h, w = image.shape[:2]
    for _ in range(100):
        spec = random_transform(kind, magnitude, rng, (h, w))
        try:
            src, tgt, gt = synth_pair(image, spec)
            break
        except InputError:
            continue
    else:
        raise InputError("could not draw a transform keeping 50% of the target valid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "source.png", src)
    write_image(out / "target.png", tgt)
    write_image(out / "mask.png", gt.mask.astype(np.uint8) * 255)
    write_flo(out / "gt.flo", gt)
    write_json(out / "transform.json", spec.to_dict())
    click.echo(f"wrote source.png, target.png, mask.png, gt.flo, transform.json to {out}")


@cli.command("eval")
@click.option("--est", "est_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gt", "gt_path", required=True, type=click.Path(dir_okay=False))
@click.option("--mask", "mask_path", type=click.Path(dir_okay=False), default=None)
@click.option("--pck", "pck_specs", default="5px", help="Comma-separated thresholds, e.g. 5px,0.05a.")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
def eval_cmd(est_path, gt_path, mask_path, pck_specs, report_path):
    """AEE and PCK of an estimated flow against ground truth."""
    est, gt = read_flo(est_path), read_flo(gt_path)
    mask = read_mask(mask_path) if mask_path else None
    specs = [s.strip() for s in pck_specs.split(",") if s.strip()]
    report = evaluate(est, gt, mask, specs)
    report.config = {"est": str(est_path), "gt": str(gt_path), "mask": mask_path, "pck": specs}
    out = report.to_dict()
    validate_report(out)
    write_json(report_path, out)
    click.echo(f"aee {report.aee:.4f} " + " ".join(f"pck@{k} {v:.2f}" for k, v in report.pck.items()))


def run_suite(name: str, seeds: int, iters: int | None = None, progress=None) -> dict:
    """Optimise each seed's synthetic pair and summarise AEE at iteration 0 and at the end."""
    suite = SUITES[name]
    iters = suite["iters"] if iters is None else iters
    size = suite["size"]
    per_seed, errors = [], []
    for seed in range(seeds):
        image = textured_image((size, size), seed)
        spec = random_transform(suite["kind"], suite["magnitude"], np.random.default_rng(seed), (size, size))
        src, tgt, gt = synth_pair(image, spec)
        schedule = OptimSchedule(max_iters=iters, snapshot_every=max(1, iters // 20))
        flow, trace = optimize_pair(src, tgt, schedule=schedule, gt_flow=gt)
        first = trace.snapshots[0][1] if trace.snapshots else trace.final_aee
        err = np.hypot(*(flow.uv - gt.uv))[gt.mask]
        errors.append(err)
        per_seed.append({"seed": seed, "aee_initial": first, "aee_final": trace.final_aee,
                         "ratio": trace.final_aee / first if first else None,
                         "snapshots": [{"iteration": i, "aee": a} for i, a in trace.snapshots],
                         "losses": trace.to_dict()["losses"], "seconds": trace.wall_clock[-1] if trace.wall_clock else 0.0})
        if progress:
            progress(per_seed[-1])
    allerr = np.concatenate(errors)
    report = MetricReport(
        aee=float(allerr.mean()),
        pck={"5px": float(100.0 * np.count_nonzero(allerr < 5.0) / allerr.size)},
        valid_pixel_count=int(allerr.size),
        config={"suite": name, "seeds": seeds, "iterations": iters, **{k: v for k, v in suite.items() if k != "iters"},
                "halved": sum(1 for s in per_seed if s["ratio"] is not None and s["ratio"] <= 0.5)},
        curves={"per_seed": per_seed},
    )
    return report.to_dict()


@cli.command()
@click.option("--suite", type=click.Choice(sorted(SUITES)), default="homography-small")
@click.option("--seeds", type=int, default=10)
@click.option("--iters", type=int, default=None)
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
def bench(suite, seeds, iters, report_path):
    """Run a synthetic benchmark suite."""
    def progress(s):
        click.echo(f"seed {s['seed']}: aee {s['aee_initial']:.3f} -> {s['aee_final']:.3f} ({s['seconds']:.1f}s)")

    report = run_suite(suite, seeds, iters, progress)
    validate_report(report)
    write_json(report_path, report)
    click.echo(f"{report['config']['halved']}/{seeds} seeds halved their AEE; pooled aee {report['aee']:.3f}")


def main(argv=None) -> int:
    """Entry point with the documented exit codes."""
    try:
        cli.main(args=argv, prog_name="dmp", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INPUT
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except (InputError, FormatError, ConfigurationError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
