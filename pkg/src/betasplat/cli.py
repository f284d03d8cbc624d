"""Command-line surface.

Subcommands: train, render, eval, compress, decompress, validate-kernel,
densify-report, make-toy, bench.  Configuration is a flat ``key=value``
text file whose keys are the :class:`~betasplat.training.TrainConfig`
fields; ``--set key=value`` overrides individual entries.  Exit codes:
0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import backend, compression, kernel, mcmc, sceneio, toy, training
from .rasterizer import render_masked, render_reference, render_tiled

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class ConfigError(ValueError):
    pass


def _config_fields():
    return {f.name: f.type for f in fields(training.TrainConfig)}


def _coerce(name, value):
    kinds = _config_fields()
    if name not in kinds:
        valid = ", ".join(sorted(kinds))
        raise ConfigError(f"unknown config key {name!r}; valid keys: {valid}")
    kind = kinds[name]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {value!r}") from None


def load_config(path=None, overrides=()):
    """Build a TrainConfig from an optional key=value file plus overrides."""
    values = {}
    if path:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, val = (part.strip() for part in line.split("=", 1))
                values[key] = _coerce(key, val)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, val = (part.strip() for part in item.split("=", 1))
        values[key] = _coerce(key, val)
    try:
        return training.TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _apply_threads(args):
    threads = getattr(args, "threads", None)
    if threads:
        os.environ["BETASPLAT_THREADS"] = str(threads)


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: BETASPLAT_THREADS or cpu count up to 8)")


def _write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["step", "loss", "l1", "ssim_term", "mean_opacity",
                        "count", "psnr"],
        )
        writer.writeheader()
        writer.writerows(rows)


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    rng = np.random.default_rng(args.seed)
    dataset = sceneio.load_transforms(
        args.dataset, cfg.background_rgb(), cfg.holdout
    )
    os.makedirs(args.out, exist_ok=True)

    def progress(row):
        if row["psnr"] != "":
            print(
                f"step {row['step']:>6}  loss {row['loss']:.4f}  "
                f"psnr {row['psnr']:.2f}  primitives {row['count']}"
            )

    snap_view = (dataset.test_indices() or dataset.train_indices())[0]

    def on_eval(step, prims):
        out = render_tiled(prims, dataset.cameras[snap_view], cfg.background_rgb())
        sceneio.write_display_png(
            os.path.join(args.out, f"val_step{step:06d}.png"),
            np.clip(out.color, 0.0, 1.0),
        )

    result = training.train(dataset, cfg, rng, progress=progress, on_eval=on_eval)
    ckpt = os.path.join(args.out, "checkpoint.ply")
    sceneio.save_checkpoint(ckpt, result.primitives)
    _write_metrics_csv(os.path.join(args.out, "metrics.csv"), result.metrics)
    if result.diverged:
        print(
            f"error: training diverged at step {result.steps_run}: "
            f"{result.abort_reason}",
            file=sys.stderr,
        )
        return RUNTIME_ERROR
    print(f"trained {result.steps_run} steps -> {ckpt}")
    print(f"best validation psnr {result.best_psnr:.2f} at step {result.best_step}")
    return 0


def _shape_predicate(args, shapes):
    if args.b_split == "mean":
        thresh = float(shapes.mean())
        return (lambda b: b < thresh) if args.b_side == "below" else (lambda b: b >= thresh)
    if args.b_below is not None:
        return lambda b: b < args.b_below
    if args.b_above is not None:
        return lambda b: b >= args.b_above
    return None


def cmd_render(args):
    prims = sceneio.load_checkpoint(args.checkpoint)
    dataset = sceneio.load_transforms(args.cameras, holdout=0)
    background = np.ones(3) if args.background == "white" else np.zeros(3)
    os.makedirs(args.out, exist_ok=True)
    views = range(len(dataset.cameras)) if args.view is None else [args.view]
    for i in views:
        if not 0 <= i < len(dataset.cameras):
            print(f"error: no camera {i} (have {len(dataset.cameras)})", file=sys.stderr)
            return RUNTIME_ERROR
        cam = dataset.cameras[i]
        predicate = _shape_predicate(args, prims.shapes)
        if predicate is not None:
            out = render_masked(prims, cam, background, predicate)
        elif args.diffuse_only or args.specular_only:
            mode = "diffuse" if args.diffuse_only else "specular"
            shaded = _decomposed_colors(prims, cam, mode)
            out = render_tiled(shaded, cam, background)
        else:
            out = render_tiled(prims, cam, background)
        path = os.path.join(args.out, f"render_{i:04d}.png")
        sceneio.write_display_png(path, np.clip(out.color, 0.0, 1.0))
        print(path)
    return 0


def _decomposed_colors(prims, camera, mode):
    """Bake the diffuse or specular part into lobe-free primitives."""
    from .appearance import sb_eval_many

    baked = prims.copy()
    if mode == "diffuse":
        baked.lobe_colors = np.zeros_like(baked.lobe_colors)
        return baked
    view = prims.positions - camera.center
    view /= np.linalg.norm(view, axis=-1, keepdims=True)
    full, _ = sb_eval_many(prims.base_colors, prims.lobe_axes, prims.lobe_colors, view)
    baked.base_colors = full - prims.base_colors  # lobe sum only
    baked.lobe_colors = np.zeros_like(baked.lobe_colors)
    return baked


def cmd_eval(args):
    prims = sceneio.load_checkpoint(args.checkpoint)
    dataset = sceneio.load_transforms(args.dataset, holdout=args.holdout)
    background = np.ones(3) if args.background == "white" else np.zeros(3)
    rows = []
    for i in dataset.test_indices() or range(len(dataset.cameras)):
        out = render_tiled(prims, dataset.cameras[i], background)
        rendered = np.clip(out.color, 0.0, 1.0)
        target = np.clip(dataset.images[i], 0.0, 1.0)
        p = training.psnr(rendered, target)
        s, _ = training.ssim(rendered, target)
        rows.append({"view": dataset.names[i], "psnr": p, "ssim": s})
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["view", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow({"view": "mean", "psnr": mean_psnr, "ssim": mean_ssim})
    print(f"{'view':<28} {'psnr':>8} {'ssim':>7}")
    for r in rows:
        print(f"{r['view']:<28} {r['psnr']:>8.3f} {r['ssim']:>7.4f}")
    print(f"{'mean':<28} {mean_psnr:>8.3f} {mean_ssim:>7.4f}")
    return 0


def cmd_compress(args):
    prims = sceneio.load_checkpoint(args.checkpoint)
    t0 = time.perf_counter()
    compression.pack(prims, args.out, sort=not args.no_sort)
    elapsed = time.perf_counter() - t0
    raw = os.path.getsize(args.checkpoint)
    packed = compression.archive_size(args.out)
    print(f"raw checkpoint:  {raw} bytes")
    print(f"archive:         {packed} bytes")
    print(f"ratio:           {raw / packed:.2f}x")
    print(f"wall time:       {elapsed:.2f} s")
    return 0


def cmd_decompress(args):
    try:
        prims = compression.unpack(args.archive)
    except compression.ArchiveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    sceneio.save_checkpoint(args.out, prims)
    print(f"{len(prims)} primitives -> {args.out}")
    return 0


def _parse_profile(spec):
    if spec.startswith("beta:b="):
        return kernel.beta_profile(float(spec[len("beta:b="):]))
    if os.path.exists(spec):
        rows = np.loadtxt(spec, delimiter=",", ndmin=2)
        return kernel.RadialProfile(rows[:, 0], rows[:, 1])
    raise ValueError(f"profile spec {spec!r}: expected beta:b=<v> or a CSV path")


def cmd_validate_kernel(args):
    try:
        profile = _parse_profile(args.profile)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    report = kernel.validate_kernel_conditions(profile)
    print(report.to_text())
    if args.machine:
        for key, value in report.to_dict().items():
            print(f"{key}={value}")
    if report.passed:
        k3 = kernel.inverse_abel(profile, validate=False)
        back = kernel.forward_abel(k3, profile.radii)
        err = float(np.max(np.abs(back - profile.values)))
        print(f"abel round trip Linf: {err:.3e} ({'PASS' if err <= 1e-3 else 'FAIL'})")
    return 0 if report.passed else RUNTIME_ERROR


def cmd_densify_report(args):
    shapes = [float(v) for v in args.shapes.split(",")]
    opacities = [float(v) for v in args.opacities.split(",")]
    copies = [int(v) for v in args.copies.split(",")]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape", "opacity", "copies", "max_deviation"])
        for b in shapes:
            for o in opacities:
                for n in copies:
                    writer.writerow([b, o, n, mcmc.preservation_error(b, o, n)])
    print(args.out)
    return 0


def cmd_make_toy(args):
    toy.make_toy(
        args.out,
        preset=args.preset,
        seed=args.seed,
        views=args.views,
        size=args.size,
        count=args.count,
    )
    print(f"{args.preset} dataset with {args.views} views -> {args.out}")
    return 0


def cmd_bench(args):
    _apply_threads(args)
    prims = sceneio.load_checkpoint(args.checkpoint)
    dataset = sceneio.load_transforms(args.cameras, holdout=0)
    cam = dataset.cameras[args.view]
    background = np.ones(3)
    rows = []
    for name in backend.available_backends():
        core = backend.get_core(name)
        for path, fn in (
            ("reference", render_reference),
            ("tiled", render_tiled),
        ):
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                fn(prims, cam, background, core=core)
                times.append(time.perf_counter() - t0)
            times.sort()
            rows.append(
                {
                    "backend": name,
                    "path": path,
                    "median_ms": 1e3 * times[len(times) // 2],
                    "p95_ms": 1e3 * times[min(len(times) - 1, int(0.95 * len(times)))],
                }
            )
    print(f"{'backend':<10} {'path':<10} {'median_ms':>10} {'p95_ms':>10}")
    for r in rows:
        print(
            f"{r['backend']:<10} {r['path']:<10} {r['median_ms']:>10.2f} "
            f"{r['p95_ms']:>10.2f}"
        )
    if len(prims) >= 10_000 and backend.HAVE_COMPILED:
        compiled = {r["path"]: r["median_ms"] for r in rows if r["backend"] == "compiled"}
        if compiled["tiled"] > compiled["reference"]:
            print("error: tiled path slower than reference at this scale", file=sys.stderr)
            return RUNTIME_ERROR
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="betasplat",
        description="Radiance-field splatting with bounded deformable kernels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a scene against a dataset")
    p.add_argument("dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render checkpoint views to PNG")
    p.add_argument("checkpoint")
    p.add_argument("cameras", help="dataset dir or transforms json with the cameras")
    p.add_argument("--out", required=True)
    p.add_argument("--view", type=int, default=None)
    p.add_argument("--background", choices=["white", "black"], default="white")
    p.add_argument("--diffuse-only", action="store_true")
    p.add_argument("--specular-only", action="store_true")
    p.add_argument("--b-below", type=float, default=None,
                   help="render only primitives with shape below the threshold")
    p.add_argument("--b-above", type=float, default=None)
    p.add_argument("--b-split", choices=["mean"], default=None,
                   help="threshold at the mean shape value")
    p.add_argument("--b-side", choices=["below", "above"], default="below")
    _add_common(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM table on the test split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", type=int, default=8)
    p.add_argument("--background", choices=["white", "black"], default="white")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compress", help="pack a checkpoint into a PNG archive")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--no-sort", action="store_true",
                   help="skip the Morton reordering")
    _add_common(p)
    p.set_defaults(fn=cmd_compress)

    p = sub.add_parser("decompress", help="unpack an archive into a checkpoint")
    p.add_argument("archive")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_decompress)

    p = sub.add_parser("validate-kernel", help="check 2D kernel validity conditions")
    p.add_argument("profile", help="beta:b=<value> or a CSV of radius,value rows")
    p.add_argument("--machine", action="store_true",
                   help="also print key=value pairs")
    _add_common(p)
    p.set_defaults(fn=cmd_validate_kernel)

    p = sub.add_parser("densify-report",
                       help="CSV sweep of the densification preservation error")
    p.add_argument("--shapes", default="-2,0,2")
    p.add_argument("--opacities", default="0.2,0.1,0.05,0.01")
    p.add_argument("--copies", default="2,4,8")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_densify_report)

    p = sub.add_parser("make-toy", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=list(toy.PRESETS), default="spheres")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--count", type=int, default=200)
    _add_common(p)
    p.set_defaults(fn=cmd_make_toy)

    p = sub.add_parser("bench", help="frame-time comparison of render paths")
    p.add_argument("checkpoint")
    p.add_argument("cameras")
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    _add_common(p)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, 0 on --help
        return exc.code
    _apply_threads(args)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (sceneio.DatasetError, sceneio.CheckpointError, compression.ArchiveError,
            mcmc.AllDeadError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
