"""Command-line interface.

Subcommands: ``synth``, ``density``, ``train``, ``eval``, ``predict``, ``ablate``
and ``rerun``.  Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
abort.  Outputs default to ``$AMDCN_OUTPUT_ROOT/<command>`` (or
``./amdcn-out/<command>``).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from amdcn import __version__, kernels
from amdcn._jit import HAS_NUMBA, get_num_threads, set_num_threads
from amdcn.model import GAMMA, CheckpointError, default_config, forward, load_checkpoint, save_params
from amdcn.patchwork import PRESETS, get_preset, normalize
from amdcn.supervision import REGIMES, make_density
from amdcn.synthdata import SceneSpec, generate, load_image, read_dataset, save_image, spec_dict, write_dataset
from amdcn.tensor import Tensor
from amdcn.train import (
    AblationGrid,
    NumericalError,
    TrainPlan,
    ablate,
    evaluate,
    mean_baseline_mae,
    plot_ablation,
    train,
    write_ablation_table,
)

log = logging.getLogger("amdcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "AMDCN_OUTPUT_ROOT"
CHECKPOINT_NAME = "checkpoint.amdcn"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _counts(text):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX, got {text!r}") from None
    if lo < 0 or lo > hi:
        raise argparse.ArgumentTypeError(f"count range must satisfy 0 <= MIN <= MAX, got {text!r}")
    return lo, hi


def _columns(text):
    v = int(text)
    if not 1 <= v <= 5:
        raise argparse.ArgumentTypeError(f"columns must be in 1..5, got {v}")
    return v


def _on_off(text):
    if text.lower() in ("on", "true", "yes", "1"):
        return True
    if text.lower() in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def _default_out(command):
    return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "amdcn-out"), command)


def _prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} exists and is not empty (use --force)")
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _manifest(args, **extra):
    m = {
        "tool": "amdcn",
        "tool_version": __version__,
        "command": args.command,
        # --force is a property of the invocation, not of the result
        "argv": [a for a in args._argv if a != "--force"],
        "backend": kernels.get_backend(),
        "threads": get_num_threads(),
        "deterministic": bool(getattr(args, "deterministic", False)),
    }
    m.update(extra)
    return m


def _synthetic_set(args, seed, n):
    spec = SceneSpec(
        image_size=args.size, count_range=args.counts, r_min=args.r_min, r_max=args.r_max,
        noise_level=args.noise, seed=seed,
    )
    return generate(spec, n), spec


def _load_or_synthesize(args, path, seed, n):
    if path:
        return read_dataset(path), {"path": os.path.abspath(path)}
    if args.preset != "synthetic":
        raise UsageError(f"preset {args.preset!r} needs a dataset directory")
    records, spec = _synthetic_set(args, seed, n)
    return records, {"synthetic": spec_dict(spec), "images": n}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    out = _prepare_out(args.out or _default_out("synth"), args.force)
    records, spec = _synthetic_set(args, args.seed, args.images)
    write_dataset(out, records, _manifest(args, scene=spec_dict(spec), images=args.images, output=out))
    print(f"wrote {len(records)} images to {out}")
    return EXIT_OK


def cmd_density(args):
    out = _prepare_out(args.out or _default_out("density"), args.force)
    records = read_dataset(args.data)
    os.makedirs(os.path.join(out, "maps"), exist_ok=True)
    for k, rec in enumerate(records):
        dmap = make_density(rec.annotations, args.regime, args.sigma, rec.perspective)
        np.save(os.path.join(out, "maps", f"{k:04d}.npy"), dmap)
        peak = dmap.max()
        save_image(os.path.join(out, "maps", f"{k:04d}.png"), dmap / peak if peak > 0 else dmap)
    _write_json(
        os.path.join(out, "manifest.json"),
        _manifest(args, regime=args.regime, sigma=args.sigma, inputs={"data": os.path.abspath(args.data)}),
    )
    print(f"wrote {len(records)} density maps to {out}")
    return EXIT_OK


def _plan_from_args(args):
    return TrainPlan(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
        preset=args.preset, gamma=args.gamma, num_samples=args.samples,
        patch_size=args.patch, sigma=args.sigma, regime=args.regime,
        dtype="float64" if args.deterministic else args.dtype,
    )


def _check_regime(preset, records):
    if preset.regime == "worldexpo-perspective" and any(r.perspective is None for r in records):
        raise UsageError("worldexpo-perspective supervision needs a perspective map for every image")


def cmd_train(args):
    out = _prepare_out(args.out or _default_out("train"), args.force)
    plan = _plan_from_args(args)
    preset = plan.resolved_preset()
    records, inputs = _load_or_synthesize(args, args.data, args.synth_seed, args.synth_images)
    _check_regime(preset, records)
    config = default_config(args.columns, args.aggregator, records[0].image.shape[0], args.feature_maps)

    def progress(epoch, loss, _params):
        print(f"epoch {epoch + 1}/{plan.epochs} loss {loss:.6f}", flush=True)

    result = train(config, plan, records, callback=progress)
    meta = {
        "channel_means": result.channel_means.tolist(),
        "gamma": plan.gamma,
        "train_mean_count": result.train_mean_count,
        "preset": plan.preset,
    }
    ckpt = os.path.join(out, CHECKPOINT_NAME)
    save_params(result.params, ckpt, config, meta)
    report = {
        "fingerprint": config.fingerprint(),
        "plan": plan.to_dict(),
        "loss_history": result.history,
        "seconds": result.seconds,
        "num_params": config.num_params(),
    }
    _write_json(os.path.join(out, "report.json"), report)
    _write_json(
        os.path.join(out, "manifest.json"),
        _manifest(args, config=config.to_dict(), plan=plan.to_dict(), preset=plan.preset,
                  seeds={"plan": plan.seed, "synthetic_data": args.synth_seed}, inputs=inputs, gamma=plan.gamma),
    )
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _requested_config(args, channels):
    if args.columns is None and args.aggregator is None and args.feature_maps is None:
        return None
    if args.columns is None or args.aggregator is None:
        raise UsageError("--columns and --aggregator must be given together")
    return default_config(args.columns, args.aggregator, channels, args.feature_maps or 32)


def cmd_eval(args):
    out = _prepare_out(args.out or _default_out("eval"), args.force)
    records, inputs = _load_or_synthesize(args, args.data, args.synth_seed, args.synth_images)
    ckpt = load_checkpoint(args.checkpoint, _requested_config(args, records[0].image.shape[0]))
    preset = get_preset(args.preset)
    if args.regime or args.sigma:
        from dataclasses import replace

        preset = replace(preset, regime=args.regime or preset.regime, sigma=args.sigma or preset.sigma)
    _check_regime(preset, records)
    meta = ckpt.metadata
    gamma = meta.get("gamma", GAMMA)
    report = evaluate(ckpt.params, ckpt.config, records, preset, np.asarray(meta.get("channel_means", [0.0])), gamma)
    _write_json(os.path.join(out, "report.json"), report)
    for k, v in report.items():
        print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    if "train_mean_count" in meta:
        print(f"baseline_mae: {mean_baseline_mae(meta['train_mean_count'], records):.4f}")
    _write_json(
        os.path.join(out, "manifest.json"),
        _manifest(args, config=ckpt.config.to_dict(), preset=preset.name,
                  inputs={**inputs, "checkpoint": os.path.abspath(args.checkpoint)}, gamma=gamma),
    )
    return EXIT_OK


def cmd_predict(args):
    ckpt = load_checkpoint(args.checkpoint)
    try:
        image = load_image(args.image)
    except (OSError, ValueError) as exc:
        raise FileNotFoundError(f"cannot read image {args.image}: {exc}") from None
    meta = ckpt.metadata
    gamma = meta.get("gamma", GAMMA)
    if image.shape[0] != ckpt.config.input_channels:
        raise ValueError(f"image has {image.shape[0]} channels, model expects {ckpt.config.input_channels}")
    x = normalize(image, meta.get("channel_means", [0.0] * image.shape[0]))
    out_map = forward(ckpt.params, ckpt.config, Tensor._wrap(np.ascontiguousarray(x[None]))).data[0, 0]
    count = max(0.0, float(out_map.sum()) / gamma)
    vis = np.clip(out_map, 0.0, None)
    peak = vis.max()
    out = args.out or os.path.join(_default_out("predict"), "density.png")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_image(out, vis / peak if peak > 0 else vis)
    _write_json(
        os.path.splitext(out)[0] + ".manifest.json",
        _manifest(args, count=count, inputs={"checkpoint": os.path.abspath(args.checkpoint), "image": os.path.abspath(args.image)}),
    )
    print(f"count: {count:.2f}")
    print(f"density map: {out}")
    return EXIT_OK


def cmd_ablate(args):
    out = _prepare_out(args.out or _default_out("ablate"), args.force)
    plan = _plan_from_args(args)
    train_set, train_inputs = _load_or_synthesize(args, args.data, args.synth_seed, args.synth_images)
    test_set, test_inputs = _load_or_synthesize(args, args.test_data, args.synth_seed + 1, args.synth_test_images)
    _check_regime(plan.resolved_preset(), train_set)
    grid = AblationGrid(tuple(args.column_counts), (True, False), plan, args.feature_maps)

    def progress(row):
        agg = "on" if row["aggregator"] else "off"
        print(f"columns={row['columns']} aggregator={agg} mae={row['mae']:.4f} ({row['seconds']:.1f}s)", flush=True)

    rows = ablate(grid, train_set, test_set, progress)
    write_ablation_table(rows, os.path.join(out, "ablation.csv"))
    plot_ablation(rows, os.path.join(out, "ablation.png"))
    _write_json(
        os.path.join(out, "manifest.json"),
        _manifest(args, plan=plan.to_dict(), feature_maps=args.feature_maps, columns=list(args.column_counts),
                  inputs={"train": train_inputs, "test": test_inputs},
                  seconds={f"{r['columns']}-{'on' if r['aggregator'] else 'off'}": r["seconds"] for r in rows}),
    )
    print(f"table: {os.path.join(out, 'ablation.csv')}")
    return EXIT_OK


def cmd_rerun(args):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    argv = list(manifest["argv"])
    if "--force" not in argv:
        argv.append("--force")
    return main(argv)


# ---------------------------------------------------------------------------
# parser


def _add_runtime(p):
    p.add_argument("--threads", type=int, default=None, help="cap numba worker threads")
    p.add_argument("--deterministic", action="store_true", help="single-threaded float64 mode")
    p.add_argument("--backend", choices=kernels.BACKENDS, default=None, help="convolution kernel backend")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_scene(p):
    p.add_argument("--size", type=_size, default=(64, 64), help="image size HxW")
    p.add_argument("--counts", type=_counts, default=(5, 20), help="objects per image MIN:MAX")
    p.add_argument("--r-min", type=float, default=1.5)
    p.add_argument("--r-max", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.03)


def _add_synthetic_source(p, images=200):
    _add_scene(p)
    p.add_argument("--synth-seed", type=int, default=1, help="seed of the on-the-fly synthetic dataset")
    p.add_argument("--synth-images", type=int, default=images)


def _add_plan(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="synthetic")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=_positive_float, default=GAMMA)
    p.add_argument("--samples", type=int, default=None, help="override the preset's number of training patches")
    p.add_argument("--patch", type=_size, default=None, help="override the preset's training patch size HxW")
    p.add_argument("--regime", choices=REGIMES, default=None, help="supervision regime")
    p.add_argument("--sigma", type=_positive_float, default=None, help="fixed Gaussian sigma")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--feature-maps", type=int, default=32)


def build_parser():
    parser = _Parser(prog="amdcn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"amdcn {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic counting dataset")
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_scene(p)
    _add_runtime(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("density", help="synthesize ground-truth density maps for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--regime", choices=REGIMES, default="fixed-sigma")
    p.add_argument("--sigma", type=_positive_float, default=15.0)
    p.add_argument("--out", default=None)
    _add_runtime(p)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", default=None, help="dataset directory (synthetic preset generates one if omitted)")
    p.add_argument("--columns", type=_columns, default=5)
    p.add_argument("--aggregator", type=_on_off, default=True)
    p.add_argument("--out", default=None)
    _add_plan(p)
    _add_synthetic_source(p)
    _add_runtime(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (MAE, GAME 0..3)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--preset", choices=sorted(PRESETS), default="synthetic")
    p.add_argument("--regime", choices=REGIMES, default=None)
    p.add_argument("--sigma", type=_positive_float, default=None)
    p.add_argument("--columns", type=_columns, default=None, help="expected config (checked against checkpoint)")
    p.add_argument("--aggregator", type=_on_off, default=None)
    p.add_argument("--feature-maps", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_scene(p)
    p.add_argument("--synth-seed", type=int, default=2)
    p.add_argument("--synth-images", type=int, default=50)
    _add_runtime(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="density map and count for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=None, help="output PNG path")
    _add_runtime(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="columns 1-5 x aggregator on/off ablation")
    p.add_argument("--data", default=None)
    p.add_argument("--test-data", default=None)
    p.add_argument("--column-counts", type=_columns, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--out", default=None)
    _add_plan(p)
    _add_synthetic_source(p)
    p.add_argument("--synth-test-images", type=int, default=50)
    _add_runtime(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return parser


def _configure_runtime(args):
    if getattr(args, "backend", None):
        kernels.set_backend(args.backend)
    threads = getattr(args, "threads", None)
    if getattr(args, "deterministic", False):
        threads = 1
    if threads is not None and HAS_NUMBA:
        import numba

        set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help/--version exit 0, parse errors exit EXIT_USAGE
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    args._argv = argv
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        _configure_runtime(args)
        return args.func(args)
    except UsageError as exc:
        print(f"amdcn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"amdcn: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"amdcn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
