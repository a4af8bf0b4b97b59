"""Command-line entry point: ``cdcgen <subcommand> ...``.

Run directories live under ``$CDCGEN_OUTPUT_ROOT`` (default ``./runs``) as
``<root>/<run name>/``; every subcommand writes only inside its output
directory and refuses to replace existing files without ``--overwrite``.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from cdcgen import __version__
from cdcgen import eval as ev
from cdcgen.audit import format_results, run_audit
from cdcgen.condsynth import synthesize
from cdcgen.config import ConfigError, RunConfig, default_config, dump_config, load_config
from cdcgen.data import (LabelAccessError, read_points_csv, read_idx, write_idx, write_labels_csv,
                         write_points_csv)
from cdcgen.diffmath import Tensor, no_grad
from cdcgen.flow import quantize, translate
from cdcgen.pipeline import build_data, evaluate, run_alignment, run_conditional
from cdcgen.plotting import image_grid, metrics_figure, points_figure, projection_figure
from cdcgen.trainer import (CheckpointError, TrainingDiverged, load_checkpoint, read_metrics, restore_alignment,
                            restore_conditional)
from cdcgen.trainer.loops import COND_COMPONENTS

ENV_ROOT = "CDCGEN_OUTPUT_ROOT"


class CommandError(RuntimeError):
    pass


def output_root():
    return Path(os.environ.get(ENV_ROOT, "runs"))


def _claim(directory, names, overwrite):
    """Create ``directory`` and make sure none of ``names`` would be clobbered."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    taken = [n for n in names if (directory / n).exists()]
    if taken and not overwrite:
        raise CommandError(f"{directory}: {', '.join(taken)} already exist; pass --overwrite to replace")
    return directory


def _load_run_config(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    if getattr(args, "preset", None):
        return default_config(args.preset)
    raise CommandError("pass --config <file> or --preset <name>")


def _run_dir(cfg):
    root = Path(cfg.output_dir) if cfg.output_dir else output_root()
    return root / cfg.name


def _config_from_ckpt(ckpt):
    if "run" not in ckpt.config:
        raise CommandError("checkpoint carries no run config")
    return RunConfig.from_dict(ckpt.config["run"])


def _load_ckpt(path):
    path = Path(path)
    if not path.exists():
        raise CommandError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _write_samples(out_dir, stem, samples, labels=None):
    samples = np.asarray(samples)
    if samples.ndim == 4:
        pixels = quantize(samples)
        write_idx(out_dir / f"{stem}.idx", pixels[:, 0])
        image_grid(pixels[:50], out_dir / f"{stem}.png")
        return [f"{stem}.idx", f"{stem}.png"]
    write_points_csv(out_dir / f"{stem}.csv", samples, labels)
    points_figure([(stem, samples, labels)], out_dir / f"{stem}.png")
    return [f"{stem}.csv", f"{stem}.png"]


# --- subcommands ---------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _load_run_config(args)
    data = build_data(cfg)
    out = Path(args.out) if args.out else _run_dir(cfg) / "data"
    if data.source.is_image:
        names = ["source_images.idx", "source_labels.idx", "target_images.idx", "eval/target_labels.idx",
                 "domains.png"]
        out = _claim(out, names, args.overwrite)
        (out / "eval").mkdir(exist_ok=True)
        write_idx(out / "source_images.idx", data.source.samples[:, 0].astype(np.uint8))
        write_idx(out / "source_labels.idx", data.source.labels.astype(np.uint8))
        write_idx(out / "target_images.idx", data.target.samples[:, 0].astype(np.uint8))
        write_idx(out / "eval/target_labels.idx", data.sidecar.reveal("eval").astype(np.uint8))
        image_grid(np.concatenate([data.source.samples[:20], data.target.samples[:20]]), out / "domains.png")
    else:
        names = ["source.csv", "target.csv", "eval/target_labels.csv", "domains.png"]
        out = _claim(out, names, args.overwrite)
        (out / "eval").mkdir(exist_ok=True)
        write_points_csv(out / "source.csv", data.source.samples, data.source.labels)
        write_points_csv(out / "target.csv", data.target.samples)
        write_labels_csv(out / "eval/target_labels.csv", data.sidecar.reveal("eval"))
        points_figure([("source", data.source.samples, data.source.labels),
                       ("target (unlabeled)", data.target.samples, None)], out / "domains.png")
    print(f"wrote {out}")


def _log_printer(components):
    def on_log(step, losses, _):
        print(f"step {step:6d}  " + "  ".join(f"{c}={losses[c]:.4f}" for c in components), flush=True)
    return on_log


def cmd_train_align(args):
    cfg = _load_run_config(args)
    if args.steps is not None:
        cfg.align.steps = args.steps
    run = _claim(_run_dir(cfg), ["config.ini", "align"], args.overwrite)
    data = build_data(cfg)
    dump_config(cfg, run / "config.ini")
    out = run / "align"
    out.mkdir(exist_ok=True)
    run_alignment(cfg, data, out, on_log=None if args.quiet else _log_printer(("nll_s", "nll_t", "flow_total")))
    metrics_figure(read_metrics(out / "metrics.csv"), ("nll_s", "nll_t", "gen_s2t", "gen_t2s"), out / "metrics.png")
    print(f"wrote {out / 'align.ckpt'}")


def _reject_labeled_target(path):
    if path is None:
        return
    path = Path(path)
    if not path.exists():
        raise CommandError(f"target data not found: {path}")
    if path.suffix == ".csv":
        _, labels = read_points_csv(path)
        if labels is not None:
            raise LabelAccessError(f"{path}: target data carries a class column; conditional training "
                                   "must not see target labels")


def cmd_train_cond(args):
    align = _load_ckpt(args.from_)
    if align.phase != "align":
        raise CommandError(f"{args.from_}: expected an alignment checkpoint, got phase {align.phase!r}")
    _reject_labeled_target(args.target)
    cfg = load_config(args.config) if args.config else _config_from_ckpt(align)
    if args.steps is not None:
        cfg.cond.steps = args.steps
    out = _claim(Path(args.from_).resolve().parent.parent / "cond", ["cond.ckpt", "cond_metrics.csv"],
                 args.overwrite)
    data = build_data(cfg)
    run_conditional(cfg, data, align, out,
                    on_log=None if args.quiet else _log_printer(("critic_total", "encoder_total")))
    metrics_figure(read_metrics(out / "cond_metrics.csv"), COND_COMPONENTS[:2] + COND_COMPONENTS[3:5],
                   out / "cond_metrics.png")
    print(f"wrote {out / 'cond.ckpt'}")


def _read_input(path, flow):
    path = Path(path)
    if not path.exists():
        raise CommandError(f"input not found: {path}")
    if path.suffix == ".csv":
        x, labels = read_points_csv(path)
        return x, labels
    x = read_idx(path).astype(np.float64)
    if x.ndim == 3:
        x = x[:, None]
    return ev._flow_input(flow, x), None


def cmd_translate(args):
    ckpt = _load_ckpt(args.from_)
    models = restore_alignment(ckpt)
    src, dst = (models.flow_s, models.flow_t) if args.direction == "s2t" else (models.flow_t, models.flow_s)
    x, labels = _read_input(args.in_, src)
    out = _claim(args.out, [f"translated_{args.direction}.csv", f"translated_{args.direction}.idx"], args.overwrite)
    with no_grad():
        y = translate(src, dst, Tensor(x)).data
    names = _write_samples(out, f"translated_{args.direction}", y, labels)
    print("wrote " + ", ".join(str(out / n) for n in names))


def cmd_synthesize(args):
    ckpt = _load_ckpt(args.from_)
    if ckpt.phase != "cond":
        raise CommandError(f"{args.from_}: synthesis needs a conditional checkpoint, got phase {ckpt.phase!r}")
    models, cond = restore_conditional(ckpt)
    if not 0 <= args.class_ < cond.encoder.n_classes:
        raise CommandError(f"class {args.class_} outside [0, {cond.encoder.n_classes})")
    if args.n < 1:
        raise CommandError("--n must be positive")
    stem = f"class{args.class_}_n{args.n}_seed{args.seed}"
    out = _claim(args.out, [f"{stem}.csv", f"{stem}.idx", f"{stem}.png"], args.overwrite)
    x = synthesize(cond.encoder, models.flow_t, args.class_, args.n, args.seed)
    names = _write_samples(out, stem, x, np.full(args.n, args.class_))
    print("wrote " + ", ".join(str(out / n) for n in names))


def cmd_eval(args):
    ckpt = _load_ckpt(args.from_)
    cfg = _config_from_ckpt(ckpt)
    out = Path(args.out) if args.out else Path(args.from_).resolve().parent.parent / f"eval_{args.suite}"
    out = _claim(out, ["report.csv", "summary.txt", "projection.csv", "projection.png"], args.overwrite)
    data = build_data(cfg)
    proj = out / "projection.csv" if args.suite in ("align", "all") else None
    report = evaluate(ckpt, data, args.suite, seed=args.seed, projection_path=proj)
    report.write_csv(out / "report.csv")
    (out / "summary.txt").write_text(report.summary())
    if proj is not None:
        rows = ev.read_projection(proj)
        projection_figure(np.array([[float(r["pc1"]), float(r["pc2"])] for r in rows]),
                          [int(r["class"]) for r in rows], [r["domain"] for r in rows], out / "projection.png")
    if args.suite in ("cond", "all"):
        k = data.n_classes
        models, cond = restore_conditional(ckpt)
        samples = [ev.to_data_space(synthesize(cond.encoder, models.flow_t, c, 10 if data.source.is_image else 200,
                                               args.seed + c)) for c in range(k)]
        if data.source.is_image:
            image_grid(np.concatenate(samples), out / "synthesized.png", ncol=10)
        else:
            points_figure([("synthesized", np.concatenate(samples),
                            np.repeat(np.arange(k), len(samples[0])))], out / "synthesized.png")
    print(report.summary(), end="")
    if not report.metrics.get("oracle_valid", 1.0):
        print("warning: oracle probe accuracy below 0.95; conditional accuracy is invalid", file=sys.stderr)


def cmd_grad_check(args):
    results = run_audit(args.seeds)
    text = format_results(results)
    print(text)
    if args.out:
        out = _claim(args.out, ["grad_check.txt"], args.overwrite)
        (out / "grad_check.txt").write_text(text + "\n")
    if not all(r.passed for r in results):
        raise CommandError("gradient audit failed")


# --- parser ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cdcgen", description="Flow-based domain translation and conditional synthesis.")
    p.add_argument("--version", action="version", version=f"cdcgen {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="INI run config")
        g.add_argument("--preset", choices=["pinwheel", "digits"], help="built-in run config")

    sp = sub.add_parser("gen-data", help="write a synthetic domain pair and the eval label sidecar")
    config_args(sp)
    sp.add_argument("--out", help="output directory (default <run dir>/data)")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-align", help="Phase 1: train both flows and their opponents")
    config_args(sp)
    sp.add_argument("--steps", type=int, help="override [align] steps")
    sp.add_argument("--overwrite", action="store_true")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train_align)

    sp = sub.add_parser("train-cond", help="Phase 2: train the condition encoder on frozen flows")
    sp.add_argument("--config", help="INI run config (default: the one stored in the checkpoint)")
    sp.add_argument("--from", dest="from_", required=True, help="alignment checkpoint")
    sp.add_argument("--target", help="optional target data file; must not carry labels")
    sp.add_argument("--steps", type=int, help="override [cond] steps")
    sp.add_argument("--overwrite", action="store_true")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train_cond)

    sp = sub.add_parser("translate", help="map samples between domains")
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--direction", choices=["s2t", "t2s"], required=True)
    sp.add_argument("--in", dest="in_", required=True, help="points CSV or IDX images")
    sp.add_argument("--out", required=True)
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("synthesize", help="conditional target-domain samples")
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--class", dest="class_", type=int, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("eval", help="evaluation report for a checkpoint")
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--suite", choices=["align", "cond", "all"], default="all")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="output directory (default <run dir>/eval_<suite>)")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grad-check", help="finite-difference audit of all primitives and losses")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--out")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CommandError, ConfigError, CheckpointError, LabelAccessError, TrainingDiverged, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"cdcgen {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
