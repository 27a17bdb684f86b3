"""``dfshield`` command line.

    dfshield pretrain  --out runs/a
    dfshield synth     --config run.json --mode fixed --Q 0
    dfshield train     --config run.json
    dfshield attack    --config run.json --eps inf
    dfshield toy2d     --out runs/toy
    dfshield sweep     --param tau --values 0,0.25,0.5,0.75,1.0

Exit codes: 0 ok, 2 configuration error, 3 I/O or file-format error,
4 numerical divergence.
"""
import argparse
import math
import os
import sys
from dataclasses import replace

from . import pipelines
from .attack import AttackError
from .config import ConfigError, load_config, override, require
from .container import ContainerError
from .data import DatasetError, load_dataset, save_dataset
from .evaluation import accuracy_clean, loss_surface
from .model import ModelError, load_model, save_model
from .synth import SynthesisError, sidecar
from .train import TrainingError

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 2, 3, 4

PARAM_ALIASES = {"tau": "tau", "B": "aggregate_batches", "aggregate_batches": "aggregate_batches"}


def _eps(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid eps {text!r}") from None
    if not (value > 0 or math.isinf(value)):
        raise argparse.ArgumentTypeError("eps must be > 0 or inf")
    return value


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid value list {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="dfshield", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--threads", type=int, help="worker cap (overrides config)")
    common.add_argument("--out", help="output directory (overrides paths.out)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="train the teacher on real data")
    p = sub.add_parser("synth", parents=[common], help="synthesize a surrogate dataset")
    p.add_argument("--mode", choices=("dss", "fixed"))
    p.add_argument("--Q", type=int, dest="iterations", help="optimisation steps per batch")
    sub.add_parser("train", parents=[common], help="robust student training")
    for name in ("attack", "eval"):
        p = sub.add_parser(name, parents=[common],
                           help="PGD robustness curve" if name == "attack"
                           else "clean and robust accuracy")
        p.add_argument("--eps", type=_eps, help="attack budget, 'inf' allowed")
    sub.add_parser("diversity", parents=[common], help="recall/coverage/NDB/JSD")
    sub.add_parser("surface", parents=[common], help="2-D loss surface grid")
    sub.add_parser("toy2d", parents=[common], help="full 2-D experiment")
    p = sub.add_parser("sweep", parents=[common], help="tau / B sensitivity sweep")
    p.add_argument("--param", action="append", choices=sorted(PARAM_ALIASES))
    p.add_argument("--values", action="append", type=_floats)
    return parser


def _config(args):
    if args.command == "toy2d" and args.config is None:
        cfg = pipelines.toy2d_config()
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = replace(cfg, threads=args.threads)
    if args.out is not None:
        cfg = override(cfg, "paths", out=args.out)
    return cfg


def _out(cfg, name):
    os.makedirs(cfg.paths.out, exist_ok=True)
    return os.path.join(cfg.paths.out, name)


def cmd_pretrain(cfg, args):
    if cfg.paths.dataset:
        train_ds = load_dataset(cfg.paths.dataset)
        test_ds = None
    else:
        real = pipelines.real_dataset(cfg)
        save_dataset(_out(cfg, "real.dfsd"), real)
        train_ds, test_ds = pipelines.split(cfg, real)
        save_dataset(_out(cfg, "real_train.dfsd"), train_ds)
        save_dataset(_out(cfg, "real_test.dfsd"), test_ds)
    teacher, history = pipelines.pretrain(cfg, train_ds)
    path = cfg.paths.teacher or _out(cfg, "teacher.dfsc")
    save_model(path, teacher)
    pipelines.write_json(_out(cfg, "pretrain_history.json"), history)
    acc = accuracy_clean(teacher, test_ds if test_ds is not None else train_ds)
    return f"pretrain: teacher -> {path} ({'test' if test_ds is not None else 'train'} " \
           f"accuracy {acc:.4f})"


def cmd_synth(cfg, args):
    cfg = override(cfg, "synth", mode=args.mode, iterations=args.iterations)
    teacher = load_model(require(cfg, "paths.teacher"))
    value_range = (None, None)
    if cfg.data.kind == "patterns8x8":
        value_range = (0.0, 1.0)
    ds, batches = pipelines.synthesize(cfg, teacher, value_range)
    path = cfg.paths.synthetic or _out(cfg, f"synthetic_{cfg.synth.mode}.dfsd")
    save_dataset(path, ds)
    pipelines.write_text(os.path.splitext(path)[0] + ".json", sidecar(cfg.synth, batches))
    return f"synth: {len(ds)} samples ({cfg.synth.mode}, Q={cfg.synth.iterations}) -> {path}"


def cmd_train(cfg, args):
    teacher = load_model(require(cfg, "paths.teacher"))
    synthetic = load_dataset(require(cfg, "paths.synthetic"))
    log_path = _out(cfg, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    student, log = pipelines.train(cfg, teacher, synthetic, log_path)
    path = cfg.paths.student or _out(cfg, "student.dfsc")
    save_model(path, student)
    last = log[-1] if log else {}
    return f"train: student -> {path} (epochs {len(log)}, last loss {last.get('loss', float('nan')):.4f})"


def _eval_inputs(cfg, args):
    if getattr(args, "eps", None) is not None:
        cfg = override(cfg, "attack", eps=args.eps)
    model = load_model(require(cfg, "paths.model"))
    ds = load_dataset(require(cfg, "paths.dataset"))
    return cfg, model, ds


def cmd_attack(cfg, args):
    cfg, model, ds = _eval_inputs(cfg, args)
    report = pipelines.curve(cfg, model, ds)
    path = _out(cfg, "robustness.json")
    pipelines.write_text(path, report.to_json())
    worst = min(e["accuracy"] for e in report.entries)
    return f"attack: clean {report.clean_accuracy:.4f}, worst robust {worst:.4f} -> {path}"


def cmd_eval(cfg, args):
    cfg, model, ds = _eval_inputs(cfg, args)
    result = {"clean_accuracy": accuracy_clean(model, ds),
              "robust_accuracy": pipelines.robust(cfg, model, ds),
              "eps": "inf" if math.isinf(cfg.attack.eps) else cfg.attack.eps,
              "norm": cfg.attack.norm, "iterations": cfg.attack.iterations,
              "n_samples": len(ds)}
    path = _out(cfg, "eval.json")
    pipelines.write_json(path, result)
    return f"eval: clean {result['clean_accuracy']:.4f}, robust {result['robust_accuracy']:.4f} -> {path}"


def cmd_diversity(cfg, args):
    real = load_dataset(require(cfg, "paths.dataset"))
    fake = load_dataset(require(cfg, "paths.synthetic"))
    teacher = None
    if cfg.eval.features == "penultimate":
        teacher = load_model(require(cfg, "paths.teacher"))
    report = pipelines.diversity(cfg, real, fake, teacher)
    path = _out(cfg, "diversity.json")
    pipelines.write_text(path, report.to_json())
    return f"diversity: recall {report.recall:.4f}, coverage {report.coverage:.4f}, " \
           f"NDB {report.ndb}/{report.bins}, JSD {report.jsd:.4f} -> {path}"


def cmd_surface(cfg, args):
    model = load_model(require(cfg, "paths.model"))
    ds = load_dataset(require(cfg, "paths.dataset"))
    n = min(len(ds), cfg.eval.surface_samples)
    grid = loss_surface(model, ds.x[:n], ds.y[:n], "ce", cfg.eval.surface_resolution,
                        cfg.eval.surface_radius, pipelines.stage_rng(cfg, "surface"))
    path = _out(cfg, "surface.csv")
    pipelines.write_text(path, grid.to_csv())
    with open(_out(cfg, "surface.ppm"), "wb") as fh:
        fh.write(grid.to_ppm())
    return f"surface: {grid.resolution}x{grid.resolution} grid, center loss {grid.center():.6f} -> {path}"


def cmd_toy2d(cfg, args):
    s = pipelines.toy2d(cfg, cfg.paths.out)
    return (f"toy2d: coverage fixed {s['coverage_fixed']:.4f} / dss {s['coverage_dss']:.4f}, "
            f"teacher robust {s['teacher_robust']:.4f}, student robust {s['student_robust']:.4f}"
            f" -> {cfg.paths.out}")


def cmd_sweep(cfg, args):
    params, values = args.param or [], args.values or []
    if len(params) != len(values):
        raise ConfigError("each --param needs a matching --values list")
    if params:
        grid = {PARAM_ALIASES[p]: v for p, v in zip(params, values)}
    else:
        grid = {"tau": list(cfg.sweep.tau), "aggregate_batches": list(cfg.sweep.aggregate_batches)}
    for v in grid.get("aggregate_batches", []):
        if v != int(v) or v < 1:
            raise ConfigError(f"B values must be positive integers, got {v}")
    teacher = load_model(cfg.paths.teacher) if cfg.paths.teacher else None
    synthetic = load_dataset(cfg.paths.synthetic) if cfg.paths.synthetic else None
    path = _out(cfg, "sweep.csv")
    try:
        rows = pipelines.sweep(cfg, grid, path, teacher, synthetic)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return f"sweep: {len(rows)} cells -> {path}"


COMMANDS = {
    "pretrain": cmd_pretrain, "synth": cmd_synth, "train": cmd_train, "attack": cmd_attack,
    "eval": cmd_eval, "diversity": cmd_diversity, "surface": cmd_surface, "toy2d": cmd_toy2d,
    "sweep": cmd_sweep,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        summary = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, SynthesisError, AttackError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ContainerError, DatasetError, ModelError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
