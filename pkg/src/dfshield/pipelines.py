"""Staged runs shared by the CLI: pretrain -> synth -> train -> evaluate.

Every stage draws from ``Rng(seed).split(<stage name>)``, so a stage can be
rerun in isolation and still see the same random stream.
"""
import csv
import json
import os
from dataclasses import replace

import numpy as np

from . import evaluation
from .attack import attack_curve, robust_accuracy
from .config import RunConfig, dumps
from .data import make_gauss2d, make_patterns8x8, save_dataset, train_test_split
from .model import ModelSpec, checkpoint_digest, save_model, student_from
from .synth import generate_dataset, sidecar
from .tensorcore import Rng
from .train import pretrain_teacher, train_student


def stage_rng(cfg, stage):
    return Rng(cfg.seed).split(stage)


def real_dataset(cfg):
    d = cfg.data
    rng = stage_rng(cfg, "data")
    if d.kind == "gauss2d":
        return make_gauss2d(d.classes, d.per_class, d.spread, rng, radius=d.radius)
    return make_patterns8x8(d.classes, d.per_class, d.noise, rng)


def split(cfg, ds):
    return train_test_split(ds, cfg.data.test_stride)


def model_spec(cfg, ds):
    kw = {} if cfg.model.widths is None else {"widths": tuple(int(w) for w in cfg.model.widths)}
    return ModelSpec(cfg.model.kind, tuple(ds.x.shape[1:]), ds.num_classes, **kw)


def pretrain(cfg, train_ds):
    p = cfg.pretrain
    return pretrain_teacher(model_spec(cfg, train_ds), train_ds, p.epochs, p.lr,
                            stage_rng(cfg, "pretrain"), batch_size=p.batch_size,
                            momentum=p.momentum)


def synthesize(cfg, teacher, value_range, mode=None):
    """Synthetic dataset and per-batch records; ``mode`` overrides cfg.synth.mode."""
    scfg = cfg.synth if mode is None else replace(cfg.synth, mode=mode)
    # fixed and dss runs share the noise stream so they differ only in coefficients
    return generate_dataset(teacher, scfg, stage_rng(cfg, "synth"), value_range,
                            threads=cfg.threads)


def train(cfg, teacher, synthetic, log_path=None, train_cfg=None):
    return train_student(teacher, student_from(teacher), synthetic,
                         train_cfg if train_cfg is not None else cfg.train, cfg.attack,
                         stage_rng(cfg, "train"), log_path=log_path)


def robust(cfg, model, ds):
    return robust_accuracy(model, ds, cfg.attack.bounded_to(ds), stage_rng(cfg, "attack"))


def clean(model, ds):
    return evaluation.accuracy_clean(model, ds)


def curve(cfg, model, ds):
    e = cfg.eval
    return attack_curve(model, ds, cfg.attack, list(e.iterations), stage_rng(cfg, "attack"),
                        unbounded_iterations=e.unbounded_iterations or None)


def diversity(cfg, real, fake, teacher=None):
    e = cfg.eval
    use_model = e.features == "penultimate"
    fr = evaluation.diversity_features(teacher if use_model else None, real)
    ff = evaluation.diversity_features(teacher if use_model else None, fake)
    return evaluation.diversity_report(fr, ff, e.k, e.bins, e.significance,
                                       stage_rng(cfg, "diversity"))


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def write_scatter(path, ds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.x.reshape(len(ds), -1).shape[1])] + ["label"])
        for row, label in zip(ds.x.reshape(len(ds), -1), ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


# -- toy experiment ----------------------------------------------------------

def toy2d_config(seed=0):
    """Desk-scale settings for the 2-D experiment.

    Four overlapping clusters, 2000 real points and as many synthetic ones
    per mode; student training uses more epochs and a larger lr than the
    image defaults because it only sees 2000 samples.  Diversity metrics
    are computed on the raw inputs.
    """
    cfg = RunConfig(seed=seed)
    return replace(
        cfg,
        synth=replace(cfg.synth, batch_size=200, batches=10, iterations=1000),
        train=replace(cfg.train, lr=1e-3, epochs=20, batch_size=50, aggregate_batches=10),
        attack=replace(cfg.attack, eps=0.5, iterations=10),
        # the scatter experiment measures diversity of the raw 2-D points
        eval=replace(cfg.eval, features="input"),
    )


def toy2d(cfg, out):
    """Full 2-D pipeline; returns a summary dict and writes every artifact to ``out``."""
    os.makedirs(out, exist_ok=True)
    real = real_dataset(cfg)
    train_ds, test_ds = split(cfg, real)
    save_dataset(os.path.join(out, "real.dfsd"), real)
    teacher, history = pretrain(cfg, train_ds)
    save_model(os.path.join(out, "teacher.dfsc"), teacher)
    write_scatter(os.path.join(out, "scatter_real.csv"), real)

    synthetic, reports = {}, {}
    for mode in ("fixed", "dss"):
        ds, batches = synthesize(cfg, teacher, real.value_range, mode)
        synthetic[mode] = ds
        save_dataset(os.path.join(out, f"synthetic_{mode}.dfsd"), ds)
        write_text(os.path.join(out, f"synthetic_{mode}.json"),
                   sidecar(replace(cfg.synth, mode=mode), batches))
        write_scatter(os.path.join(out, f"scatter_{mode}.csv"), ds)
        reports[mode] = diversity(cfg, real, ds, teacher)
        write_text(os.path.join(out, f"diversity_{mode}.json"), reports[mode].to_json())

    log_path = os.path.join(out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    student, log = train(cfg, teacher, synthetic["dss"], log_path)
    save_model(os.path.join(out, "student.dfsc"), student)
    report = curve(cfg, student, test_ds)
    write_text(os.path.join(out, "robustness.json"), report.to_json())

    summary = {
        "teacher_clean": clean(teacher, test_ds),
        "teacher_robust": robust(cfg, teacher, test_ds),
        "student_clean": clean(student, test_ds),
        "student_robust": robust(cfg, student, test_ds),
        "coverage_fixed": reports["fixed"].coverage,
        "coverage_dss": reports["dss"].coverage,
        "jsd_fixed": reports["fixed"].jsd,
        "jsd_dss": reports["dss"].jsd,
        "teacher_digest": checkpoint_digest(teacher.spec, teacher.params, teacher.bn),
        "student_digest": checkpoint_digest(student.spec, student.params, student.bn),
        "pretrain_history": history,
        "train_log": log,
    }
    write_json(os.path.join(out, "summary.json"), summary)
    write_text(os.path.join(out, "config.json"), dumps(cfg))
    return summary


# -- sensitivity sweep -------------------------------------------------------

SWEEP_FIELDS = ("tau", "aggregate_batches", "clean_accuracy", "robust_accuracy",
                "mask_density", "student_digest")


def sweep(cfg, grid, out=None, teacher=None, synthetic=None):
    """Train one student per (tau, B) cell of ``grid`` and return the rows.

    ``grid`` maps ``tau`` and ``aggregate_batches`` to value lists; missing
    keys fall back to the single value in ``cfg.train``.  Each cell reuses the
    same training stream, so cells differ only in the swept settings.
    """
    real = real_dataset(cfg)
    train_ds, test_ds = split(cfg, real)
    if teacher is None:
        teacher, _ = pretrain(cfg, train_ds)
    if synthetic is None:
        synthetic, _ = synthesize(cfg, teacher, real.value_range)
    taus = grid.get("tau", [cfg.train.tau])
    bs = grid.get("aggregate_batches", [cfg.train.aggregate_batches])
    rows = []
    for b in bs:
        for tau in taus:
            tcfg = replace(cfg.train, tau=float(tau), aggregate_batches=int(b))
            student, log = train(cfg, teacher, synthetic, train_cfg=tcfg)
            rows.append({
                "tau": float(tau), "aggregate_batches": int(b),
                "clean_accuracy": clean(student, test_ds),
                "robust_accuracy": robust(cfg, student, test_ds),
                "mask_density": log[-1]["mask_density"] if log else 1.0,
                "student_digest": checkpoint_digest(student.spec, student.params, student.bn),
            })
    if out is not None:
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows
