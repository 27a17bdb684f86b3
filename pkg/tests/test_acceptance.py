"""Acceptance gate: one PASS/FAIL line per criterion, printed even under capture.

Each test computes its criterion, prints the verdict with the measured
numbers, then asserts it.  Thresholds are the published tolerances; nothing
here is tuned to make a criterion pass.
"""
import csv
import hashlib
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import random_model, rel_err
from dfshield import cli, pipelines
from dfshield import evaluation as ev
from dfshield.attack import AttackConfig, pgd
from dfshield.config import dumps, load_config
from dfshield.data import Dataset, dataset_bytes, load_dataset, loads_dataset, save_dataset
from dfshield.model import (Model, checkpoint_bytes, checkpoint_digest, forward, load_model,
                            loads_checkpoint)
from dfshield.synth import loss_class, loss_feature, loss_prior
from dfshield.tensorcore import Rng, Tape, Tensor, backward, numerical_gradient
from dfshield.train import TrainConfig, refine_gradients, training_loss


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- 1. gradient fidelity ------------------------------------------------------

SYNTH_LOSSES = ("L_class", "L_feature", "L_prior")
# A narrow stencil: at h = 1e-5 one of the 240 draws straddles a ReLU kink.
# Rounding error at 1e-6 is still ~1e-10 relative for O(1) losses.
FD_STEP = 1e-6
TRAIN_LOSSES = {"L_DFShield": "dfshield", "STD": "std", "TRADES": "trades"}


def _random_arch(kind, rng):
    if kind == "mlp-bn":
        widths = tuple(int(w) for w in rng.integers(3, 6, size=3))
        shape = (int(rng.integers(2, 4)),)
    else:
        widths = tuple(int(w) for w in rng.integers(2, 4, size=2))
        shape = (int(rng.integers(1, 3)), 4, 4)
    classes = int(rng.integers(2, 5))
    return random_model(kind, int(rng.integers(1 << 30)), shape, classes, widths)


def _synth_check(m, name, rng):
    n = int(rng.integers(3, 6))
    x = rng.normal(size=(n,) + m.spec.input_shape)
    y = rng.integers(0, m.spec.num_classes, size=n)
    stat = str(rng.choice(["variance", "stddev"]))

    def loss(xt):
        logits, stats = forward(m.spec, m.params, m.bn, xt, capture_stats=True)
        if name == "L_class":
            return loss_class(logits, y)
        if name == "L_feature":
            return loss_feature(stats, m.bn, stat)
        return loss_prior(xt)

    with Tape():
        xt = Tensor(x, requires_grad=True)
        (g,) = backward(loss(xt), [xt])
    fd = numerical_gradient(lambda a: loss(Tensor(a)).item(), x, FD_STEP)
    return rel_err(g, fd)


def _train_check(m, name, rng):
    n = int(rng.integers(3, 6))
    x = rng.normal(size=(n,) + m.spec.input_shape)
    x_adv = x + rng.uniform(-0.3, 0.3, size=x.shape)
    y = rng.integers(0, m.spec.num_classes, size=n)
    t_clean = rng.normal(size=(n, m.spec.num_classes))
    cfg = TrainConfig(loss=TRAIN_LOSSES[name], lambda1=float(rng.uniform(0, 2)),
                      lambda2=float(rng.uniform(0, 2)), trades_beta=float(rng.uniform(0, 8)),
                      detach_reference=False)
    keys = list(m.params)

    def loss(leaves):
        # train-mode clean pass without touching running statistics
        s_clean, _ = forward(m.spec, leaves, m.bn, x, train=True, update_stats=False)
        s_adv, _ = forward(m.spec, leaves, m.bn, x_adv)
        return training_loss(cfg, s_clean, s_adv, t_clean, y)

    with Tape():
        leaves = {k: Tensor(v, requires_grad=True) for k, v in m.params.items()}
        g = backward(loss(leaves), leaves)
    flat = np.concatenate([np.ravel(m.params[k]) for k in keys])
    sizes = np.cumsum([m.params[k].size for k in keys])[:-1]

    def as_params(vec):
        return {k: Tensor(p.reshape(m.params[k].shape))
                for k, p in zip(keys, np.split(vec, sizes))}

    fd = numerical_gradient(lambda v: loss(as_params(v)).item(), flat, FD_STEP)
    return rel_err(np.concatenate([np.ravel(g[k]) for k in keys]), fd)


def test_criterion_1_gradient_fidelity(capsys):
    start = time.perf_counter()
    configs = 20
    worst, count = {}, 0
    for kind in ("mlp-bn", "conv-tiny"):
        for name in SYNTH_LOSSES + tuple(TRAIN_LOSSES):
            rng = np.random.default_rng([1, len(kind), len(name)])
            errs = []
            for _ in range(configs):
                m = _random_arch(kind, rng)
                bn_before = checkpoint_bytes(m.spec, m.params, m.bn)
                check = _synth_check if name in SYNTH_LOSSES else _train_check
                errs.append(check(m, name, rng))
                assert checkpoint_bytes(m.spec, m.params, m.bn) == bn_before
            worst[(kind, name)] = max(errs)
            count += len(errs)
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top < 1e-6 and elapsed < 60
    detail = (f"{count} checks ({configs} per architecture x loss), max rel err {top:.2e} "
              f"(< 1e-6), {elapsed:.1f}s (< 60s)")
    verdict(capsys, 1, ok, detail)


# -- 2. GradRefine -------------------------------------------------------------

def test_criterion_2_grad_refine(capsys):
    start = time.perf_counter()
    examples = []
    # A = (1 + 1 - 1 + 1) / 4 = 0.5 >= tau: sum of agreeing components 0.2 + 0.1 + 0.5
    g, _ = refine_gradients([{"w": np.array([v])} for v in (0.2, 0.1, -0.3, 0.5)], 0.5)
    examples.append(g["w"][0] == pytest.approx(0.8, abs=1e-15))
    g, a = refine_gradients([{"w": np.array([v])} for v in (1.0, -1.0)], 0.5)
    examples.append(g["w"][0] == 0.0 and a.mask["w"][0] == 0.0)
    single = {"w": np.array([0.3, -2.0, 0.0]), "b": np.array([[1e-9]])}
    g, _ = refine_gradients([single], 0.5)
    examples.append(all(np.array_equal(g[k], single[k]) for k in single))

    rng = np.random.default_rng(2)
    tuples = 10_000
    violations = 0
    for _ in range(tuples):
        b, d = int(rng.integers(1, 11)), int(rng.integers(1, 9))
        stack = rng.normal(size=(b, d)) * rng.choice([1e-8, 1.0, 1e3], size=(b, 1))
        stack[rng.random(size=stack.shape) < 0.1] = 0.0
        lo, hi = np.sort(rng.random(2))
        grads = [{"w": row} for row in stack]
        r_lo, a_lo = refine_gradients(grads, lo)
        _, a_hi = refine_gradients(grads, hi)
        r, s = r_lo["w"], a_lo.scores["w"]
        sign_ok = np.all((r == 0) | (np.sign(r) == np.sign(s)))
        mag_ok = np.all(np.abs(r) <= np.abs(stack).sum(axis=0))
        mono_ok = np.all(a_hi.mask["w"] <= a_lo.mask["w"])
        violations += not (sign_ok and mag_ok and mono_ok)
    elapsed = time.perf_counter() - start
    ok = all(examples) and violations == 0 and elapsed < 10
    verdict(capsys, 2, ok, f"worked examples {sum(examples)}/3, {tuples} random tuples with "
                           f"{violations} invariant violations, {elapsed:.1f}s (< 10s)")


# -- 3. PGD contract -----------------------------------------------------------

def _per_sample_ce(model, x, y):
    z = model.logits(x)
    z = z - z.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


def test_criterion_3_pgd_contract(capsys, gauss_teacher, gauss_data):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    instances, bad_budget, bad_range, worst_l2 = 0, 0, 0, -math.inf
    while instances < 10_000:
        m = random_model("mlp-bn", int(rng.integers(1 << 30)), (int(rng.integers(2, 6)),), 3,
                         (4, 4, 3))
        x = rng.normal(size=(100,) + m.spec.input_shape)
        bounded = bool(rng.integers(2))
        vr = (-1.0, 1.5) if bounded else (None, None)
        if bounded:
            x = np.clip(x, -1.0, 1.5)
        cfg = AttackConfig(norm=str(rng.choice(["linf", "l2"])),
                           eps=float(10 ** rng.uniform(-3, 0.5)),
                           iterations=int(rng.integers(1, 6)),
                           random_start=bool(rng.integers(2)),
                           loss=str(rng.choice(["ce", "kl_vs_clean"])), value_range=vr)
        out = pgd(m, x, rng.integers(0, 3, size=100), cfg, Rng(int(rng.integers(1 << 30))))
        d = (out - x).reshape(len(x), -1)
        if cfg.norm == "linf":
            bad_budget += int((np.abs(d).max(axis=1) > cfg.eps).sum())
        else:
            excess = np.linalg.norm(d, axis=1) - cfg.eps
            worst_l2 = max(worst_l2, float(excess.max()))
            bad_budget += int((excess > 1e-12).sum())
        if bounded:
            bad_range += int(((out < -1.0) | (out > 1.5)).reshape(len(x), -1).any(axis=1).sum())
        instances += len(x)

    flat = random_model("mlp-bn", 5, (3,), 3, (4, 4, 3))
    flat.params["out.weight"] = np.zeros_like(flat.params["out.weight"])
    xz = rng.normal(size=(20, 3))
    fixed = all(np.array_equal(pgd(flat, xz, np.zeros(20, dtype=int),
                                   AttackConfig(norm=norm, eps=0.5, random_start=False, loss=loss)),
                               xz)
                for norm in ("linf", "l2") for loss in ("ce", "kl_vs_clean"))

    # the correctly classified test point closest to a decision boundary
    _, _, test = gauss_data
    z = np.sort(gauss_teacher.logits(test.x), axis=1)
    margin = np.where(gauss_teacher.predict(test.x) == test.y, z[:, -1] - z[:, -2], np.inf)
    i = int(np.argmin(margin))
    x0, y0 = test.x[i:i + 1], test.y[i:i + 1]
    eps = 0.5
    cfg = AttackConfig(eps=eps, iterations=10)
    achieved = float(_per_sample_ce(gauss_teacher, pgd(gauss_teacher, x0, y0, cfg, Rng(0)), y0)[0])
    axis = np.linspace(-eps, eps, 201)
    a, b = np.meshgrid(axis, axis, indexing="ij")
    grid = x0 + np.stack([a.ravel(), b.ravel()], axis=1)
    best = float(_per_sample_ce(gauss_teacher, grid, np.repeat(y0, len(grid))).max())
    ratio = achieved / best
    elapsed = time.perf_counter() - start
    ok = bad_budget == 0 and bad_range == 0 and fixed and ratio >= 0.98 and elapsed < 60
    verdict(capsys, 3, ok, f"{instances} instances: {bad_budget} budget and {bad_range} clamp "
                           f"violations (worst l2 excess {worst_l2:.1e}); zero-gradient fixed "
                           f"point {fixed}; PGD-10 loss {achieved:.5f} vs grid max {best:.5f} "
                           f"(ratio {ratio:.4f} >= 0.98); {elapsed:.1f}s (< 60s)")


# -- 4-6, 10: shared toy experiment ---------------------------------------------

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy2d")
    cfg = pipelines.toy2d_config(0)
    start = time.perf_counter()
    summary = pipelines.toy2d(cfg, str(out))
    return cfg, out, summary, time.perf_counter() - start


def test_criterion_4_obfuscation_protocol(capsys, toy):
    cfg, out, _, _ = toy
    start = time.perf_counter()
    student = load_model(out / "student.dfsc")
    _, test = pipelines.split(cfg, load_dataset(out / "real.dfsd"))
    report = pipelines.curve(cfg, student, test)
    elapsed = time.perf_counter() - start
    bounded = [report.accuracy(t, cfg.attack.eps) for t in cfg.eval.iterations]
    unbounded = report.accuracy(cfg.eval.unbounded_iterations, math.inf)
    monotone = all(b <= a + 0.005 for a, b in zip(bounded, bounded[1:]))
    same_as_pipeline = json.loads(report.to_json()) == json.loads((out / "robustness.json")
                                                                   .read_text())
    ok = monotone and unbounded <= 0.01 and same_as_pipeline and elapsed < 180
    curve = ", ".join(f"{t}:{a:.4f}" for t, a in zip(cfg.eval.iterations, bounded))
    verdict(capsys, 4, ok, f"PGD curve {{{curve}}} non-increasing within 0.005: {monotone}; "
                           f"eps=inf PGD-{cfg.eval.unbounded_iterations} accuracy {unbounded:.4f} "
                           f"(<= 0.01); {elapsed:.1f}s (< 180s)")


def test_criterion_5_dss_diversity(capsys, toy):
    _, out, s, elapsed = toy
    panels = all((out / f"scatter_{p}.csv").stat().st_size > 0 for p in ("real", "fixed", "dss"))
    ratio = s["coverage_dss"] / s["coverage_fixed"] if s["coverage_fixed"] > 0 else math.inf
    ok = ratio >= 1.2 and s["jsd_dss"] < s["jsd_fixed"] and panels and elapsed < 300
    verdict(capsys, 5, ok, f"coverage dss {s['coverage_dss']:.4f} vs fixed "
                           f"{s['coverage_fixed']:.4f} (ratio {ratio:.2f} >= 1.2); JSD dss "
                           f"{s['jsd_dss']:.4f} vs fixed {s['jsd_fixed']:.4f}; scatter panels "
                           f"{panels}; pipeline {elapsed:.1f}s (< 300s)")


def test_criterion_6_end_to_end_robustness(capsys, toy):
    _, _, s, elapsed = toy
    gain = s["student_robust"] - s["teacher_robust"]
    drop = s["teacher_clean"] - s["student_clean"]
    ok = gain >= 0.20 and drop <= 0.15 and elapsed < 300
    verdict(capsys, 6, ok, f"PGD-10 robust teacher {s['teacher_robust']:.4f} -> student "
                           f"{s['student_robust']:.4f} (gain {gain:+.4f}, need >= +0.20); clean "
                           f"{s['teacher_clean']:.4f} -> {s['student_clean']:.4f} (drop "
                           f"{drop:+.4f}, need <= 0.15); {elapsed:.1f}s (< 300s)")


# -- 7. diversity metric oracles -----------------------------------------------

def test_criterion_7_metric_oracles(capsys):
    start = time.perf_counter()
    mismatches = []
    for seed in range(100):
        rng = np.random.default_rng([7, seed])
        dim, k = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        real = rng.normal(size=(int(rng.integers(k + 1, 51)), dim))
        fake = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), size=(int(rng.integers(k + 1, 51)), dim))
        if seed % 4 == 0:
            h = min(len(real), len(fake)) // 2
            fake[:h] = real[:h]  # shared points: ties on the radii
        bins = int(rng.integers(2, min(len(real), 12) + 1))
        centres = ev.kmeans(real, bins, Rng(seed))
        rc, fc = ev.bin_counts(real, centres), ev.bin_counts(fake, centres)
        r, f, c = real.tolist(), fake.tolist(), centres.tolist()
        checks = {
            "recall": ev.recall(real, fake, k) == oracles.recall(r, f, k),
            "coverage": ev.coverage(real, fake, k) == oracles.coverage(r, f, k),
            "counts": rc.tolist() == oracles.counts(r, c) and fc.tolist() == oracles.counts(f, c),
            "ndb": ev.ndb_from_counts(rc, fc) == oracles.ndb(rc.tolist(), fc.tolist(), 0.05),
            "jsd": ev.jsd_from_counts(rc, fc) == oracles.jsd(rc.tolist(), fc.tolist()),
        }
        mismatches += [f"seed {seed} {name}" for name, good in checks.items() if not good]

    x = np.random.default_rng(70).normal(size=(300, 2))
    n_same, j_same = ev.ndb_jsd(x, x, bins=100, rng=Rng(0))
    identical = (ev.recall(x, x) == 1.0 and ev.coverage(x, x) == 1.0 and n_same == 0
                 and j_same == 0.0)
    far = ev.coverage(x, np.full((50, 2), 100.0)) == 0.0
    ndbs = []
    for seed in range(10):
        rng = np.random.default_rng([71, seed])
        n, _ = ev.ndb_jsd(rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2)), bins=100,
                          rng=Rng(seed))
        ndbs.append(n)
    iid = max(ndbs) < 15
    elapsed = time.perf_counter() - start
    ok = not mismatches and identical and far and iid and elapsed < 30
    verdict(capsys, 7, ok, f"100 seeds, {len(mismatches)} oracle mismatches "
                           f"{mismatches[:3]}; identical set recall/coverage 1, NDB "
                           f"{n_same}, JSD {j_same}; far point coverage 0: {far}; iid NDB "
                           f"{ndbs} (each < 15, mean {np.mean(ndbs):.1f}); {elapsed:.1f}s (< 30s)")


# -- 8. loss surface -----------------------------------------------------------

def test_criterion_8_loss_surface(capsys):
    start = time.perf_counter()
    centre_exact, worst_norm, untouched = True, 0.0, True
    for kind, seed in (("mlp-bn", 1), ("conv-tiny", 2)):
        m = random_model(kind, seed)
        x = np.random.default_rng(seed).normal(size=(16,) + m.spec.input_shape)
        y = np.arange(16) % m.spec.num_classes
        before = m.digest()
        grid = ev.loss_surface(m, x, y, resolution=5, radius=0.5, rng=Rng(seed))
        centre_exact &= grid.center() == ev.model_loss_fn(m, x, y)(m.params)
        untouched &= m.digest() == before
        for s in range(5):
            d = ev.filter_normalized_direction(m.params, Rng(s))
            for k, v in m.params.items():
                if v.ndim < 2:
                    continue
                dn = np.linalg.norm(d[k].reshape(len(v), -1), axis=1)
                pn = np.linalg.norm(v.reshape(len(v), -1), axis=1)
                worst_norm = max(worst_norm, float(np.abs(dn - pn).max()))
    w0, c = 0.7, -0.2
    params = {"w": np.array([[w0]])}
    grid = ev.surface(params, lambda p: float((p["w"][0, 0] - c) ** 2), 21, 1.0, seeds=(1, 2))
    d1 = ev.filter_normalized_direction(params, Rng(1))["w"][0, 0]
    d2 = ev.filter_normalized_direction(params, Rng(2))["w"][0, 0]
    parabola = max(abs(grid.values[i][j] - (w0 + a * d1 + b * d2 - c) ** 2)
                   for i, a in enumerate(grid.axis) for j, b in enumerate(grid.axis))
    elapsed = time.perf_counter() - start
    ok = centre_exact and untouched and worst_norm <= 1e-12 and parabola <= 1e-10 and elapsed < 30
    verdict(capsys, 8, ok, f"center exact {centre_exact}; max group-norm error "
                           f"{worst_norm:.1e} (<= 1e-12); parabola max error {parabola:.1e} "
                           f"(<= 1e-10); model untouched {untouched}; {elapsed:.1f}s (< 30s)")


# -- 9. determinism and persistence --------------------------------------------

SMALL_RUN = {"data": {"per_class": 40}, "pretrain": {"epochs": 3},
             "synth": {"batch_size": 16, "batches": 2, "iterations": 20},
             "train": {"batch_size": 16, "aggregate_batches": 2, "epochs": 1, "lr": 1e-3},
             "attack": {"eps": 0.3, "iterations": 3},
             "eval": {"iterations": [1, 3], "unbounded_iterations": 10, "surface_resolution": 3,
                      "surface_samples": 32}}


def _small_run(root):
    teacher, syn = str(root / "teacher.dfsc"), str(root / "syn.dfsd")
    root.mkdir(parents=True, exist_ok=True)
    first, path = root / "pretrain.json", root / "cfg.json"
    first.write_text(json.dumps(dict(SMALL_RUN, paths={"out": str(root), "teacher": teacher})))
    path.write_text(json.dumps(dict(SMALL_RUN, paths={
        "out": str(root), "teacher": teacher, "synthetic": syn, "model": teacher,
        "dataset": str(root / "real_test.dfsd")})))
    codes = [cli.main(["pretrain", "--config", str(first)])]
    digest = sha256(teacher)
    hashes = {}
    for cmd in ("synth", "attack", "train", "surface"):
        codes.append(cli.main([cmd, "--config", str(path)]))
        hashes[cmd] = sha256(teacher) == digest
    return codes, hashes


def test_criterion_9_determinism(capsys, tmp_path):
    start = time.perf_counter()
    codes_a, hashes = _small_run(tmp_path / "a")
    codes_b, _ = _small_run(tmp_path / "b")
    artifacts = ("real.dfsd", "real_train.dfsd", "real_test.dfsd", "teacher.dfsc", "syn.dfsd",
                 "student.dfsc", "robustness.json", "surface.csv")
    identical = [n for n in artifacts
                 if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]

    round_trip = True
    for n in ("teacher.dfsc", "student.dfsc"):
        blob = (tmp_path / "a" / n).read_bytes()
        round_trip &= checkpoint_bytes(*loads_checkpoint(blob)) == blob
    for n in ("real.dfsd", "syn.dfsd"):
        blob = (tmp_path / "a" / n).read_bytes()
        ds = loads_dataset(blob)
        round_trip &= dataset_bytes(ds) == blob
    # in-memory arrays with awkward values survive a save/load cycle bit for bit
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 2)) * np.array([1e-300, 1e300])
    x[0, 0], x[1, 1] = -0.0, np.nextafter(1.0, 2.0)
    ds = Dataset(x, np.array([0, 1, 2, 0, 1]), 3)
    save_dataset(tmp_path / "odd.dfsd", ds)
    back = load_dataset(tmp_path / "odd.dfsd")
    round_trip &= back.x.tobytes() == x.tobytes() and np.array_equal(back.y, ds.y)
    teacher = load_model(tmp_path / "a" / "teacher.dfsc")
    other = load_model(tmp_path / "a" / "teacher.dfsc")
    round_trip &= all(teacher.params[k].tobytes() == other.params[k].tobytes()
                      for k in teacher.params)

    elapsed = time.perf_counter() - start
    ok = (set(codes_a + codes_b) == {0} and len(identical) == len(artifacts) and round_trip
          and all(hashes.values()) and elapsed < 30)
    verdict(capsys, 9, ok, f"byte-identical reruns {len(identical)}/{len(artifacts)}; "
                           f"round-trips bit-exact {round_trip}; teacher hash unchanged by "
                           f"{hashes}; {elapsed:.1f}s (< 30s)")


# -- 10. sensitivity sweep -----------------------------------------------------

def test_criterion_10_sweep(capsys, toy, tmp_path):
    cfg, out, _, _ = toy
    cfg = replace(cfg, paths=replace(cfg.paths, out=str(tmp_path),
                                     teacher=str(out / "teacher.dfsc"),
                                     synthetic=str(out / "synthetic_dss.dfsd")))
    path = tmp_path / "toy.json"
    path.write_text(dumps(cfg))
    assert load_config(str(path)) == cfg
    start = time.perf_counter()
    code = cli.main(["sweep", "--config", str(path),
                     "--param", "tau", "--values", "0,0.25,0.5,0.75,1.0",
                     "--param", "B", "--values", "1,2,4,10"])
    elapsed = time.perf_counter() - start
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    cells = {(float(r["tau"]), int(r["aggregate_batches"])) for r in rows}
    complete = cells == {(t, b) for t in (0.0, 0.25, 0.5, 0.75, 1.0) for b in (1, 2, 4, 10)}
    finite = all(math.isfinite(float(r[f])) for r in rows
                 for f in ("clean_accuracy", "robust_accuracy", "mask_density"))
    teacher = load_model(out / "teacher.dfsc")
    plain, _ = pipelines.train(cfg, teacher, load_dataset(out / "synthetic_dss.dfsd"),
                               train_cfg=replace(cfg.train, grad_refine=False,
                                                 aggregate_batches=1))
    cell = next(r for r in rows if float(r["tau"]) == 0.0 and int(r["aggregate_batches"]) == 1)
    identity = cell["student_digest"] == checkpoint_digest(plain.spec, plain.params, plain.bn)
    ok = code == 0 and complete and finite and identity and elapsed < 600
    verdict(capsys, 10, ok, f"exit {code}; {len(rows)} cells complete {complete}, finite "
                            f"{finite}; tau=0,B=1 digest equals plain training {identity}; "
                            f"{elapsed:.1f}s (< 600s)")
