"""Projected gradient descent under l-inf and l2 budgets."""
import math
from dataclasses import dataclass, replace

import numpy as np

from .model import forward
from .reports import RobustnessReport
from .tensorcore import Tape, Tensor, backward, cross_entropy, kl_divergence

# step used when eps is infinite and no explicit step is configured
UNBOUNDED_STEP = 0.1


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    eps: float = 8 / 255
    step: float = None
    iterations: int = 10
    random_start: bool = True
    loss: str = "ce"
    value_range: tuple = (None, None)

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.loss not in ("ce", "kl_vs_clean"):
            raise ValueError(f"attack loss must be 'ce' or 'kl_vs_clean', got {self.loss!r}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0 or inf, got {self.eps}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.step is not None and not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")

    @property
    def step_size(self):
        if self.step is not None:
            return self.step
        return self.eps / 4 if math.isfinite(self.eps) else UNBOUNDED_STEP

    def bounded_to(self, ds):
        return replace(self, value_range=ds.value_range)


def _clip_range(x, value_range):
    lo, hi = value_range
    if lo is None and hi is None:
        return x
    return np.clip(x, -np.inf if lo is None else lo, np.inf if hi is None else hi)


def project(x_adv, x, cfg):
    """Project ``x_adv`` onto the eps-ball around ``x`` and into the value range."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    eps = cfg.eps
    if math.isfinite(eps):
        if cfg.norm == "linf":
            x_adv = np.clip(x_adv, x - eps, x + eps)
        else:
            delta = x_adv - x
            flat = delta.reshape(delta.shape[0], -1)
            norms = np.sqrt(np.square(flat).sum(axis=1))
            scale = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
            x_adv = x + (flat * scale[:, None]).reshape(delta.shape)
    x_adv = _clip_range(x_adv, cfg.value_range)
    if math.isfinite(eps):
        # x + delta can round so that (x_adv - x) exceeds eps by an ulp
        over = _over_budget(x_adv, x, eps, cfg.norm)
        while over.any():
            x_adv = np.where(over, np.nextafter(x_adv, x), x_adv)
            over = _over_budget(x_adv, x, eps, cfg.norm)
    return x_adv


def _over_budget(x_adv, x, eps, norm):
    if norm == "linf":
        return np.abs(x_adv - x) > eps
    flat = (x_adv - x).reshape(x.shape[0], -1)
    rows = np.sqrt(np.square(flat).sum(axis=1)) > eps
    return np.broadcast_to(rows.reshape((-1,) + (1,) * (x.ndim - 1)), x.shape)


def _random_start(x, cfg, rng):
    if not math.isfinite(cfg.eps):
        return x.copy()
    if cfg.norm == "linf":
        return x + rng.uniform(-cfg.eps, cfg.eps, size=x.shape)
    n = x.shape[0]
    d = int(np.prod(x.shape[1:]))
    direction = rng.normal(size=(n, d))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    radius = cfg.eps * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return x + (direction * radius).reshape(x.shape)


def input_gradient(model, x, labels=None, reference=None, loss="ce"):
    """Gradient of the attack loss (summed over the batch) w.r.t. eval-mode inputs."""
    with Tape():
        xt = Tensor(x, requires_grad=True)
        logits, _ = forward(model.spec, model.params, model.bn, xt)
        if loss == "ce":
            value = cross_entropy(logits, labels) * float(x.shape[0])
        else:
            value = kl_divergence(logits, Tensor(reference)) * float(x.shape[0])
        (g,) = backward(value, [xt])
    return g, value.item()


def pgd(model, x, labels, cfg, rng=None):
    """Signed-gradient ascent with projection, ``cfg.iterations`` steps.

    ``labels`` are class indices for the ``ce`` loss; for ``kl_vs_clean`` they
    are ignored and the clean eval-mode logits of ``x`` serve as reference.
    The model runs in eval mode and is never modified.
    """
    x = np.asarray(x, dtype=np.float64)
    reference = model.logits(x) if cfg.loss == "kl_vs_clean" else None
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        x_adv = project(_random_start(x, cfg, rng), x, cfg)
    else:
        x_adv = project(x, x, cfg)
    alpha = cfg.step_size
    for it in range(cfg.iterations):
        g, _ = input_gradient(model, x_adv, labels, reference, cfg.loss)
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite input gradient at PGD iteration {it}")
        x_adv = project(x_adv + alpha * np.sign(g), x, cfg)
    return x_adv


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def robust_accuracy(model, ds, cfg, rng, chunk=1000):
    """Fraction of ``ds`` still classified correctly after PGD."""
    correct = 0
    for sl in _chunks(len(ds), chunk):
        x_adv = pgd(model, ds.x[sl], ds.y[sl], cfg, rng)
        correct += int((model.predict(x_adv) == ds.y[sl]).sum())
    return correct / len(ds)


def attack_curve(model, ds, cfg, iterations, rng, unbounded_iterations=1000,
                 unbounded_step=None):
    """Robust accuracy for each iteration count, plus an eps = inf column.

    Every column restarts from the same rng state so columns differ only in
    the number of steps.  ``unbounded_iterations=None`` skips the unbounded
    entry.
    """
    if not iterations:
        raise ValueError("iteration list must be non-empty")
    cfg = cfg.bounded_to(ds)
    clean = float((model.predict(ds.x) == ds.y).mean())
    report = RobustnessReport(clean, len(ds))
    for t in iterations:
        col = replace(cfg, iterations=int(t))
        report.add("pgd", cfg.norm, cfg.eps, t, robust_accuracy(model, ds, col, rng.split("pgd")))
    if unbounded_iterations:
        step = unbounded_step if unbounded_step is not None else (cfg.step or UNBOUNDED_STEP)
        col = replace(cfg, eps=math.inf, iterations=int(unbounded_iterations), step=step)
        report.add("pgd", cfg.norm, math.inf, unbounded_iterations,
                   robust_accuracy(model, ds, col, rng.split("pgd")))
    return report
