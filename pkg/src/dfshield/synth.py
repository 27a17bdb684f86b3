"""Surrogate data synthesis by direct optimisation of noise against a frozen teacher.

Each batch starts from standard-normal noise and takes ``iterations`` Adam
steps on

    alpha_class * L_class + alpha_feature * L_feature + alpha_prior * L_prior

where the three coefficients are either fixed, or drawn from U(0, 1) once per
batch (``mode="dss"``), so that different batches settle into differently
shaped distributions.  No real data is read at any point.
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .model import ModelError, forward
from .tensorcore import (Tape, Tensor, backward, cross_entropy, reduce_sum, sqrt, square,
                         take)


class SynthesisError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class SynthConfig:
    batch_size: int = 200
    batches: int = 1
    iterations: int = 1000
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "dss"
    # DeepInversion-style weighting: class term dominant, small BN and TV terms
    fixed_coefficients: tuple = (1.0, 0.01, 1e-4)
    label_policy: str = "round_robin"
    feature_stat: str = "variance"

    def __post_init__(self):
        if self.mode not in ("dss", "fixed"):
            raise ValueError(f"synthesis mode must be 'dss' or 'fixed', got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (BN statistics)")
        if self.iterations < 0 or self.batches < 1:
            raise ValueError("need iterations >= 0 and batches >= 1")
        if self.label_policy != "round_robin":
            raise ValueError(f"unknown label policy {self.label_policy!r}")
        if self.feature_stat not in ("variance", "stddev"):
            raise ValueError(f"feature_stat must be 'variance' or 'stddev'")
        object.__setattr__(self, "fixed_coefficients",
                           tuple(float(a) for a in self.fixed_coefficients))


@dataclass(frozen=True)
class CoefficientDraw:
    alpha_class: float
    alpha_feature: float
    alpha_prior: float

    def as_tuple(self):
        return (self.alpha_class, self.alpha_feature, self.alpha_prior)


@dataclass
class SyntheticBatch:
    x: np.ndarray
    y: np.ndarray
    coefficients: CoefficientDraw
    final_loss: float
    initial_loss: float = field(default=float("nan"))


def loss_class(logits, labels):
    return cross_entropy(logits, labels)


def loss_feature(stats, bn, stat="variance"):
    """Sum over BN layers of squared distances between batch and running statistics."""
    if set(stats) != set(bn.running_mean):
        raise ModelError(f"BN layer mismatch: stats {sorted(stats)} vs model "
                         f"{sorted(bn.running_mean)}")
    total = None
    for name in bn.running_mean:
        mu, var = stats[name]
        if stat == "variance":
            spread = square(var - bn.running_var[name])
        else:
            target = np.sqrt(bn.running_var[name] + bn.eps)
            spread = square(sqrt(var + bn.eps) - target)
        term = reduce_sum(square(mu - bn.running_mean[name])) + reduce_sum(spread)
        total = term if total is None else total + term
    return total


def loss_prior(x):
    """Squared total variation over the two trailing (pixel) axes of NCHW input.

    Flat inputs (no pixel grid) contribute zero.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4:
        # empty sum: zero, but still on the tape so backward gives zeros
        return reduce_sum(take(x, (Ellipsis, slice(0, 0))))
    dx = take(x, (Ellipsis, slice(1, None))) - take(x, (Ellipsis, slice(None, -1)))
    dy = (take(x, (Ellipsis, slice(1, None), slice(None)))
          - take(x, (Ellipsis, slice(None, -1), slice(None))))
    return reduce_sum(square(dx)) + reduce_sum(square(dy))


def sample_coefficients(rng, cfg):
    if cfg.mode == "fixed":
        return CoefficientDraw(*cfg.fixed_coefficients)
    return CoefficientDraw(*(float(a) for a in rng.uniform(0.0, 1.0, size=3)))


def round_robin_labels(n, num_classes):
    return np.arange(n) % num_classes


def _clip(x, value_range):
    lo, hi = value_range
    if lo is None and hi is None:
        return x
    return np.clip(x, -np.inf if lo is None else lo, np.inf if hi is None else hi)


def synthesis_loss(teacher, x, labels, coeffs, feature_stat="variance"):
    """Tensor-valued mixed loss for inputs ``x`` (a Tensor on the active tape)."""
    logits, stats = forward(teacher.spec, teacher.params, teacher.bn, x, capture_stats=True)
    a1, a2, a3 = coeffs.as_tuple()
    return (a1 * loss_class(logits, labels)
            + a2 * loss_feature(stats, teacher.bn, feature_stat)
            + a3 * loss_prior(x))


def _loss_and_grad(teacher, x, labels, coeffs, feature_stat):
    with Tape():
        xt = Tensor(x, requires_grad=True)
        loss = synthesis_loss(teacher, xt, labels, coeffs, feature_stat)
        (g,) = backward(loss, [xt])
    return loss.item(), g


def generate_batch(teacher, cfg, rng, value_range=(None, None)):
    """One synthetic batch; the teacher is only read (eval mode, stats captured)."""
    x = _clip(rng.split("noise").normal(size=(cfg.batch_size,) + teacher.spec.input_shape),
              value_range)
    labels = round_robin_labels(cfg.batch_size, teacher.spec.num_classes)
    coeffs = sample_coefficients(rng.split("coefficients"), cfg)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    initial = None
    for step in range(1, cfg.iterations + 1):
        loss, g = _loss_and_grad(teacher, x, labels, coeffs, cfg.feature_stat)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise SynthesisError(f"non-finite synthesis loss at step {step}", step=step)
        if initial is None:
            initial = loss
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** step)
        v_hat = v / (1.0 - cfg.beta2 ** step)
        x = _clip(x - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), value_range)
    final, _ = _loss_and_grad(teacher, x, labels, coeffs, cfg.feature_stat)
    if not np.isfinite(final):
        raise SynthesisError(f"non-finite synthesis loss at step {cfg.iterations + 1}",
                             step=cfg.iterations + 1)
    return SyntheticBatch(x, labels, coeffs, final, final if initial is None else initial)


def generate_dataset(teacher, cfg, rng, value_range=(None, None), threads=1):
    """``cfg.batches`` independent batches concatenated in batch-index order.

    Returns ``(Dataset, [SyntheticBatch, ...])``.  Each batch draws from
    ``rng.split("batch-<i>")`` so results do not depend on ``threads``.
    """
    def one(i):
        return generate_batch(teacher, cfg, rng.split(f"batch-{i}"), value_range)

    if threads > 1 and cfg.batches > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(one, range(cfg.batches)))
    else:
        batches = [one(i) for i in range(cfg.batches)]
    ds = Dataset(np.concatenate([b.x for b in batches]),
                 np.concatenate([b.y for b in batches]),
                 teacher.spec.num_classes, value_range)
    return ds, batches


def sidecar(cfg, batches):
    """JSON record of the per-batch coefficient draws and losses."""
    return json.dumps({
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "batches": [{"index": i, "coefficients": list(b.coefficients.as_tuple()),
                     "initial_loss": b.initial_loss, "final_loss": b.final_loss}
                    for i, b in enumerate(batches)],
    }, indent=2, sort_keys=True)
