"""Teacher pretraining, robust student training and sign-agreement gradient refinement."""
import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .attack import pgd
from .model import Model, forward, init_params
from .tensorcore import Tape, Tensor, backward, cross_entropy, kl_divergence

NORMALIZATIONS = ("sum", "mean_batches", "mean_agreeing")
TRAIN_LOSSES = ("dfshield", "trades", "std")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    aggregate_batches: int = 10
    tau: float = 0.5
    normalization: str = "sum"
    lr: float = 1e-4
    momentum: float = 0.9
    epochs: int = 1
    batch_size: int = 200
    loss: str = "dfshield"
    trades_beta: float = 6.0
    grad_refine: bool = True
    scale_lr: bool = True
    detach_reference: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.aggregate_batches < 1:
            raise ValueError("aggregate_batches must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.loss not in TRAIN_LOSSES:
            raise ValueError(f"train loss must be one of {TRAIN_LOSSES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def effective_lr(self):
        if self.grad_refine and self.scale_lr:
            return self.lr * self.aggregate_batches
        return self.lr


@dataclass
class GradAgreement:
    scores: dict
    mask: dict
    refined: dict

    def density(self):
        total = sum(m.size for m in self.mask.values())
        return sum(int(m.sum()) for m in self.mask.values()) / max(total, 1)


# -- losses ------------------------------------------------------------------

def _const(t):
    return Tensor(t.data if isinstance(t, Tensor) else t)


def loss_dfshield(s_clean, s_adv, t_clean, lambda1=1.0, lambda2=1.0, detach_reference=True):
    """KL(S(x)||T(x)) + l1 KL(S(x')||T(x)) + l2 KL(S(x')||S(x)); no hard labels."""
    t_ref = _const(t_clean)
    s_ref = _const(s_clean) if detach_reference else s_clean
    return (kl_divergence(s_clean, t_ref)
            + lambda1 * kl_divergence(s_adv, t_ref)
            + lambda2 * kl_divergence(s_adv, s_ref))


def loss_std(s_adv, labels):
    return cross_entropy(s_adv, labels)


def loss_trades(s_clean, s_adv, labels, beta=6.0, detach_reference=True):
    s_ref = _const(s_clean) if detach_reference else s_clean
    return cross_entropy(s_clean, labels) + beta * kl_divergence(s_adv, s_ref)


def training_loss(cfg, s_clean, s_adv, t_clean, labels):
    if cfg.loss == "dfshield":
        return loss_dfshield(s_clean, s_adv, t_clean, cfg.lambda1, cfg.lambda2,
                             cfg.detach_reference)
    if cfg.loss == "trades":
        return loss_trades(s_clean, s_adv, labels, cfg.trades_beta, cfg.detach_reference)
    return loss_std(s_adv, labels)


# -- gradient refinement -----------------------------------------------------

def _stack(gradients):
    if not gradients:
        raise ValueError("need at least one gradient map")
    keys = list(gradients[0])
    shapes = {k: np.shape(gradients[0][k]) for k in keys}
    for i, g in enumerate(gradients[1:], start=1):
        if list(g) != keys:
            raise ValueError(f"gradient map {i} has keys {sorted(g)}, expected {sorted(keys)}")
        for k in keys:
            if np.shape(g[k]) != shapes[k]:
                raise ValueError(f"gradient map {i}: {k!r} has shape {np.shape(g[k])}, "
                                 f"expected {shapes[k]}")
    flat = np.stack([np.concatenate([np.ravel(g[k]) for k in keys]) if keys else np.zeros(0)
                     for g in gradients])
    return keys, shapes, flat


def _unflatten(vec, keys, shapes):
    out, pos = {}, 0
    for k in keys:
        n = int(np.prod(shapes[k], dtype=np.int64))
        out[k] = vec[pos:pos + n].reshape(shapes[k])
        pos += n
    return out


def agreement_score(gradients):
    """Per-element mean sign over the B gradient maps (sign(0) = 0)."""
    keys, shapes, flat = _stack(gradients)
    scores, _, _ = _kernels.sign_refine(flat, 0.0)
    return _unflatten(scores, keys, shapes)


def refine_gradients(gradients, tau=0.5, normalization="sum"):
    """Mask elements whose |agreement| < tau; sum only components agreeing in sign.

    Returns ``(refined_map, GradAgreement)``.  ``normalization`` divides the
    sum afterwards: ``sum`` (none), ``mean_batches`` (by B) or
    ``mean_agreeing`` (by the number of agreeing components).
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    keys, shapes, flat = _stack(gradients)
    scores, mask, refined = _kernels.sign_refine(flat, tau)
    if normalization == "mean_batches":
        refined = refined / flat.shape[0]
    elif normalization == "mean_agreeing":
        count = ((scores[None, :] * flat) > 0).sum(axis=0)
        refined = np.where(count > 0, refined / np.maximum(count, 1), 0.0)
    refined_map = _unflatten(refined, keys, shapes)
    agreement = GradAgreement(_unflatten(scores, keys, shapes),
                              _unflatten(mask, keys, shapes), refined_map)
    return refined_map, agreement


def sgd_momentum_step(params, velocity, grads, lr, momentum):
    """``v <- momentum * v + g``; ``p <- p - lr * v``.  Returns new (params, velocity)."""
    new_v = {k: momentum * velocity[k] + grads[k] for k in params}
    new_p = type(params)(((k, params[k] - lr * new_v[k]) for k in params),
                         **({"role": params.role} if hasattr(params, "role") else {}))
    return new_p, new_v


# -- loops -------------------------------------------------------------------

def _leaves(params):
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def _check_finite(loss, grads, where):
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError(f"non-finite loss or gradient at {where}")


def pretrain_teacher(spec, ds, epochs, lr, rng, batch_size=64, momentum=0.9):
    """Plain cross-entropy training (no adversarial examples).

    Returns ``(model, history)``; history holds per-epoch mean loss and
    train accuracy.
    """
    params, bn = init_params(spec, rng.split("init"), role="teacher")
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history = []
    n = len(ds)
    for epoch in range(epochs):
        perm = rng.split(f"epoch-{epoch}").permutation(n)
        losses = []
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            if idx.size < 2:
                continue
            with Tape():
                leaves = _leaves(params)
                logits, _ = forward(spec, leaves, bn, ds.x[idx], train=True)
                loss = cross_entropy(logits, ds.y[idx])
                grads = backward(loss, leaves)
            _check_finite(loss.item(), grads, f"pretrain epoch {epoch} batch {s // batch_size}")
            params, velocity = sgd_momentum_step(params, velocity, grads, lr, momentum)
            losses.append(loss.item())
        model = Model(spec, params, bn)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else None,
                        "train_accuracy": float((model.predict(ds.x) == ds.y).mean())})
    return Model(spec, params, bn), history


def train_student(teacher, student, ds, cfg, attack_cfg, rng, log_path=None):
    """Adversarial training of ``student`` on synthetic ``ds``.

    Each step draws ``cfg.aggregate_batches`` disjoint mini-batches from a
    per-epoch shuffle, crafts PGD examples against the current student (eval
    mode), computes one gradient per mini-batch and combines them with
    :func:`refine_gradients` (or a plain mean when ``grad_refine`` is off)
    before an SGD-with-momentum update.  Inputs are not modified; returns
    ``(trained_student, epoch_log)``.
    """
    spec = student.spec
    params = student.params.copy(role="student")
    bn = student.bn.copy()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    attack_cfg = attack_cfg.bounded_to(ds)
    n_batches = len(ds) // cfg.batch_size
    steps = n_batches // cfg.aggregate_batches
    if steps < 1:
        raise TrainingError(f"{len(ds)} samples cannot fill {cfg.aggregate_batches} "
                            f"mini-batches of {cfg.batch_size}")
    lr = cfg.effective_lr
    log = []
    for epoch in range(cfg.epochs):
        perm = rng.split(f"epoch-{epoch}").permutation(len(ds))
        losses, clean_hits, adv_hits, seen, mask_on, mask_total = [], 0, 0, 0, 0, 0
        for step in range(steps):
            grads = []
            for b in range(cfg.aggregate_batches):
                lo = (step * cfg.aggregate_batches + b) * cfg.batch_size
                idx = perm[lo:lo + cfg.batch_size]
                xb, yb = ds.x[idx], ds.y[idx]
                x_adv = pgd(Model(spec, params, bn), xb, yb, attack_cfg,
                            rng.split(f"pgd-{epoch}-{step}-{b}"))
                t_clean = teacher.logits(xb)
                with Tape():
                    leaves = _leaves(params)
                    s_clean, _ = forward(spec, leaves, bn, xb, train=True)
                    s_adv, _ = forward(spec, leaves, bn, x_adv)
                    loss = training_loss(cfg, s_clean, s_adv, t_clean, yb)
                    g = backward(loss, leaves)
                _check_finite(loss.item(), g, f"epoch {epoch} step {step} batch {b}")
                grads.append(g)
                losses.append(loss.item())
                clean_hits += int((s_clean.data.argmax(1) == yb).sum())
                adv_hits += int((s_adv.data.argmax(1) == yb).sum())
                seen += len(idx)
            if cfg.grad_refine:
                update, agreement = refine_gradients(grads, cfg.tau, cfg.normalization)
                mask_on += sum(int(m.sum()) for m in agreement.mask.values())
                mask_total += sum(m.size for m in agreement.mask.values())
            else:
                update = {k: np.stack([g[k] for g in grads]).mean(axis=0) for k in params}
            params, velocity = sgd_momentum_step(params, velocity, update, lr, cfg.momentum)
        record = {"epoch": epoch, "loss": float(np.mean(losses)),
                  "clean_accuracy": clean_hits / seen, "robust_accuracy": adv_hits / seen,
                  "mask_density": mask_on / mask_total if mask_total else 1.0}
        log.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return Model(spec, params, bn), log
