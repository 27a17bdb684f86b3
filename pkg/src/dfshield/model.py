"""Small batch-normalised classifiers and their checkpoint format.

Two architectures are available:

``mlp-bn``
    input -> [affine -> BN -> ReLU] x 3 -> affine -> C logits.
``conv-tiny``
    3x3 conv (8) -> BN -> ReLU -> 3x3 conv (16) -> BN -> ReLU -> global
    average pool -> affine -> C logits.  Convolutions carry no bias.

Parameters are plain float64 arrays in an ordered :class:`ParamStore`; the
forward pass wraps whatever it is given with :func:`as_tensor`, so callers
that need gradients pass leaf :class:`Tensor` objects instead.
"""
import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import container
from .tensorcore import (Tensor, as_tensor, conv2d, matmul, reduce_mean, relu, reshape,
                         square, sqrt, transpose)

CHECKPOINT_MAGIC = b"DFS1"
KINDS = ("mlp-bn", "conv-tiny")
DEFAULT_WIDTHS = {"mlp-bn": (64, 64, 64), "conv-tiny": (8, 16)}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple
    num_classes: int
    widths: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        widths = tuple(int(w) for w in self.widths) or DEFAULT_WIDTHS[self.kind]
        object.__setattr__(self, "widths", widths)
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kind == "mlp-bn":
            if len(self.input_shape) != 1:
                raise ModelError(f"mlp-bn expects a flat input shape, got {self.input_shape}")
            if len(widths) != 3:
                raise ModelError(f"mlp-bn needs exactly 3 hidden widths, got {widths}")
        else:
            if len(self.input_shape) != 3:
                raise ModelError(f"conv-tiny expects (C, H, W), got {self.input_shape}")
            if len(widths) != 2:
                raise ModelError(f"conv-tiny needs exactly 2 channel counts, got {widths}")

    def to_dict(self):
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["input_shape"]), int(d["num_classes"]),
                   tuple(d.get("widths", ())))

    @property
    def bn_layers(self):
        return [f"bn{i + 1}" for i in range(len(self.widths))]

    @property
    def feature_dim(self):
        return self.widths[-1]

    def param_shapes(self):
        """Ordered ``(name, shape)`` list of trainable parameters."""
        shapes = []
        if self.kind == "mlp-bn":
            fan_in = self.input_shape[0]
            for i, w in enumerate(self.widths, start=1):
                shapes += [(f"fc{i}.weight", (w, fan_in)), (f"fc{i}.bias", (w,)),
                           (f"bn{i}.weight", (w,)), (f"bn{i}.bias", (w,))]
                fan_in = w
        else:
            c_in = self.input_shape[0]
            for i, w in enumerate(self.widths, start=1):
                shapes += [(f"conv{i}.weight", (w, c_in, 3, 3)),
                           (f"bn{i}.weight", (w,)), (f"bn{i}.bias", (w,))]
                c_in = w
        shapes += [("out.weight", (self.num_classes, self.widths[-1])),
                   ("out.bias", (self.num_classes,))]
        return shapes


class ParamStore(dict):
    """Ordered ``name -> ndarray`` map with a role tag (teacher / student)."""

    def __init__(self, items=(), role="teacher"):
        super().__init__(items)
        self.role = role

    def copy(self, role=None):
        return ParamStore(((k, v.copy()) for k, v in self.items()),
                          role=self.role if role is None else role)


@dataclass
class BNState:
    running_mean: dict
    running_var: dict
    momentum: float = 0.1
    eps: float = 1e-5

    def copy(self):
        return BNState({k: v.copy() for k, v in self.running_mean.items()},
                       {k: v.copy() for k, v in self.running_var.items()},
                       self.momentum, self.eps)


@dataclass
class Model:
    """Architecture, parameters and BN running statistics travelling together."""
    spec: ModelSpec
    params: ParamStore
    bn: BNState = field(repr=False)

    def copy(self, role=None):
        return Model(self.spec, self.params.copy(role), self.bn.copy())

    def forward(self, x, **kw):
        return forward(self.spec, self.params, self.bn, x, **kw)

    def logits(self, x):
        """Eval-mode logits as an ndarray (no tape, no stat updates)."""
        out, _ = forward(self.spec, self.params, self.bn, Tensor(x))
        return out.data

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)

    def digest(self):
        return checkpoint_digest(self.spec, self.params, self.bn)


def init_params(spec, rng, role="teacher"):
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases, fresh BN."""
    params = ParamStore(role=role)
    for name, shape in spec.param_shapes():
        if name.startswith("bn"):
            params[name] = np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    bn = BNState({n: np.zeros(w) for n, w in zip(spec.bn_layers, spec.widths)},
                 {n: np.ones(w) for n, w in zip(spec.bn_layers, spec.widths)})
    return params, bn


def _batchnorm(h, name, params, bn, train, capture, update_stats, stats):
    gamma = as_tensor(params[f"{name}.weight"])
    beta = as_tensor(params[f"{name}.bias"])
    if (train or capture) and h.shape[0] < 2:
        raise ModelError(f"{name}: batch statistics need at least 2 rows, got {h.shape[0]}")
    if train or capture:
        mu = reduce_mean(h, axis=0)
        centred = h - mu
        var = reduce_mean(square(centred), axis=0)
        if capture:
            stats[name] = (mu, var)
    if train:
        xhat = centred / sqrt(var + bn.eps)
        if update_stats:
            m = bn.momentum
            bn.running_mean[name] = (1.0 - m) * bn.running_mean[name] + m * mu.data
            bn.running_var[name] = (1.0 - m) * bn.running_var[name] + m * var.data
    else:
        inv = 1.0 / np.sqrt(bn.running_var[name] + bn.eps)
        xhat = (h - bn.running_mean[name]) * inv
    return xhat * gamma + beta


def forward(spec, params, bn, x, train=False, capture_stats=False, update_stats=True,
            return_features=False):
    """Logits of ``x`` plus captured BN batch statistics.

    ``train`` normalises with batch statistics and (unless ``update_stats`` is
    false) folds them into the running statistics of ``bn``.  Eval mode uses
    the running statistics and never modifies ``bn``.  ``capture_stats``
    records per-layer batch mean and (biased) variance as tensors on the
    active tape, in either mode.

    Returns ``(logits, stats)`` or ``(logits, stats, features)`` where
    features are the penultimate activations.
    """
    x = as_tensor(x)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ModelError(f"input shape {x.shape[1:]} does not match model {spec.input_shape}")
    stats = {}
    h = x
    if spec.kind == "mlp-bn":
        for i in range(1, len(spec.widths) + 1):
            h = matmul(h, transpose(as_tensor(params[f"fc{i}.weight"])))
            h = h + as_tensor(params[f"fc{i}.bias"])
            h = relu(_batchnorm(h, f"bn{i}", params, bn, train, capture_stats,
                                update_stats, stats))
    else:
        for i in range(1, len(spec.widths) + 1):
            h = conv2d(h, as_tensor(params[f"conv{i}.weight"]), pad=1)
            n, c, hh, ww = h.shape
            flat = reshape(transpose(h, (0, 2, 3, 1)), (n * hh * ww, c))
            flat = _batchnorm(flat, f"bn{i}", params, bn, train, capture_stats,
                              update_stats, stats)
            h = relu(transpose(reshape(flat, (n, hh, ww, c)), (0, 3, 1, 2)))
        h = reduce_mean(h, axis=(2, 3))
    features = h
    logits = matmul(h, transpose(as_tensor(params["out.weight"]))) + as_tensor(params["out.bias"])
    if return_features:
        return logits, stats, features
    return logits, stats


# -- checkpoints -------------------------------------------------------------

def _checkpoint_parts(spec, params, bn):
    meta = {"kind": "checkpoint", "spec": spec.to_dict(), "role": params.role,
            "bn": {"momentum": bn.momentum, "eps": bn.eps, "layers": list(bn.running_mean)}}
    tensors = [(k, v) for k, v in params.items()]
    for name in bn.running_mean:
        tensors.append((f"{name}.running_mean", bn.running_mean[name]))
        tensors.append((f"{name}.running_var", bn.running_var[name]))
    return meta, tensors


def checkpoint_bytes(spec, params, bn):
    meta, tensors = _checkpoint_parts(spec, params, bn)
    return container.encode(CHECKPOINT_MAGIC, meta, tensors)


def checkpoint_digest(spec, params, bn):
    return hashlib.sha256(checkpoint_bytes(spec, params, bn)).hexdigest()


def save_checkpoint(path, spec, params, bn):
    meta, tensors = _checkpoint_parts(spec, params, bn)
    container.write(path, CHECKPOINT_MAGIC, meta, tensors)


def load_checkpoint(path):
    header, tensors = container.read(path, CHECKPOINT_MAGIC)
    return _from_container(header, tensors)


def loads_checkpoint(blob):
    header, tensors = container.decode(CHECKPOINT_MAGIC, blob)
    return _from_container(header, tensors)


def _from_container(header, tensors):
    if header.get("kind") != "checkpoint":
        raise container.ContainerError("not a model checkpoint")
    spec = ModelSpec.from_dict(header["spec"])
    params = ParamStore(role=header.get("role", "teacher"))
    for name, shape in spec.param_shapes():
        if name not in tensors or tensors[name].shape != tuple(shape):
            raise container.ContainerError(f"checkpoint missing or misshapen tensor {name!r}")
        params[name] = tensors[name]
    layers = header["bn"]["layers"]
    bn = BNState({n: tensors[f"{n}.running_mean"] for n in layers},
                 {n: tensors[f"{n}.running_var"] for n in layers},
                 header["bn"]["momentum"], header["bn"]["eps"])
    return spec, params, bn


def load_model(path):
    return Model(*load_checkpoint(path))


def save_model(path, model):
    save_checkpoint(path, model.spec, model.params, model.bn)


def student_from(teacher):
    """Student initialised as an exact copy of the teacher."""
    return Model(teacher.spec, teacher.params.copy(role="student"), copy.deepcopy(teacher.bn))
