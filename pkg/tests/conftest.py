import numpy as np
import pytest

from dfshield.data import make_gauss2d, make_patterns8x8, train_test_split
from dfshield.model import ModelSpec, Model, init_params
from dfshield.tensorcore import Rng
from dfshield.train import pretrain_teacher


def rel_err(a, b):
    """Norm-wise relative error; exact zeros on both sides count as 0."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def random_model(kind="mlp-bn", seed=0, input_shape=None, classes=3, widths=()):
    if input_shape is None:
        input_shape = (4,) if kind == "mlp-bn" else (1, 5, 5)
    spec = ModelSpec(kind, input_shape, classes, widths)
    params, bn = init_params(spec, Rng(seed))
    rng = np.random.default_rng(seed)
    # non-trivial BN state so eval mode is not the identity
    for name in bn.running_mean:
        bn.running_mean[name] = rng.normal(scale=0.3, size=bn.running_mean[name].shape)
        bn.running_var[name] = rng.uniform(0.5, 2.0, size=bn.running_var[name].shape)
    for name in params:
        if name.startswith("bn"):
            params[name] = params[name] + rng.normal(scale=0.2, size=params[name].shape)
    return Model(spec, params, bn)


@pytest.fixture(scope="session")
def gauss_data():
    ds = make_gauss2d(4, 250, 0.3, Rng(0).split("data"))
    return (ds,) + train_test_split(ds)


@pytest.fixture(scope="session")
def gauss_teacher(gauss_data):
    _, train, _ = gauss_data
    model, _ = pretrain_teacher(ModelSpec("mlp-bn", (2,), 4), train, 10, 0.05,
                                Rng(0).split("pretrain"))
    return model


@pytest.fixture(scope="session")
def pattern_data():
    ds = make_patterns8x8(4, 60, 0.1, Rng(1).split("data"))
    return (ds,) + train_test_split(ds)
