"""Accuracy, sample-diversity metrics and loss-surface slices."""
import math
from statistics import NormalDist

import numpy as np

from . import _kernels
from .attack import robust_accuracy
from .model import forward
from .reports import DiversityReport, SurfaceGrid
from .tensorcore import Rng, Tensor, cross_entropy, kl_divergence

JSD_SMOOTHING = 1e-10


def accuracy_clean(model, ds):
    if len(ds) == 0:
        raise ValueError("empty dataset")
    return float((model.predict(ds.x) == ds.y).mean())


def accuracy_robust(model, ds, attack_cfg, rng):
    if len(ds) == 0:
        raise ValueError("empty dataset")
    return robust_accuracy(model, ds, attack_cfg.bounded_to(ds), rng)


# -- k-NN manifold metrics ---------------------------------------------------

def _as_features(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], -1)


def knn_radii(features, k):
    """Distance from each point to its k-th nearest neighbour (self excluded)."""
    d = _kernels.pairwise_distances(features, features)
    return np.sort(d, axis=1)[:, k]


def _check_sizes(real, fake, k):
    if len(real) < k + 1 or len(fake) < k + 1:
        raise ValueError(f"recall/coverage need at least k+1 = {k + 1} points per set, "
                         f"got {len(real)} real and {len(fake)} fake")


def recall(real, fake, k=5):
    """Fraction of real points inside at least one fake k-NN ball (closed)."""
    real, fake = _as_features(real), _as_features(fake)
    _check_sizes(real, fake, k)
    radii = knn_radii(fake, k)
    d = _kernels.pairwise_distances(real, fake)
    return float((d <= radii[None, :]).any(axis=1).mean())


def coverage(real, fake, k=5):
    """Fraction of real points whose own k-NN ball contains a fake point."""
    real, fake = _as_features(real), _as_features(fake)
    _check_sizes(real, fake, k)
    radii = knn_radii(real, k)
    d = _kernels.pairwise_distances(real, fake)
    return float((d.min(axis=1) <= radii).mean())


# -- binning metrics ---------------------------------------------------------

def kmeans(x, n_clusters, rng, max_iter=100):
    """Lloyd's algorithm from ``n_clusters`` distinct random rows; empty clusters keep
    their previous centre."""
    x = _as_features(x)
    centres = x[rng.permutation(len(x))[:n_clusters]].copy()
    assign = None
    for _ in range(max_iter):
        new = _kernels.nearest_centroid(x, centres)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(n_clusters):
            members = x[assign == c]
            if len(members):
                centres[c] = members.mean(axis=0)
    return centres


def bin_counts(x, centres):
    labels = _kernels.nearest_centroid(_as_features(x), centres)
    return np.bincount(labels, minlength=len(centres))


def ndb_from_counts(real_counts, fake_counts, significance=0.05):
    """Number of bins where a pooled two-proportion z-test rejects equality."""
    n1, n2 = real_counts.sum(), fake_counts.sum()
    p1, p2 = real_counts / n1, fake_counts / n2
    pooled = (real_counts + fake_counts) / (n1 + n2)
    se = np.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    z = np.abs(p1 - p2) / np.where(se > 0, se, 1.0)
    crit = NormalDist().inv_cdf(1.0 - significance / 2.0)
    return int(((z > crit) & (se > 0)).sum())


def jsd_from_counts(real_counts, fake_counts, smoothing=JSD_SMOOTHING):
    """Jensen-Shannon divergence (natural log) between two bin histograms."""
    p = real_counts / real_counts.sum() + smoothing
    q = fake_counts / fake_counts.sum() + smoothing
    p, q = p / math.fsum(p), q / math.fsum(q)
    # libm log and fsum per bin: the value does not depend on the numpy
    # build (SIMD log) or on summation order
    terms = []
    for a, b in zip(p.tolist(), q.tolist()):
        m = 0.5 * (a + b)
        terms.append(0.5 * a * math.log(a / m) + 0.5 * b * math.log(b / m))
    return math.fsum(terms)


def ndb_jsd(real, fake, bins=100, significance=0.05, rng=None, max_iter=100):
    real, fake = _as_features(real), _as_features(fake)
    if len(real) < bins:
        raise ValueError(f"need at least {bins} real points for {bins} bins, got {len(real)}")
    centres = kmeans(real, bins, rng if rng is not None else Rng(0), max_iter)
    rc, fc = bin_counts(real, centres), bin_counts(fake, centres)
    return ndb_from_counts(rc, fc, significance), jsd_from_counts(rc, fc)


def diversity_report(real, fake, k=5, bins=100, significance=0.05, rng=None):
    ndb, jsd = ndb_jsd(real, fake, bins, significance, rng)
    return DiversityReport(recall(real, fake, k), coverage(real, fake, k), ndb, jsd,
                           k, bins, significance)


def diversity_features(model, ds, passthrough=False):
    """Penultimate eval-mode activations, or the raw (flattened) inputs."""
    if passthrough or model is None:
        return _as_features(ds.x)
    _, _, feats = forward(model.spec, model.params, model.bn, Tensor(ds.x),
                          return_features=True)
    return feats.data


# -- loss surface ------------------------------------------------------------

def filter_normalized_direction(params, rng):
    """Gaussian direction rescaled row-wise (per output unit / filter) so each
    row's norm equals the matching parameter row's norm; 1-D tensors get zero."""
    direction = {}
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        if value.ndim < 2:
            direction[name] = np.zeros_like(value)
            continue
        d = rng.normal(size=value.shape)
        rows_d = d.reshape(d.shape[0], -1)
        rows_p = value.reshape(value.shape[0], -1)
        dn = np.linalg.norm(rows_d, axis=1, keepdims=True)
        pn = np.linalg.norm(rows_p, axis=1, keepdims=True)
        rows_d = rows_d * np.where(dn > 0, pn / np.where(dn > 0, dn, 1.0), 0.0)
        direction[name] = rows_d.reshape(value.shape)
    return direction


def surface(params, loss_fn, resolution=21, radius=1.0, rng=None, seeds=None):
    """Loss on the plane theta + a * d1 + b * d2 over ``[-radius, radius]^2``.

    ``loss_fn`` receives a parameter dict and returns a float; ``params`` is
    never modified.  ``resolution`` must be odd so (0, 0) is a grid point.
    """
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError(f"resolution must be odd, got {resolution}")
    if seeds is None:
        rng = rng if rng is not None else Rng(0)
        seeds = tuple(int(s) for s in rng.integers(0, 2 ** 63, size=2))
    d1 = filter_normalized_direction(params, Rng(seeds[0]))
    d2 = filter_normalized_direction(params, Rng(seeds[1]))
    axis = np.linspace(-radius, radius, resolution)
    axis[resolution // 2] = 0.0
    values = []
    for a in axis:
        row = []
        for b in axis:
            moved = {k: params[k] + a * d1[k] + b * d2[k] for k in params}
            row.append(float(loss_fn(moved)))
        values.append(row)
    return SurfaceGrid([float(a) for a in axis], values, seeds, float(radius))


def model_loss_fn(model, x, y=None, loss="ce", teacher=None):
    """Eval-mode loss of ``model`` as a function of its parameters."""
    x = np.asarray(x, dtype=np.float64)
    ref = teacher.logits(x) if loss == "kl_teacher" else None

    def fn(params):
        logits, _ = forward(model.spec, params, model.bn, Tensor(x))
        if loss == "ce":
            return cross_entropy(logits, y).item()
        return kl_divergence(logits, Tensor(ref)).item()
    return fn


def loss_surface(model, x, y, loss="ce", resolution=21, radius=1.0, rng=None, teacher=None):
    return surface(model.params, model_loss_fn(model, x, y, loss, teacher), resolution,
                   radius, rng)
