"""Classifier head with softmax cross-entropy and noise-injected variants.

The head computes logits ``f_j = W_j . X + b_j``.  During training the
true-class logit is replaced by ``f_y - n`` where the noise ``n = sigma * s``
depends on the variant:

=========  ===================================  ==============
variant    sigma                                s
=========  ===================================  ==============
none       0                                    0 (no draw)
annealed   alpha |W_y| |X| (1 - cos theta_y)    |xi|
normal     alpha |W_y| |X| (1 - cos theta_y)    xi
negative   alpha |W_y| |X| (1 - cos theta_y)    -|xi|
free       alpha                                |xi|
amplitude  alpha |W_y| |X|                      |xi|
=========  ===================================  ==============

with ``xi ~ N(0, 1)`` drawn once per sample per forward pass.  All variants
except ``none`` consume exactly one draw per sample, also when ``alpha == 0``.
The bias never enters sigma.  If ``|W_y|`` or ``|X|`` is zero, sigma and its
derivatives are taken as zero.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, InvalidInputError, LabelError, NonFiniteError, ShapeError
from .numerics import check_finite, stable_mean, stable_softmax

log = logging.getLogger(__name__)

VARIANTS = ("none", "annealed", "normal", "negative", "free", "amplitude")
NORM_SCALED = ("annealed", "normal", "negative", "amplitude")


@dataclass
class HeadParams:
    """Final fully connected layer: ``W`` is C x D (row j is class j), ``b`` has length C."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W)
        self.b = np.asarray(self.b)
        if not np.issubdtype(self.W.dtype, np.floating):
            self.W = self.W.astype(np.float64)
        if not np.issubdtype(self.b.dtype, np.floating):
            self.b = self.b.astype(np.float64)
        if self.W.ndim != 2 or self.b.ndim != 1:
            raise ShapeError(f"head expects W (C, D) and b (C,), got {self.W.shape}, {self.b.shape}")
        C, D = self.W.shape
        if C < 2 or D < 1:
            raise ShapeError(f"head needs C >= 2 and D >= 1, got C={C}, D={D}")
        if self.b.shape[0] != C:
            raise ShapeError(f"bias length {self.b.shape[0]} != class count {C}")
        check_finite(self.W, "head W")
        check_finite(self.b, "head b")

    @property
    def n_classes(self):
        return self.W.shape[0]

    @property
    def dim(self):
        return self.W.shape[1]

    @classmethod
    def zeros(cls, n_classes, dim, dtype=np.float64):
        return cls(np.zeros((n_classes, dim), dtype), np.zeros(n_classes, dtype))

    @classmethod
    def he_normal(cls, n_classes, dim, rng, dtype=np.float64):
        W = rng.normal((n_classes, dim)) * np.sqrt(2.0 / dim)
        return cls(W.astype(dtype), np.zeros(n_classes, dtype))

    def params(self):
        return {"head.W": self.W, "head.b": self.b}


@dataclass(frozen=True)
class NoiseSpec:
    """Noise variant and scale ``alpha`` (not alpha squared).  The noise mean is fixed at 0."""

    variant: str = "none"
    alpha: float = 0.0

    mu = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown noise variant {self.variant!r}; expected one of {VARIANTS}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise InvalidInputError(f"alpha must be finite and >= 0, got {self.alpha}")

    @classmethod
    def from_alpha_squared(cls, variant, alpha_squared):
        if alpha_squared < 0:
            raise InvalidInputError(f"alpha_squared must be >= 0, got {alpha_squared}")
        return cls(variant, float(np.sqrt(alpha_squared)))

    @property
    def alpha_squared(self):
        return self.alpha * self.alpha

    @property
    def draws_noise(self):
        return self.variant != "none"


@dataclass
class ForwardRecord:
    """Everything one batch's backward pass needs.  Arrays are indexed by sample."""

    labels: np.ndarray        # (N,)
    logits: np.ndarray        # (N, C) clean logits f
    xi: np.ndarray            # (N,) raw draw: |xi| or signed xi for normal; 0 for none
    factor: np.ndarray        # (N,) s with n = sigma * s
    sigma: np.ndarray         # (N,)
    noisy_logit: np.ndarray   # (N,) f_y - n
    probs: np.ndarray         # (N, C) softmax over the substituted logits
    losses: np.ndarray        # (N,) per-sample loss
    spec: NoiseSpec

    def __len__(self):
        return len(self.labels)


def compute_logits(head, X):
    """``f = X W^T + b`` for a single feature vector or a batch (N, D)."""
    X = np.asarray(X)
    if X.shape[-1] != head.dim:
        raise ShapeError(f"feature length {X.shape[-1]} does not match head dim {head.dim}")
    return X @ head.W.T + head.b


def _sigma(W_y, X, dot, variant, alpha):
    """Broadcasting sigma.  ``W_y`` and ``X`` share a trailing feature axis; returns (sigma, norms, ok)."""
    nW = np.sqrt(np.sum(W_y * W_y, axis=-1))
    nX = np.sqrt(np.sum(X * X, axis=-1))
    ok = (nW > 0) & (nX > 0)
    if variant == "none":
        sigma = np.zeros(np.broadcast_shapes(nW.shape, nX.shape), dtype=dot.dtype)
    elif variant == "free":
        sigma = np.full(np.broadcast_shapes(nW.shape, nX.shape), alpha, dtype=dot.dtype)
    else:
        amp = nW * nX
        if variant == "amplitude":
            sigma = alpha * amp
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                cos = np.clip(dot / amp, -1.0, 1.0)
            sigma = alpha * amp * (1.0 - cos)
        sigma = np.where(ok, sigma, 0.0)
    return sigma, nW, nX, ok


def noise_factor(xi, variant):
    """Map the raw draw onto ``s`` so that the subtracted noise is ``sigma * s``."""
    xi = np.asarray(xi, dtype=float)
    if variant == "none":
        return np.zeros_like(xi)
    if variant == "normal":
        return xi
    if variant == "negative":
        return -np.abs(xi)
    return np.abs(xi)


def noise_sigma(head, X, y, spec):
    """Noise magnitude sigma for a single feature vector ``X`` of class ``y``."""
    X = np.asarray(X, dtype=head.W.dtype)
    if X.shape != (head.dim,):
        raise ShapeError(f"expected a feature vector of length {head.dim}, got shape {X.shape}")
    if not 0 <= y < head.n_classes:
        raise LabelError(f"label {y} outside [0, {head.n_classes})")
    W_y = head.W[y]
    sigma, _, _, ok = _sigma(W_y, X, np.dot(W_y, X), spec.variant, spec.alpha)
    if spec.variant in NORM_SCALED and not ok:
        log.warning("zero-norm weight or feature; noise sigma set to 0")
    return float(sigma)


def noisy_logits(W, b, X, y, spec, factor):
    """Clean and noise-substituted logits.

    Broadcasts over leading axes of ``W`` (..., C, D), ``b`` (..., C) and
    ``X`` (..., N, D) so that stacked parameter copies can be evaluated in one
    call.  Returns ``(f, z, sigma, ok)`` where ``z`` equals ``f`` except for
    the true-class column.
    """
    if np.result_type(W, X) == np.longdouble:
        # no BLAS for extended precision; einsum's loop is ~2x faster than matmul's
        f = np.einsum("...nd,...cd->...nc", X, W) + b[..., None, :]
    else:
        f = X @ np.swapaxes(W, -1, -2) + b[..., None, :]
    W_y = W[..., y, :]
    dot = np.sum(W_y * X, axis=-1)
    sigma, _, _, ok = _sigma(W_y, X, dot, spec.variant, spec.alpha)
    rows = np.arange(len(y))
    z = f.copy()
    z[..., rows, y] = f[..., rows, y] - sigma * factor
    return f, z, sigma, ok


def cross_entropy_from_logits(z, y):
    """Per-sample ``-log softmax(z)[y]``; broadcasts over leading axes.

    Evaluated as ``m + log(exp(-m) + sum_{j != y} exp(d_j - m))`` with
    ``d = z - z_y`` and ``m = max(d) >= 0``, switching to ``log1p`` when the
    true class holds the maximum so that near-saturated samples keep full
    relative precision.
    """
    rows = np.arange(len(y))
    d = z - z[..., rows, y][..., None]
    m = np.max(d, axis=-1)
    e = np.exp(d - m[..., None])
    e[..., rows, y] = 0.0
    rest = np.sum(e, axis=-1)
    return np.where(m > 0, m + np.log(np.exp(-m) + rest), np.log1p(rest))


def _check_batch(head, X, y):
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[1] != head.dim:
        raise ShapeError(f"features must be (N, {head.dim}), got {X.shape}")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"labels must have shape ({X.shape[0]},), got {y.shape}")
    if X.shape[0] == 0:
        raise InvalidInputError("empty batch")
    if not np.issubdtype(y.dtype, np.integer):
        raise LabelError("labels must be integers")
    if y.min() < 0 or y.max() >= head.n_classes:
        raise LabelError(f"labels must lie in [0, {head.n_classes})")
    return X, y


def noisy_forward(head, X, labels, spec, rng=None, xi=None):
    """Batch loss with noise injected into the true-class logit.

    Exactly one of ``rng`` (draw fresh noise, one draw per sample unless the
    variant is ``none``) and ``xi`` (replay frozen draws) is used.  The raw
    draws are kept in the returned record, so
    ``noisy_forward(..., xi=record.xi)`` reproduces the pass exactly.

    Returns ``(loss, record)`` where ``loss`` is the batch mean.
    """
    X, y = _check_batch(head, X, labels)
    N = X.shape[0]
    if not spec.draws_noise:
        xi = np.zeros(N)
    elif xi is None:
        if rng is None:
            raise InvalidInputError(f"variant {spec.variant!r} needs an rng or frozen xi")
        xi = rng.normal(N) if spec.variant == "normal" else rng.abs_normal(N)
    else:
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (N,):
            raise ShapeError(f"frozen xi must have shape ({N},), got {xi.shape}")
    factor = noise_factor(xi, spec.variant).astype(np.result_type(head.W, X), copy=False)
    f, z, sigma, ok = noisy_logits(head.W, head.b, X, y, spec, factor)
    if spec.variant in NORM_SCALED and not np.all(ok):
        log.warning("%d sample(s) with zero-norm weight or feature; noise sigma set to 0", int(np.sum(~ok)))
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite logits in forward pass")
    losses = cross_entropy_from_logits(z, y)
    probs = stable_softmax(z)
    rows = np.arange(N)
    record = ForwardRecord(
        labels=y, logits=f, xi=xi, factor=factor, sigma=sigma,
        noisy_logit=z[rows, y], probs=probs, losses=losses, spec=spec,
    )
    return float(np.mean(losses)), record


def sigma_gradients(W_y, X, spec):
    """Derivatives of sigma with respect to ``X`` and ``W_y``, row-wise; zero where degenerate."""
    if spec.variant in ("none", "free"):
        z = np.zeros_like(X)
        return z, np.zeros_like(W_y)
    nW = np.sqrt(np.sum(W_y * W_y, axis=-1, keepdims=True))
    nX = np.sqrt(np.sum(X * X, axis=-1, keepdims=True))
    ok = (nW > 0) & (nX > 0)
    safe_W = np.where(ok, nW, 1.0)
    safe_X = np.where(ok, nX, 1.0)
    d_X = spec.alpha * X * (safe_W / safe_X)
    d_W = spec.alpha * W_y * (safe_X / safe_W)
    if spec.variant != "amplitude":
        # the -W.X term of alpha (|W||X| - W.X)
        d_X = d_X - spec.alpha * W_y
        d_W = d_W - spec.alpha * X
    return np.where(ok, d_X, 0.0), np.where(ok, d_W, 0.0)


def noisy_backward(record, head, X):
    """Gradients of the batch-mean loss with respect to features, weights and bias.

    The noise draw in ``record`` is treated as a constant.  For the true
    class the derivative of ``f_y - sigma * s`` adds ``-s * dsigma`` on top of
    the ordinary softmax terms.
    """
    X = np.asarray(X)
    y = record.labels
    if X.ndim != 2 or X.shape[0] != len(record) or X.shape[1] != head.dim:
        raise ConsistencyError(f"feature batch {X.shape} does not match record of {len(record)} samples")
    if record.logits.shape != (len(record), head.n_classes):
        raise ConsistencyError("record was produced by a head with a different class count")
    if not np.array_equal(compute_logits(head, X), record.logits):
        raise ConsistencyError("head or features changed since the forward pass")
    N = len(record)
    rows = np.arange(N)

    g = record.probs.copy()
    g[rows, y] -= 1.0
    g /= N

    dX = g @ head.W
    dW = g.T @ X
    db = g.sum(axis=0)

    if record.spec.variant != "none":
        W_y = head.W[y]
        ds_dX, ds_dW = sigma_gradients(W_y, X, record.spec)
        coef = -(g[rows, y] * record.factor)[:, None]
        dX += coef * ds_dX
        np.add.at(dW, y, coef * ds_dW)
    return dX, dW, db


def softmax_cross_entropy(logits, labels):
    """Plain softmax cross-entropy: ``(mean loss, dL/dlogits)``."""
    f = np.asarray(logits)
    y = np.asarray(labels)
    N = f.shape[0]
    loss = cross_entropy_from_logits(f, y)
    g = stable_softmax(f)
    g[np.arange(N), y] -= 1.0
    return float(np.mean(loss)), g / N


def true_class_probability(logits, labels):
    p = stable_softmax(logits)
    return p[np.arange(len(labels)), labels]


def average_prediction(head, network, dataset, batch_size=1000, noise=None, rng=None):
    """Mean true-class softmax probability over ``dataset``.

    ``network`` maps raw inputs to features; pass ``None`` when the dataset
    already holds features.  By default the logits are noise-free.  With a
    ``noise`` spec (and an ``rng`` for its draws) the probability is the one
    the noisy training loss sees, i.e. the softmax over the substituted
    logits.  Both agree for variant ``none``.
    """
    n = len(dataset)
    if n == 0:
        raise InvalidInputError("average prediction of an empty dataset")
    noisy = noise is not None and noise.draws_noise
    if noisy and rng is None:
        raise InvalidInputError("a noisy average prediction needs an rng")
    parts = []
    for start in range(0, n, batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        feats = xb if network is None else network.predict(xb)
        if noisy:
            _, rec = noisy_forward(head, feats, yb, noise, rng=rng)
            parts.append(rec.probs[np.arange(len(yb)), rec.labels])
        else:
            parts.append(true_class_probability(compute_logits(head, feats), yb))
    return stable_mean(np.concatenate(parts))


def augmentation_angle(theta, alpha, xi_abs):
    """Angle of the equivalent augmented sample.

    ``arccos((1 + a) cos(theta) - a)`` with ``a = alpha * |xi|``; the result
    is never smaller than ``theta`` on [0, pi].
    """
    a = alpha * xi_abs
    arg = (1.0 + a) * np.cos(theta) - a
    # rounding can push arg a hair above 1 when theta == 0
    if np.any(arg > 1.0 + 1e-12) or np.any(arg < -1.0):
        raise InvalidInputError(f"arccos argument {arg} outside [-1, 1]")
    return np.arccos(np.minimum(arg, 1.0))
