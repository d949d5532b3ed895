"""Central finite-difference oracle for the analytic backward passes.

Analytic gradients are computed in float64.  Probe losses are evaluated in
``probe_dtype`` (extended precision by default) so that cancellation in
``L(p + h) - L(p - h)`` does not dominate the comparison for small gradient
entries.  Noise draws are frozen: every probe replays the same ``xi``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ProbeError
from .losses import (
    VARIANTS,
    HeadParams,
    NoiseSpec,
    cross_entropy_from_logits,
    noisy_backward,
    noisy_forward,
    noise_factor,
    noisy_logits,
)
from .numerics import Rng

REL_FLOOR = 1e-8
DEFAULT_H = 1e-6
PROBE_DTYPE = np.longdouble
_CHUNK = 256


def finite_diff(loss_fn, param, h=DEFAULT_H, batched=False):
    """Central-difference gradient of ``loss_fn`` with respect to ``param``.

    With ``batched=False`` the array is perturbed in place one element at a
    time (and restored) and ``loss_fn(param)`` must return a scalar.  With
    ``batched=True`` ``loss_fn`` receives a stack of perturbed copies of shape
    ``(P, *param.shape)`` and must return ``P`` losses, or a ``(P, K)``
    array of additive loss terms.  Terms are differenced before they are
    summed, so terms that a perturbation leaves untouched cancel exactly.
    """
    if h <= 0:
        raise InvalidInputError(f"step h must be positive, got {h}")
    param = np.asarray(param)
    grad = np.zeros(param.shape, dtype=np.result_type(param.dtype, np.float64))

    if not batched:
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + h
            lp = loss_fn(param)
            param[idx] = orig - h
            lm = loss_fn(param)
            param[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ProbeError(f"non-finite loss while probing element {idx}", index=idx)
            grad[idx] = (lp - lm) / (2 * h)
        return grad

    size = param.size
    flat = param.reshape(-1)
    out = grad.reshape(-1)
    for start in range(0, size, _CHUNK):
        idx = np.arange(start, min(size, start + _CHUNK))
        stack = np.broadcast_to(flat, (len(idx), size)).copy()
        stack[np.arange(len(idx)), idx] += h
        lp = np.asarray(loss_fn(stack.reshape((len(idx),) + param.shape)))
        stack[np.arange(len(idx)), idx] -= 2 * h
        lm = np.asarray(loss_fn(stack.reshape((len(idx),) + param.shape)))
        with np.errstate(invalid="ignore", over="ignore"):
            diff = lp - lm
        if diff.ndim > 1:
            diff = np.sum(diff, axis=tuple(range(1, diff.ndim)))
        bad = ~np.isfinite(diff)
        if np.any(bad):
            k = int(idx[np.argmax(bad)])
            raise ProbeError(f"non-finite loss while probing element {np.unravel_index(k, param.shape)}",
                             index=np.unravel_index(k, param.shape))
        out[idx] = diff / (2 * h)
    return grad


@dataclass
class BlockError:
    max_abs: float
    max_rel: float
    worst_index: tuple


def compare(analytic, numeric):
    """Element-wise errors, relative to ``max(|a|, |n|, 1e-8)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    k = int(np.argmax(rel))
    return BlockError(float(diff.max()), float(rel.reshape(-1)[k]), tuple(int(i) for i in np.unravel_index(k, a.shape)))


@dataclass
class GradReport:
    blocks: dict
    tol: float
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def max_rel(self):
        return max(b.max_rel for b in self.blocks.values())

    @property
    def max_abs(self):
        return max(b.max_abs for b in self.blocks.values())

    @property
    def passed(self):
        return self.max_rel < self.tol

    def worst_block(self):
        return max(self.blocks, key=lambda k: self.blocks[k].max_rel)

    def __str__(self):
        lines = [f"{self.label or 'gradcheck'}: {'PASS' if self.passed else 'FAIL'} "
                 f"max_rel={self.max_rel:.3e} tol={self.tol:.1e}"]
        for name, b in self.blocks.items():
            lines.append(f"  {name:<14s} max_abs={b.max_abs:.3e} max_rel={b.max_rel:.3e} worst={b.worst_index}")
        return "\n".join(lines)


def random_head_problem(n_classes, dim, batch, rng, min_norm=0.25, max_tries=1000):
    """Random head, features and labels with every norm of W rows and X rows >= ``min_norm``.

    Weights are scaled by ``1/sqrt(dim)`` so logits stay O(1).
    """
    for _ in range(max_tries):
        W = rng.normal((n_classes, dim)) / np.sqrt(dim)
        b = 0.1 * rng.normal(n_classes)
        X = rng.normal((batch, dim))
        y = np.minimum((rng.uniform(batch) * n_classes).astype(np.int64), n_classes - 1)
        if (np.linalg.norm(W, axis=1).min() >= min_norm and np.linalg.norm(X, axis=1).min() >= min_norm):
            return HeadParams(W, b), X, y
    raise InvalidInputError("could not sample a non-degenerate problem")


def frozen_loss(head, X, y, spec, xi, dtype=PROBE_DTYPE):
    """Return per-block loss closures for batched probing with replayed noise."""
    W = head.W.astype(dtype)
    b = head.b.astype(dtype)
    Xd = np.asarray(X).astype(dtype)
    factor = noise_factor(xi, spec.variant).astype(dtype)

    def mean_loss(Wk, bk, Xk):
        # per-sample terms of the batch mean
        _, z, _, _ = noisy_logits(Wk, bk, Xk, y, spec, factor)
        return cross_entropy_from_logits(z, y) / len(y)

    return {
        "X": (Xd, lambda s: mean_loss(W, b, s)),
        "W": (W, lambda s: mean_loss(s, b, Xd)),
        "b": (b, lambda s: mean_loss(W, s, Xd)),
    }


def check_loss_gradients(n_classes, dim, batch, variant, alpha_squared, seed, tol=1e-5,
                         h=DEFAULT_H, probe_dtype=PROBE_DTYPE):
    """Compare the head's analytic gradients with central differences on a random problem."""
    if n_classes > 10 or dim > 50 or batch > 16:
        raise InvalidInputError("gradient checks are limited to C <= 10, D <= 50, N <= 16")
    rng = Rng(seed)
    head, X, y = random_head_problem(n_classes, dim, batch, rng.substream(0))
    spec = NoiseSpec.from_alpha_squared(variant, alpha_squared)
    loss, rec = noisy_forward(head, X, y, spec, rng=rng.substream(1))
    analytic = dict(zip(("X", "W", "b"), noisy_backward(rec, head, X)))

    blocks = {}
    for name, (p, fn) in frozen_loss(head, X, y, spec, rec.xi, probe_dtype).items():
        blocks[name] = compare(analytic[name], finite_diff(fn, p, h, batched=True))
    label = f"{variant} a2={alpha_squared:g} C={n_classes} D={dim} N={batch} seed={seed}"
    meta = {"loss": loss, "variant": variant, "alpha_squared": alpha_squared, "seed": seed,
            "n_classes": n_classes, "dim": dim, "batch": batch}
    return GradReport(blocks, tol, label, meta=meta)


def random_configs(count, seed, max_classes=10, max_dim=50, max_batch=16):
    """Deterministic list of ``(C, D, N, seed)`` tuples covering the supported ranges."""
    rng = Rng(seed, (7,))
    u = rng.uniform((count, 3))
    C = 2 + (u[:, 0] * (max_classes - 1)).astype(int)
    D = 1 + (u[:, 1] * max_dim).astype(int)
    N = 1 + (u[:, 2] * max_batch).astype(int)
    return [(int(c), int(d), int(n), int(seed) * 100003 + i) for i, (c, d, n) in enumerate(zip(C, D, N))]


def sweep(variants=VARIANTS, alpha_squares=(0.0, 0.05, 0.1, 0.5, 1.0), n_configs=100, seed=0, tol=1e-5):
    """Run :func:`check_loss_gradients` over random configs; yields reports."""
    for C, D, N, s in random_configs(n_configs, seed):
        for v in variants:
            for a2 in alpha_squares:
                yield check_loss_gradients(C, D, N, v, a2, s, tol=tol)


def check_network_gradients(network, head, x, y, spec, xi, tol=1e-5, h=DEFAULT_H, probe_dtype=PROBE_DTYPE):
    """End-to-end check: every network and head parameter against central differences.

    ``xi`` freezes the noise.  Probing runs on an extended-precision copy of
    the network, one element at a time.
    """
    feats, cache = network.forward(x)
    _, rec = noisy_forward(head, feats, y, spec, xi=xi)
    dX, dW, db = noisy_backward(rec, head, feats)
    grads = network.backward(cache, dX)
    analytic = dict(grads)
    analytic["head.W"] = dW
    analytic["head.b"] = db

    net_p = network.astype(probe_dtype)
    W = head.W.astype(probe_dtype)
    b = head.b.astype(probe_dtype)
    xp = np.asarray(x).astype(probe_dtype)
    factor = noise_factor(xi, spec.variant).astype(probe_dtype)
    y = np.asarray(y)

    def loss(_=None):
        f = net_p.predict(xp)
        _, z, _, _ = noisy_logits(W, b, f, y, spec, factor)
        return np.mean(cross_entropy_from_logits(z, y))

    params = dict(net_p.params)
    params["head.W"] = W
    params["head.b"] = b
    blocks = {name: compare(analytic[name], finite_diff(loss, p, h)) for name, p in params.items()}
    return GradReport(blocks, tol, f"network {spec.variant} a={spec.alpha:g}")
