"""Mini-batch SGD with momentum, step learning-rate decay and weight decay.

Classification error always uses the plain softmax on noise-free logits.
The saturation proxy ``p_bar`` is measured by default on the softmax the
training loss actually sees (noise injected, fresh draws from a dedicated
stream); ``pbar_mode="clean"`` measures it on noise-free logits instead.
Both modes coincide for variant ``none``.  A training
run is a pure function of its :class:`TrainConfig`: the seed feeds three
independent streams (parameter init, batch shuffling, loss noise), so
changing the noise variant never changes initial weights or batch order.
"""

import time
from dataclasses import dataclass, field, fields

import numpy as np

from .data import DatasetSpec, load_datasets
from .errors import DivergedError, InvalidInputError, NonFiniteError
from .losses import (
    HeadParams,
    NoiseSpec,
    average_prediction,
    compute_logits,
    cross_entropy_from_logits,
    noisy_backward,
    noisy_forward,
    true_class_probability,
)
from .network import Network, architecture
from .numerics import Rng, stable_mean

INIT_STREAM, SHUFFLE_STREAM, NOISE_STREAM, PBAR_STREAM = 0, 1, 2, 3
PBAR_MODES = ("noisy", "clean")
METRIC_FIELDS = ("iteration", "loss", "train_err", "test_err", "p_bar", "lr", "ms")


@dataclass(frozen=True)
class LRSchedule:
    base: float
    drops: tuple = ()
    factor: float = 10.0


def lr_at(schedule, iteration):
    """Step decay: divide by ``factor`` once for every drop iteration ``<= iteration``."""
    if iteration < 0:
        raise InvalidInputError(f"iteration must be >= 0, got {iteration}")
    n = sum(1 for d in schedule.drops if iteration >= d)
    return schedule.base / schedule.factor ** n


def decays(name):
    """Weight decay applies to weight matrices and kernels only, never to biases or PReLU slopes."""
    return name.endswith(".weight") or name == "head.W"


def sgd_step(params, grads, velocity, lr, momentum=0.0, weight_decay=0.0, iteration=None):
    """In-place update ``v <- momentum v - lr (g + wd p)``, ``p <- p + v`` for every named array."""
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite gradient for {name} at iteration {iteration}", iteration)
        if weight_decay and decays(name):
            g = g + weight_decay * p
        v = velocity[name]
        v *= momentum
        v -= lr * g
        p += v
    return params


@dataclass
class TrainConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    layers: tuple = ("mlp",)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    batch_size: int = 64
    total_iterations: int = 2000
    base_lr: float = 0.05
    lr_drops: tuple = None
    lr_factor: float = 10.0
    weight_decay: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    pbar_interval: int = 100
    dtype: str = "float32"
    pbar_mode: str = "noisy"

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        if self.total_iterations < 0:
            raise InvalidInputError("total_iterations must be >= 0")
        if not self.base_lr > 0:
            raise InvalidInputError("base_lr must be positive")
        if self.lr_factor <= 0:
            raise InvalidInputError("lr_factor must be positive")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.pbar_interval < 1:
            raise InvalidInputError("pbar_interval must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")
        if np.dtype(self.dtype) not in (np.float32, np.float64):
            raise InvalidInputError("dtype must be float32 or float64")
        if self.pbar_mode not in PBAR_MODES:
            raise InvalidInputError(f"pbar_mode must be one of {PBAR_MODES}, got {self.pbar_mode!r}")
        self.layers = tuple(self.layers)
        if self.lr_drops is None:
            self.lr_drops = (int(round(0.75 * self.total_iterations)),) if self.total_iterations else ()
        self.lr_drops = tuple(int(d) for d in self.lr_drops)

    @property
    def schedule(self):
        return LRSchedule(self.base_lr, self.lr_drops, self.lr_factor)

    def resolved_layers(self):
        if len(self.layers) == 1 and self.layers[0] in ("mlp", "cnn"):
            return architecture(self.layers[0])
        return list(self.layers)

    def as_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dataset":
                v = {g.name: getattr(v, g.name) for g in fields(v)}
            elif f.name == "noise":
                v = {"variant": v.variant, "alpha_squared": v.alpha_squared}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


@dataclass
class MetricsRecord:
    iteration: int
    loss: float
    train_err: float
    test_err: float
    p_bar: float
    lr: float
    ms: float = 0.0
    p_bar_clean: float = float("nan")

    def row(self):
        return [getattr(self, k) for k in METRIC_FIELDS]


@dataclass
class TrainResult:
    metrics: list
    network: Network
    head: HeadParams
    config: TrainConfig
    wall_time: float = 0.0

    def params(self):
        return {**self.network.params, **self.head.params()}


def _logits(net, head, ds, chunk=1000):
    return np.concatenate([compute_logits(head, net.predict(ds.images[s:s + chunk]))
                           for s in range(0, len(ds), chunk)])


def error_rate(logits, labels):
    """Percentage of argmax mistakes; ties go to the lowest class index."""
    return 100.0 * int(np.count_nonzero(np.argmax(logits, axis=1) != labels)) / len(labels)


def evaluate(net, head, dataset):
    """Test error (%) with the plain softmax classifier."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    return error_rate(_logits(net, head, dataset), dataset.labels)


def measure(net, head, train_set, test_set, noise=None, rng=None):
    """(plain CE loss on train, train error %, test error %, p_bar, clean p_bar).

    ``p_bar`` is the noisy average prediction when ``noise`` and ``rng`` are
    given and the clean one otherwise.
    """
    f = _logits(net, head, train_set).astype(np.float64)
    y = train_set.labels
    loss = float(np.mean(cross_entropy_from_logits(f, y)))
    clean = stable_mean(true_class_probability(f, y))
    p_bar = clean
    if noise is not None and noise.draws_noise:
        p_bar = average_prediction(head, net, train_set, noise=noise, rng=rng)
    test_err = evaluate(net, head, test_set) if test_set is not None and len(test_set) else float("nan")
    return loss, error_rate(f, y), test_err, p_bar, clean


def batches(n, batch_size, rng):
    """Endless stream of index batches; each epoch is a fresh permutation, the ragged tail is dropped."""
    size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - size + 1, size):
            yield perm[s:s + size]


def train(config, data=None, timing=False, callback=None):
    """Run SGD as described by ``config``.

    ``data`` may hold a preloaded ``(train, test)`` pair; otherwise
    ``config.dataset`` is loaded.  Metrics are recorded at iteration 0, every
    ``pbar_interval`` updates and after the last update.  ``ms`` holds
    elapsed wall-clock milliseconds when ``timing`` is true and 0 otherwise,
    which keeps metric tables byte-for-byte reproducible.
    """
    t0 = time.perf_counter()
    train_set, test_set = data if data is not None else load_datasets(config.dataset)
    if len(train_set) == 0:
        raise InvalidInputError("empty training set")
    dtype = np.dtype(config.dtype)
    train_set = train_set.astype(dtype)
    test_set = test_set.astype(dtype) if test_set is not None else None

    root = Rng(config.seed)
    init_rng = root.substream(INIT_STREAM)
    net = Network.build(config.resolved_layers(), train_set.sample_shape, init_rng, dtype)
    head = HeadParams.he_normal(train_set.class_count, net.out_dim, init_rng, dtype)
    params = {**net.params, **head.params()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    noise_rng = root.substream(NOISE_STREAM)
    stream = batches(len(train_set), config.batch_size, root.substream(SHUFFLE_STREAM))
    schedule = config.schedule

    def record(it):
        ms = 1000.0 * (time.perf_counter() - t0) if timing else 0.0
        noise = config.noise if config.pbar_mode == "noisy" else None
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, train_err, test_err, p_bar, clean = measure(net, head, train_set, test_set, noise,
                                                                  root.substream(PBAR_STREAM, it))
        except (NonFiniteError, InvalidInputError) as exc:
            raise DivergedError(f"evaluation failed at iteration {it}: {exc}", it) from None
        m = MetricsRecord(it, loss, train_err, test_err, p_bar, lr_at(schedule, it), ms, clean)
        if not np.isfinite(m.loss):
            raise DivergedError(f"training loss is not finite at iteration {it}", it)
        if callback is not None:
            callback(m)
        return m

    metrics = [record(0)]
    for it in range(config.total_iterations):
        idx = next(stream)
        xb, yb = train_set.images[idx], train_set.labels[idx]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                feats, cache = net.forward(xb)
                loss, rec = noisy_forward(head, feats, yb, config.noise, rng=noise_rng)
        except NonFiniteError as exc:
            raise DivergedError(f"{exc} at iteration {it}", it) from None
        if not np.isfinite(loss):
            raise DivergedError(f"non-finite batch loss at iteration {it}", it)
        dX, dW, db = noisy_backward(rec, head, feats)
        grads = dict(net.backward(cache, dX))
        grads["head.W"], grads["head.b"] = dW, db
        sgd_step(params, grads, velocity, lr_at(schedule, it), config.momentum, config.weight_decay, it)
        net.mark_updated()
        done = it + 1
        if done % config.pbar_interval == 0 or done == config.total_iterations:
            metrics.append(record(done))
    return TrainResult(metrics, net, head, config, time.perf_counter() - t0)
