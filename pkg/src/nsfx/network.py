"""Small feature extractors: dense, PReLU, 3x3 convolution, 2x2 max pooling, flatten.

Layouts are NCHW for images and (N, F) for vectors.  Every layer works in the
dtype of its parameters, so a network can be cast to extended precision for
gradient checking.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, InvalidInputError, ShapeError
from .numerics import check_finite

PRELU_INIT = 0.25
KINDS = ("dense", "prelu", "conv2d", "maxpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor.

    ``dense``: ``in_dim``, ``out_dim``; ``prelu``: ``channels``;
    ``conv2d``: ``in_ch``, ``out_ch`` (3x3, stride 1, pad 1); ``maxpool`` and
    ``flatten`` take no arguments.
    """

    kind: str
    args: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        want = {"dense": 2, "prelu": 1, "conv2d": 2, "maxpool": 0, "flatten": 0}[self.kind]
        if len(self.args) != want or any(int(a) < 1 for a in self.args):
            raise InvalidInputError(f"{self.kind} takes {want} positive integer argument(s), got {self.args}")
        object.__setattr__(self, "args", tuple(int(a) for a in self.args))

    @classmethod
    def parse(cls, text):
        """Parse ``"dense(784, 128)"``, ``"prelu(128)"``, ``"maxpool"`` and the like."""
        text = text.strip()
        if "(" in text:
            if not text.endswith(")"):
                raise InvalidInputError(f"malformed layer descriptor {text!r}")
            kind, inner = text[:-1].split("(", 1)
            try:
                args = tuple(int(a) for a in inner.split(",") if a.strip())
            except ValueError:
                raise InvalidInputError(f"malformed layer descriptor {text!r}") from None
        else:
            kind, args = text, ()
        return cls(kind.strip(), args)

    def __str__(self):
        return f"{self.kind}({', '.join(map(str, self.args))})" if self.args else self.kind

    @property
    def has_params(self):
        return self.kind in ("dense", "prelu", "conv2d")


def param_shapes(layer):
    if layer.kind == "dense":
        n_in, n_out = layer.args
        return {"weight": (n_out, n_in), "bias": (n_out,)}
    if layer.kind == "conv2d":
        c_in, c_out = layer.args
        return {"weight": (c_out, c_in, 3, 3), "bias": (c_out,)}
    if layer.kind == "prelu":
        return {"slope": (layer.args[0],)}
    return {}


def he_init(layer, rng, dtype=np.float64):
    """Initial parameters for ``layer``: weights ~ N(0, 2 / fan_in), biases 0, PReLU slopes 0.25."""
    shapes = param_shapes(layer)
    if not shapes:
        raise InvalidInputError(f"{layer.kind} has no parameters")
    if "slope" in shapes:
        return {"slope": np.full(shapes["slope"], PRELU_INIT, dtype)}
    w_shape = shapes["weight"]
    fan_in = int(np.prod(w_shape[1:]))
    W = rng.normal(w_shape) * np.sqrt(2.0 / fan_in)
    return {"weight": W.astype(dtype), "bias": np.zeros(shapes["bias"], dtype)}


def output_shape(layer, in_shape):
    """Per-sample output shape; raises ShapeError when ``in_shape`` does not fit."""
    k = layer.kind
    if k == "dense":
        if in_shape != (layer.args[0],):
            raise ShapeError(f"{layer} expects input ({layer.args[0]},), got {in_shape}")
        return (layer.args[1],)
    if k == "prelu":
        if len(in_shape) < 1 or in_shape[0] != layer.args[0]:
            raise ShapeError(f"{layer} expects {layer.args[0]} channels, got input {in_shape}")
        return in_shape
    if k == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != layer.args[0]:
            raise ShapeError(f"{layer} expects input ({layer.args[0]}, H, W), got {in_shape}")
        return (layer.args[1],) + in_shape[1:]
    if k == "maxpool":
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W), got {in_shape}")
        if in_shape[1] % 2 or in_shape[2] % 2:
            raise ShapeError(f"maxpool needs even spatial dims, got {in_shape[1:]}")
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)
    return (int(np.prod(in_shape)),)


# -- layer kernels ----------------------------------------------------------

def _dense_fwd(p, x):
    return x @ p["weight"].T + p["bias"], x


def _dense_bwd(p, x, dy):
    return dy @ p["weight"], {"weight": dy.T @ x, "bias": dy.sum(axis=0)}


def _slope_shape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def _prelu_fwd(p, x):
    a = p["slope"].reshape(_slope_shape(x))
    return np.maximum(x, 0) + a * np.minimum(x, 0), x


def _prelu_bwd(p, x, dy):
    a = p["slope"].reshape(_slope_shape(x))
    pos = x > 0
    dx = np.where(pos, dy, a * dy)
    axes = tuple(i for i in range(x.ndim) if i != 1)
    return dx, {"slope": np.sum(dy * np.minimum(x, 0), axis=axes)}


def _im2col(x):
    """(N, C, H, W) -> (N, H, W, C*9) patches of the zero-padded input."""
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((N, C, 9, H, W), dtype=x.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, :, k] = xp[:, :, i:i + H, j:j + W]
    return cols.transpose(0, 3, 4, 1, 2).reshape(N, H, W, C * 9)


def _conv_fwd(p, x):
    W = p["weight"]
    cols = _im2col(x)
    y = cols @ W.reshape(W.shape[0], -1).T + p["bias"]
    return y.transpose(0, 3, 1, 2), cols


def _conv_bwd(p, cols, dy):
    W = p["weight"]
    c_out, c_in = W.shape[:2]
    N, _, H, Wd = dy.shape
    g = dy.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dW = (g.T @ cols.reshape(-1, c_in * 9)).reshape(W.shape)
    db = g.sum(axis=0)
    dcols = (g @ W.reshape(c_out, -1)).reshape(N, H, Wd, c_in, 9).transpose(0, 3, 4, 1, 2)
    dxp = np.zeros((N, c_in, H + 2, Wd + 2), dtype=dy.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, :, i:i + H, j:j + Wd] += dcols[:, :, k]
    return dxp[:, :, 1:-1, 1:-1], {"weight": dW, "bias": db}


def _pool_fwd(p, x):
    N, C, H, W = x.shape
    win = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    arg = np.argmax(win, axis=-1)  # first maximum wins ties
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg)


def _pool_bwd(p, cache, dy):
    shape, arg = cache
    N, C, H, W = shape
    win = np.zeros(dy.shape + (4,), dtype=dy.dtype)
    np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
    dx = win.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return dx, {}


def _flat_fwd(p, x):
    return x.reshape(x.shape[0], -1), x.shape


def _flat_bwd(p, shape, dy):
    return dy.reshape(shape), {}


_KERNELS = {
    "dense": (_dense_fwd, _dense_bwd),
    "prelu": (_prelu_fwd, _prelu_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "maxpool": (_pool_fwd, _pool_bwd),
    "flatten": (_flat_fwd, _flat_bwd),
}


@dataclass
class ForwardCache:
    input_shape: tuple
    entries: list = field(default_factory=list)
    token: int = 0


class Network:
    """Ordered layer stack mapping raw inputs to a flat feature vector.

    Parameters live in ``params`` under names like ``"0.weight"`` and
    ``"1.slope"``; ``grads`` holds buffers of the same shapes filled by
    :meth:`backward`.
    """

    def __init__(self, layers, input_shape, params, dtype=None):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.parse(l) for l in layers]
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = output_shape(layer, shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"network output must be a flat vector, got per-sample shape {shape}")
        self.params = params
        expected = {f"{i}.{n}": shp for i, layer in enumerate(self.layers)
                    for n, shp in param_shapes(layer).items()}
        if set(expected) != set(params):
            raise ShapeError(f"parameter names {sorted(params)} do not match layers {sorted(expected)}")
        for key, shp in expected.items():
            if params[key].shape != shp:
                raise ShapeError(f"parameter {key} has shape {params[key].shape}, expected {shp}")
        self.grads = {k: np.zeros_like(v) for k, v in params.items()}
        if dtype is None:
            dtype = next(iter(params.values())).dtype if params else np.float64
        self.dtype = np.dtype(dtype)
        self._version = 0

    @classmethod
    def build(cls, layers, input_shape, rng, dtype=np.float64):
        layers = [l if isinstance(l, LayerSpec) else LayerSpec.parse(l) for l in layers]
        params = {}
        for i, layer in enumerate(layers):
            if layer.has_params:
                for name, value in he_init(layer, rng, dtype).items():
                    params[f"{i}.{name}"] = value
        return cls(layers, input_shape, params, dtype)

    @property
    def out_dim(self):
        return self.shapes[-1][0]

    def astype(self, dtype):
        return Network(self.layers, self.input_shape, {k: v.astype(dtype) for k, v in self.params.items()}, dtype)

    def _layer_params(self, i):
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def _prepare(self, x):
        x = np.asarray(x)
        n = x.shape[0] if x.ndim else 0
        if x.ndim == 0 or x[0].size != int(np.prod(self.input_shape)):
            raise ShapeError(f"input samples must have {int(np.prod(self.input_shape))} values "
                             f"(shape {self.input_shape}), got {x.shape}")
        return x.reshape((n,) + self.input_shape).astype(self.dtype, copy=False)

    def forward(self, x):
        """Features (N, D) and a cache for :meth:`backward`."""
        h = self._prepare(x)
        cache = ForwardCache(h.shape, token=self._version)
        for i, layer in enumerate(self.layers):
            fwd, _ = _KERNELS[layer.kind]
            h, c = fwd(self._layer_params(i), h)
            cache.entries.append(c)
        check_finite(h, "network output")
        return h, cache

    def predict(self, x):
        return self.forward(x)[0]

    def backward(self, cache, d_out):
        """Fill ``self.grads`` from the upstream gradient ``d_out`` (N, D); returns the grads dict.

        The gradient with respect to the input is stored as ``self.input_grad``.
        """
        if cache.token != self._version or len(cache.entries) != len(self.layers):
            raise ConsistencyError("cache does not belong to the current parameters of this network")
        d = np.asarray(d_out)
        if d.shape != (cache.input_shape[0], self.out_dim):
            raise ConsistencyError(f"upstream gradient shape {d.shape} does not match the cached batch")
        for i in range(len(self.layers) - 1, -1, -1):
            _, bwd = _KERNELS[self.layers[i].kind]
            d, g = bwd(self._layer_params(i), cache.entries[i], d)
            for name, value in g.items():
                self.grads[f"{i}.{name}"] = value
        self.input_grad = d
        return self.grads

    def mark_updated(self):
        """Invalidate outstanding caches after an in-place parameter update."""
        self._version += 1


REFERENCE_CNN = ["conv2d(1, 8)", "prelu(8)", "maxpool", "conv2d(8, 16)", "prelu(16)", "maxpool",
                 "flatten", "dense(784, 64)", "prelu(64)"]
REFERENCE_MLP = ["flatten", "dense(784, 128)", "prelu(128)", "dense(128, 64)"]


def architecture(name):
    """Layer list for ``"cnn"`` or ``"mlp"`` (28x28 single-channel input, D = 64)."""
    table = {"cnn": REFERENCE_CNN, "mlp": REFERENCE_MLP}
    if name not in table:
        raise InvalidInputError(f"unknown architecture {name!r}; expected one of {sorted(table)}")
    return [LayerSpec.parse(s) for s in table[name]]
