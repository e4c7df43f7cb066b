"""Small numpy layer stack with hand-written backward passes, MSE and Adam.

Layers share a minimal protocol: ``forward(x)`` caches what ``backward``
needs, ``backward(grad)`` fills ``self.grads`` and returns the input gradient.
Parameters live in ``self.params`` (name -> array) so optimizers and
checkpoints can walk them in a fixed order.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def spec(self):
        return {"kind": self.kind}

    def leaves(self):
        yield self

    def parameters(self):
        for layer in self.leaves():
            for name in layer.params:
                yield layer, name

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        return self._cache

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


def _uniform(rng, limit, shape, dtype):
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, init="he", rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features, self.init = in_features, out_features, init
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "he":
            limit = np.sqrt(6.0 / in_features)
        elif init == "xavier":
            limit = np.sqrt(6.0 / (in_features + out_features))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params["W"] = _uniform(rng, limit, (in_features, out_features), dtype)
        self.params["b"] = np.zeros(out_features, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features, "init": self.init}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self!r}: expected (batch, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._need_cache()
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x
        return np.maximum(x, 0)

    def backward(self, grad):
        x = self._need_cache()
        return grad * (x > 0)

    def margin(self):
        """Smallest |pre-activation| seen in the last forward pass."""
        return float(np.abs(self._need_cache()).min())


class Conv2D(Layer):
    """Valid (unpadded) square convolution on NCHW input."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=3, stride=2, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.params["W"] = _uniform(rng, np.sqrt(6.0 / fan_in), (out_channels, in_channels, kernel, kernel), dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)

    def spec(self):
        return {
            "kind": self.kind,
            "in": self.in_channels,
            "out": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
        }

    def out_size(self, h, w):
        return (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1

    def _windows(self, xs, ho, wo):
        s, k = self.stride, self.kernel
        for i in range(k):
            for j in range(k):
                yield i, j, (slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self!r}: expected (batch, {self.in_channels}, H, W), got {x.shape}")
        ho, wo = self.out_size(x.shape[2], x.shape[3])
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self!r}: input {x.shape[2:]} smaller than the kernel")
        xs = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        W = self.params["W"]
        out = np.zeros((x.shape[0], ho, wo, self.out_channels), dtype=np.result_type(x, W))
        for i, j, win in self._windows(xs, ho, wo):
            out += xs[win] @ W[:, :, i, j].T
        out += self.params["b"]
        self._cache = (xs, x.shape)
        return out.transpose(0, 3, 1, 2)

    def backward(self, grad):
        xs, shape = self._need_cache()
        ho, wo = grad.shape[2], grad.shape[3]
        g = np.ascontiguousarray(grad.transpose(0, 2, 3, 1))
        g2 = g.reshape(-1, self.out_channels)
        W = self.params["W"]
        dW = np.zeros_like(W)
        dxs = np.zeros(xs.shape, dtype=np.result_type(xs, grad))
        for i, j, win in self._windows(xs, ho, wo):
            dW[:, :, i, j] = g2.T @ xs[win].reshape(-1, self.in_channels)
            dxs[win] += g @ W[:, :, i, j]
        self.grads["W"] = dW
        self.grads["b"] = g2.sum(axis=0)
        return dxs.transpose(0, 3, 1, 2)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"{self!r}: expected NCHW input, got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        shape = self._need_cache()
        return np.broadcast_to(grad[:, :, None, None] / (shape[2] * shape[3]), shape).copy()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


class Concat(Layer):
    """Joins several (batch, features) inputs along the feature axis."""

    kind = "concat"

    def forward(self, *xs):
        if len({x.shape[0] for x in xs}) != 1:
            raise ShapeError(f"concat: batch sizes differ: {[x.shape for x in xs]}")
        self._cache = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        widths = self._need_cache()
        return np.split(grad, np.cumsum(widths)[:-1], axis=1)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def spec(self):
        return {"kind": self.kind, "layers": [layer.spec() for layer in self.layers]}

    def leaves(self):
        for layer in self.layers:
            yield from layer.leaves()

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def __len__(self):
        return len(self.layers)


def build_layer(spec, rng=None, dtype=np.float32):
    """Inverse of ``Layer.spec``; parameters are freshly initialized."""
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["in"], spec["out"], spec.get("init", "he"), rng, dtype)
    if kind == "conv":
        return Conv2D(spec["in"], spec["out"], spec["kernel"], spec["stride"], rng, dtype)
    if kind == "sequential":
        return Sequential(build_layer(s, rng, dtype) for s in spec["layers"])
    simple = {"relu": ReLU, "gap": GlobalAvgPool, "flatten": Flatten, "concat": Concat}
    if kind not in simple:
        raise ValueError(f"unknown layer kind {kind!r}")
    return simple[kind]()


def mlp(widths, rng=None, dtype=np.float32, linear_output=False):
    """Dense/ReLU stack over ``widths``; the last layer is linear if requested."""
    layers = []
    for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = k == len(widths) - 2
        if last and linear_output:
            layers.append(Dense(a, b, "xavier", rng, dtype))
        else:
            layers += [Dense(a, b, "he", rng, dtype), ReLU()]
    return Sequential(layers)


def param_arrays(net):
    return [layer.params[name] for layer, name in net.parameters()]


def grad_arrays(net):
    return [layer.grads[name] for layer, name in net.parameters()]


def count_params(net):
    return sum(p.size for p in param_arrays(net))


# ------------------------------------------------------------------- losses


def mse_loss(pred, target):
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


# ---------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam; ``beta1`` plays the role of momentum."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ShapeError(f"adam: parameter {p.shape} vs gradient {g.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)
        return params


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)


# ------------------------------------------------------------ verification


def relu_margin(net):
    margins = [layer.margin() for layer in net.leaves() if isinstance(layer, ReLU)]
    return min(margins) if margins else np.inf


def grad_check(net, inputs, target, eps=1e-5):
    """Max relative error between backprop and central differences over all parameters.

    ``net.forward(*inputs)`` must return the prediction compared to
    ``target`` by MSE. Run in float64.
    """
    if not isinstance(inputs, (tuple, list)):
        inputs = (inputs,)
    pred = net.forward(*inputs)
    _, g = mse_loss(pred, target)
    net.backward(g)
    analytic = [a.copy() for a in grad_arrays(net)]
    worst = 0.0
    for p, a in zip(param_arrays(net), analytic):
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        flat = p.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up, _ = mse_loss(net.forward(*inputs), target)
            flat[k] = old - eps
            down, _ = mse_loss(net.forward(*inputs), target)
            flat[k] = old
            num = (up - down) / (2 * eps)
            ana = a.reshape(-1)[k]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# -------------------------------------------------------------- checkpoints

_MAGIC = b"BEVCKPT1"


def save_checkpoint(path, header, params):
    """JSON header followed by a little-endian float32 blob of ``params`` in order."""
    header = dict(header)
    header["param_shapes"] = [list(p.shape) for p in params]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for p in params:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        params = []
        for shape in header["param_shapes"]:
            count = int(np.prod(shape)) if shape else 1
            params.append(np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).copy())
    return header, params
