"""Stateful layers and the sequential network container built on them."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from fedifl.nn import functional as F


class Layer:
    """Base layer: holds parameters, buffers and the cache of the last forward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True
        self.frozen = False
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, upstream):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _store_grads(self, g: dict):
        for name, p in self.params.items():
            # frozen layers report exactly-zero parameter gradients
            self.grads[name] = np.zeros_like(p) if self.frozen else g[name].astype(p.dtype, copy=False)
        return g["input"]

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._cache


def _uniform(rng, shape, fan_in, dtype):
    s = np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


class Conv1d(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng, stride: int = 1,
                 padding: str = "same", dtype=np.float32):
        super().__init__()
        fan_in = in_ch * k
        self.params["kernel"] = _uniform(rng, (out_ch, in_ch, k), fan_in, dtype)
        self.params["bias"] = _uniform(rng, (out_ch,), fan_in, dtype)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        out, self._cache = F.conv1d(x, self.params["kernel"], self.params["bias"], self.stride, self.padding)
        return out

    def backward(self, upstream):
        return self._store_grads(F.conv1d_backward(upstream, self._need_cache()))


class MaxPool1d(Layer):
    def __init__(self, k: int = 2, stride: int = 2):
        super().__init__()
        self.k, self.stride = k, stride

    def forward(self, x):
        out, self._cache = F.maxpool1d(x, self.k, self.stride)
        return out

    def backward(self, upstream):
        return F.maxpool1d_backward(upstream, self._need_cache())["input"]


class BatchNorm1d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.params["gain"] = np.ones(channels, dtype=dtype)
        self.params["shift"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        mode = "train" if self.training else "eval"
        out, self._cache = F.batchnorm1d(
            x, self.params["gain"], self.params["shift"],
            self.buffers["running_mean"], self.buffers["running_var"],
            mode, self.momentum, self.eps,
        )
        return out

    def backward(self, upstream):
        return self._store_grads(F.batchnorm1d_backward(upstream, self._need_cache()))


class ReLU(Layer):
    def forward(self, x):
        out, self._cache = F.relu(x)
        return out

    def backward(self, upstream):
        return F.relu_backward(upstream, self._need_cache())["input"]


class Sigmoid(Layer):
    def forward(self, x):
        self._cache = F.sigmoid(x)
        return self._cache

    def backward(self, upstream):
        return F.sigmoid_backward(upstream, self._need_cache())["input"]


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float32):
        super().__init__()
        self.params["weight"] = _uniform(rng, (out_dim, in_dim), in_dim, dtype)
        self.params["bias"] = _uniform(rng, (out_dim,), in_dim, dtype)

    def forward(self, x):
        out, self._cache = F.fc(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, upstream):
        return self._store_grads(F.fc_backward(upstream, self._need_cache()))


class Reshape(Layer):
    """Reshape the non-batch axes; ``shape=(-1,)`` flattens."""

    def __init__(self, shape: tuple[int, ...]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, upstream):
        return upstream.reshape(self._need_cache())


class Sequential:
    """Ordered stack of named layers with flat ``"<layer>.<param>"`` naming."""

    def __init__(self, layers: Iterable[tuple[str, Layer]]):
        self.layers: list[tuple[str, Layer]] = list(layers)
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, upstream):
        for _, layer in reversed(self.layers):
            upstream = layer.backward(upstream)
        return upstream

    @property
    def frozen(self) -> bool:
        return all(layer.frozen for _, layer in self.layers)

    @frozen.setter
    def frozen(self, flag: bool):
        for _, layer in self.layers:
            layer.frozen = bool(flag)

    def train(self):
        for _, layer in self.layers:
            layer.training = True
        return self

    def eval(self):
        for _, layer in self.layers:
            layer.training = False
        return self

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable parameters (live references)."""
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.grads.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Parameters plus buffers (e.g. batch-norm running statistics)."""
        out = {}
        for n, layer in self.layers:
            for k, v in layer.params.items():
                out[f"{n}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{n}.{k}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        """Copy values into the existing arrays; shapes must match exactly."""
        own = self.state()
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise KeyError(f"state keys differ: {missing}")
        for k, dst in own.items():
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise F.ShapeError(f"{k}: shape {src.shape} != {dst.shape}", src.shape, dst.shape)
            dst[...] = src
        return self

    def zero_grad(self):
        for _, layer in self.layers:
            layer.grads = {}
