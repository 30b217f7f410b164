"""Network layers with hand-written backward passes.

Feature maps carry orientation channels folded into the channel axis as
``(feature, orientation)`` with orientation varying fastest, so channel
``f * |H| + j`` is feature ``f`` seen through group element ``j``.

Each layer caches what its backward pass needs during ``forward`` and
stores parameter gradients in ``self.grads`` (same keys as ``self.params``).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .filters import expand_filters, expand_filters_backward, get_plan
from .groups import GroupName, get_group

__all__ = [
    "Layer",
    "GConv3d",
    "EquivariantBatchNorm",
    "ReLU",
    "MaxPool3d",
    "Dropout",
    "OrientationPool",
    "Dense",
]


class Layer:
    """Base class; stateless layers only override forward/backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def output_shape(self, input_shape):
        """Shape propagation without computing (batch axis excluded)."""
        return input_shape

    def __repr__(self):
        return f"{type(self).__name__}()"


class GConv3d(Layer):
    """Group convolution: filter expansion followed by plain 3D convolution.

    Parameters
    ----------
    group : group name
        One of ``Z3``, ``D4``, ``D4h``, ``O``, ``Oh``.
    n_in, n_out : int
        Input and output *features*. A higher layer sees ``n_in * |H|``
        channels; every layer emits ``n_out * |H|`` channels.
    first_layer : bool
        Whether the input lacks orientation channels.
    """

    def __init__(self, group, n_in: int, n_out: int, first_layer: bool, kernel=(3, 3, 3),
                 padding: str = "same", bias: bool = True):
        super().__init__()
        self.group = GroupName.parse(group)
        self.order = get_group(self.group).order
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.first_layer = bool(first_layer)
        self.kernel = tuple(int(k) for k in kernel)
        self.spec = T.Conv3dSpec(stride=1, padding=padding)
        self.plan = get_plan(self.group, self.kernel, self.first_layer)
        self.params["filters"] = np.zeros(self.filter_shape, dtype=T.DTYPE)
        if bias:
            self.params["bias"] = np.zeros(self.n_out, dtype=T.DTYPE)
        self.zero_grad()

    @property
    def filter_shape(self):
        if self.first_layer:
            return (self.n_out, self.n_in, *self.kernel)
        return (self.n_out, self.n_in, self.order, *self.kernel)

    @property
    def in_channels(self) -> int:
        return self.n_in if self.first_layer else self.n_in * self.order

    @property
    def out_channels(self) -> int:
        return self.n_out * self.order

    def fan_in_out(self) -> tuple[int, int]:
        k = int(np.prod(self.kernel))
        return self.in_channels * k, self.out_channels * k

    def expanded_filters(self) -> np.ndarray:
        return expand_filters(self.plan, self.params["filters"])

    def forward(self, x, training=False):
        x = T.as_tensor(x, 5, "input")
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"{self!r} expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        w = self.expanded_filters()
        out = T.conv3d_forward(x, w, self.spec)
        if "bias" in self.params:
            out += np.repeat(self.params["bias"], self.order)[None, :, None, None, None]
        self._cache = (x, w)
        return out

    def backward(self, grad):
        x, w = self._cache
        grad_x, grad_w = T.conv3d_backward(grad, x, w, self.spec)
        self.grads["filters"] = expand_filters_backward(self.plan, grad_w, self.n_in)
        if "bias" in self.params:
            self.grads["bias"] = grad.sum(axis=(0, 2, 3, 4)).reshape(self.n_out, self.order).sum(axis=1)
        self._cache = None
        return grad_x

    def output_shape(self, input_shape):
        c, *spatial = input_shape
        if self.spec.padding == "valid":
            spatial = [s - k + 1 for s, k in zip(spatial, self.kernel)]
        return (self.out_channels, *spatial)

    def __repr__(self):
        kind = "first" if self.first_layer else "higher"
        return f"GConv3d({self.group.value}, {self.n_in}->{self.n_out}, {kind})"


class EquivariantBatchNorm(Layer):
    """Batch norm whose statistics and affine parameters are per feature.

    The ``|H|`` orientation channels of a feature share mean, variance, scale
    and shift, which keeps the layer equivariant.
    """

    def __init__(self, n_features: int, order: int = 1, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.n_features = int(n_features)
        self.order = int(order)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params["gamma"] = np.ones(self.n_features, dtype=T.DTYPE)
        self.params["beta"] = np.zeros(self.n_features, dtype=T.DTYPE)
        self.running_mean = np.zeros(self.n_features, dtype=T.DTYPE)
        self.running_var = np.ones(self.n_features, dtype=T.DTYPE)
        self.num_batches_tracked = 0
        self.zero_grad()

    def _grouped(self, x):
        n = x.shape[0]
        if x.shape[1] != self.n_features * self.order:
            raise ValueError(f"expected {self.n_features * self.order} channels, got {x.shape[1]}")
        return x.reshape(n, self.n_features, -1)

    def forward(self, x, training=False):
        if x.shape[0] == 0:
            raise ValueError("batch norm on an empty batch")
        xg = self._grouped(x)
        if training:
            m = xg.shape[0] * xg.shape[2]
            # float32 data, float64 accumulators
            mean = xg.sum(axis=2).sum(axis=0, dtype=np.float64) / m
            centred = xg - mean.astype(T.DTYPE)[None, :, None]
            # contiguous float32 row sums are pairwise, hence accurate
            var = np.square(centred).sum(axis=2).sum(axis=0, dtype=np.float64) / m
            unbiased = var * m / max(m - 1, 1)
            # bias-corrected moving average: the first batch replaces the
            # (0, 1) initial values instead of being blended with them
            self.num_batches_tracked += 1
            mom = self.momentum / (1.0 - (1.0 - self.momentum) ** self.num_batches_tracked)
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(T.DTYPE)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(T.DTYPE)
            inv_std = (1.0 / np.sqrt(var + self.eps)).astype(T.DTYPE)
            xhat = centred
            xhat *= inv_std[None, :, None]
        else:
            mean = self.running_mean
            inv_std = (1.0 / np.sqrt(self.running_var + np.float32(self.eps))).astype(T.DTYPE)
            xhat = (xg - mean[None, :, None]) * inv_std[None, :, None]
        out = xhat * self.params["gamma"][None, :, None] + self.params["beta"][None, :, None]
        self._cache = (xhat, inv_std, training)
        return out.reshape(x.shape)

    def backward(self, grad):
        xhat, inv_std, training = self._cache
        g = grad.reshape(xhat.shape)
        self.grads["gamma"] = (g * xhat).sum(axis=(0, 2))
        self.grads["beta"] = g.sum(axis=(0, 2))
        dxhat = g * self.params["gamma"][None, :, None]
        if training:
            m = xhat.shape[0] * xhat.shape[2]
            s1 = dxhat.sum(axis=(0, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            dx = (dxhat - s1 / m - xhat * (s2 / m)) * inv_std[None, :, None]
        else:
            dx = dxhat * inv_std[None, :, None]
        self._cache = None
        return dx.reshape(grad.shape).astype(T.DTYPE, copy=False)

    def __repr__(self):
        return f"EquivariantBatchNorm({self.n_features}x{self.order})"


class ReLU(Layer):
    def forward(self, x, training=False):
        self._cache = x
        return T.relu(x)

    def backward(self, grad):
        x, self._cache = self._cache, None
        return T.relu_backward(grad, x)


class MaxPool3d(Layer):
    """Spatial max pooling, SAME padding by default."""

    def __init__(self, kernel=2, stride=None, padding="same"):
        super().__init__()
        self.kernel = T._triple(kernel)
        self.stride = self.kernel if stride is None else T._triple(stride)
        self.padding = padding

    def forward(self, x, training=False):
        out, idx = T.max_pool3d_forward(x, self.kernel, self.stride, self.padding)
        self._cache = (idx, x.shape)
        return out

    def backward(self, grad):
        idx, shape = self._cache
        self._cache = None
        return T.max_pool3d_backward(grad, idx, shape, self.kernel, self.stride, self.padding)

    def output_shape(self, input_shape):
        c, *spatial = input_shape
        if self.padding == "same":
            return (c, *[-(-s // st) for s, st in zip(spatial, self.stride)])
        return (c, *[(s - k) // st + 1 for s, k, st in zip(spatial, self.kernel, self.stride)])

    def __repr__(self):
        return f"MaxPool3d({self.kernel})"


class Dropout(Layer):
    """Inverted dropout. The mask generator is supplied by the owner so that
    training runs are reproducible from a single seed."""

    def __init__(self, p: float = 0.3, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, training=False):
        if not training or self.p == 0.0:
            self._cache = None
            return x
        keep = (self.rng.random(x.shape) >= self.p).astype(T.DTYPE) / np.float32(1.0 - self.p)
        self._cache = keep
        return x * keep

    def backward(self, grad):
        keep, self._cache = self._cache, None
        return grad if keep is None else grad * keep

    def __repr__(self):
        return f"Dropout({self.p})"


class OrientationPool(Layer):
    """Max over the orientation channels of each feature."""

    def __init__(self, order: int):
        super().__init__()
        self.order = int(order)

    def forward(self, x, training=False):
        n, c = x.shape[:2]
        if c % self.order:
            raise ValueError(f"{c} channels are not divisible by group order {self.order}")
        xg = x.reshape(n, c // self.order, self.order, *x.shape[2:])
        idx = xg.argmax(axis=2)
        self._cache = (idx, x.shape)
        return np.take_along_axis(xg, idx[:, :, None], axis=2)[:, :, 0]

    def backward(self, grad):
        idx, shape = self._cache
        self._cache = None
        n, c = shape[:2]
        out = np.zeros((n, c // self.order, self.order, *shape[2:]), dtype=T.DTYPE)
        np.put_along_axis(out, idx[:, :, None], grad[:, :, None], axis=2)
        return out.reshape(shape)

    def output_shape(self, input_shape):
        return (input_shape[0] // self.order, *input_shape[1:])

    def __repr__(self):
        return f"OrientationPool({self.order})"


class Dense(Layer):
    """Affine map on the flattened feature vector."""

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.params["weight"] = np.zeros((self.n_out, self.n_in), dtype=T.DTYPE)
        self.params["bias"] = np.zeros(self.n_out, dtype=T.DTYPE)
        self.zero_grad()

    def fan_in_out(self):
        return self.n_in, self.n_out

    def forward(self, x, training=False):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.n_in:
            raise ValueError(f"dense layer expects {self.n_in} inputs, got {flat.shape[1]}")
        self._cache = (flat, x.shape)
        return flat @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        flat, shape = self._cache
        self._cache = None
        self.grads["weight"] = grad.T @ flat
        self.grads["bias"] = grad.sum(axis=0)
        return (grad @ self.params["weight"]).reshape(shape)

    def output_shape(self, input_shape):
        return (self.n_out,)

    def __repr__(self):
        return f"Dense({self.n_in}->{self.n_out})"
