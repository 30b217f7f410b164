"""Group actions on volumes and feature maps, and an equivariance checker."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .groups import GroupName, PermutationRep, get_group, get_rho, transform_array
from .layers import EquivariantBatchNorm, GConv3d, ReLU

__all__ = [
    "rotate_volume",
    "act_on_features",
    "random_gconv_stack",
    "EquivarianceReport",
    "check_equivariance",
]


def rotate_volume(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a group element to the spatial axes of ``(n, c, D, H, W)``."""
    return np.ascontiguousarray(transform_array(x, matrix))


def act_on_features(y: np.ndarray, h: int, group, rho: PermutationRep | None = None) -> np.ndarray:
    """Transform a feature map with orientation channels by element ``h``.

    Spatial axes are rotated and within each feature the orientation channels
    are shuffled: slot ``o`` receives channel ``rho[h][o]``.
    """
    group = get_group(group) if not hasattr(group, "elements") else group
    rho = rho if rho is not None else get_rho(group.name)
    n, c = y.shape[:2]
    order = group.order
    yr = rotate_volume(y, group.elements[h])
    yg = yr.reshape(n, c // order, order, *yr.shape[2:])
    return np.ascontiguousarray(np.take(yg, rho.perms[h], axis=2).reshape(yr.shape))


def random_gconv_stack(group, depth: int, widths=(2, 3, 2), n_in: int = 1, rng=None,
                       integer: bool = False, with_bn: bool = False, padding: str = "same"):
    """Build ``depth`` gconv layers with random filters (ReLU between them)."""
    rng = np.random.default_rng(rng)
    order = get_group(group).order
    layers = []
    c_in = n_in
    for i in range(depth):
        w = widths[i % len(widths)]
        conv = GConv3d(group, c_in, w, first_layer=(i == 0), padding=padding)
        if integer:
            # small integers keep every partial sum exactly representable in float32
            conv.params["filters"][...] = rng.integers(-1, 2, size=conv.filter_shape)
            conv.params["bias"][...] = rng.integers(-1, 2, size=w)
        else:
            fan_in = conv.fan_in_out()[0]
            conv.params["filters"][...] = rng.standard_normal(conv.filter_shape) / np.sqrt(fan_in)
            conv.params["bias"][...] = 0.1 * rng.standard_normal(w)
        layers.append(conv)
        if with_bn:
            bn = EquivariantBatchNorm(w, order)
            bn.params["gamma"][...] = rng.uniform(0.5, 1.5, w)
            bn.params["beta"][...] = rng.standard_normal(w)
            bn.running_mean[...] = rng.standard_normal(w)
            bn.running_var[...] = rng.uniform(0.5, 2.0, w)
            layers.append(bn)
        if i < depth - 1:
            layers.append(ReLU())
        c_in = w
    return layers


def run_stack(layers, x):
    for layer in layers:
        x = layer.forward(x, training=False)
    return x


@dataclass
class EquivarianceReport:
    group: GroupName
    depth: int
    errors: dict  # element index -> (integer max abs err, float max abs err)

    @property
    def worst_integer(self) -> float:
        return max((e[0] for e in self.errors.values()), default=0.0)

    @property
    def worst_float(self) -> float:
        return max((e[1] for e in self.errors.values()), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.worst_integer == 0.0 and self.worst_float <= tolerance


def check_equivariance(group, depth: int = 1, trials: int = 1, size: int = 7, seed: int = 0,
                       rho: PermutationRep | None = None, with_bn: bool = False) -> EquivarianceReport:
    """Measure ``max |f(h x) - h f(x)|`` for every ``h``, with integer and float data.

    ``rho`` overrides the representation used on the output side, which is
    how a corrupted representation can be injected as a negative control.
    """
    g = get_group(group)
    rng = np.random.default_rng(seed)
    errors = {h: [0.0, 0.0] for h in range(g.order)}
    for _ in range(trials):
        for slot, integer in enumerate((True, False)):
            layers = random_gconv_stack(g.name, depth, rng=rng, integer=integer, with_bn=with_bn and not integer)
            if integer:
                x = rng.integers(-2, 3, size=(2, 1, size, size, size)).astype(np.float32)
            else:
                x = rng.standard_normal((2, 1, size, size, size)).astype(np.float32)
            fx = run_stack(layers, x)
            for h in range(g.order):
                lhs = run_stack(layers, rotate_volume(x, g.elements[h]))
                rhs = act_on_features(fx, h, g, rho)
                err = float(np.max(np.abs(lhs - rhs)))
                errors[h][slot] = max(errors[h][slot], err)
    return EquivarianceReport(g.name, depth, {h: tuple(e) for h, e in errors.items()})
