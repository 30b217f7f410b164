"""Precomputed index maps that turn a canonical filter bank into its |H| copies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .groups import GroupName, PermutationRep, SymmetryGroup, get_group, get_rho, transform_array

__all__ = [
    "FilterTransformPlan",
    "spatial_permutation",
    "build_plan",
    "get_plan",
    "expand_filters",
    "expand_filters_backward",
]


def _check_kshape(kshape, matrix=None):
    kshape = tuple(int(k) for k in kshape)
    if len(kshape) != 3:
        raise ValueError(f"kernel shape must have 3 dims, got {kshape}")
    if any(k < 1 or k % 2 == 0 for k in kshape):
        raise ValueError(f"kernel dims must be odd and positive, got {kshape}")
    if matrix is not None:
        t = transform_array(np.empty(kshape, dtype=np.int8), matrix)
        if t.shape != kshape:
            raise ValueError(f"kernel shape {kshape} is not preserved by the group element (anisotropic kernel)")
    return kshape


def spatial_permutation(matrix: np.ndarray, kshape) -> np.ndarray:
    """Gather map for rotating a ``(kz, ky, kx)`` kernel by ``matrix``.

    ``transformed.ravel() == original.ravel()[perm]``, i.e.
    ``transformed[p] = original[R^-1 (p - c) + c]``.
    """
    kshape = _check_kshape(kshape, matrix)
    ids = np.arange(math.prod(kshape)).reshape(kshape)
    return np.ascontiguousarray(transform_array(ids, matrix)).ravel()


@dataclass(frozen=True, eq=False)
class FilterTransformPlan:
    """Per-element gather maps over the flattened filter positions.

    For a first-layer plan ``maps`` has shape ``(|H|, K)`` with ``K`` voxels;
    for higher layers it is ``(|H|, |H| * K)`` over (orientation, voxel) slots.
    ``inverse_maps[j]`` undoes ``maps[j]``.
    """

    group_name: GroupName
    kshape: tuple[int, int, int]
    first_layer: bool
    maps: np.ndarray
    inverse_maps: np.ndarray

    @property
    def order(self) -> int:
        return self.maps.shape[0]

    @property
    def n_voxels(self) -> int:
        return math.prod(self.kshape)


def build_plan(group: SymmetryGroup, rho: PermutationRep, kshape, first_layer: bool) -> FilterTransformPlan:
    kshape = _check_kshape(kshape)
    n = group.order
    kvox = math.prod(kshape)
    spatial = np.stack([spatial_permutation(m, kshape) for m in group.elements])
    if first_layer:
        maps = spatial
    else:
        # slot (o, v) <- (rho[h][o], spatial[h][v])
        maps = (rho.perms[:, :, None] * kvox + spatial[:, None, :]).reshape(n, n * kvox)
    inverse = np.argsort(maps, axis=1)
    maps.setflags(write=False)
    inverse.setflags(write=False)
    return FilterTransformPlan(group.name, kshape, bool(first_layer), maps, inverse)


_PLANS: dict = {}


def get_plan(group_name, kshape, first_layer: bool) -> FilterTransformPlan:
    key = (GroupName.parse(group_name), tuple(kshape), bool(first_layer))
    if key not in _PLANS:
        _PLANS[key] = build_plan(get_group(key[0]), get_rho(key[0]), key[1], key[2])
    return _PLANS[key]


def _flat_view(plan: FilterTransformPlan, filters: np.ndarray) -> np.ndarray:
    n_h = plan.order
    if plan.first_layer:
        want = 5
        tail = plan.kshape
    else:
        want = 6
        tail = (n_h, *plan.kshape)
    if filters.ndim != want or tuple(filters.shape[2:]) != tail:
        raise ValueError(f"filters of shape {filters.shape} do not match plan (expected (*, *, {tail}))")
    return filters.reshape(filters.shape[0], filters.shape[1], -1)


def expand_filters(plan: FilterTransformPlan, filters: np.ndarray) -> np.ndarray:
    """Produce the transformed bank fed to the spatial convolution.

    First layer ``(n_out, n_in, kz, ky, kx) -> (n_out*|H|, n_in, kz, ky, kx)``;
    higher layers ``(n_out, n_in, |H|, k...) -> (n_out*|H|, n_in*|H|, k...)``.
    Copy ``j`` of filter ``i`` lands at output channel ``i*|H| + j``.
    """
    flat = _flat_view(plan, filters)
    n_out, n_in = flat.shape[:2]
    n_h = plan.order
    out = flat[:, :, plan.maps]  # (n_out, n_in, |H|, L)
    out = out.transpose(0, 2, 1, 3)
    c_in = n_in if plan.first_layer else n_in * n_h
    return np.ascontiguousarray(out).reshape(n_out * n_h, c_in, *plan.kshape)


def expand_filters_backward(plan: FilterTransformPlan, grad_expanded: np.ndarray, n_in: int) -> np.ndarray:
    """Pull a gradient on the expanded bank back onto the canonical filters.

    Every transformed copy contributes, so the canonical gradient is the sum
    over group elements of the inversely permuted copy gradients.
    """
    n_h = plan.order
    g = np.asarray(grad_expanded).reshape(-1, n_h, n_in, plan.maps.shape[1])
    # g[:, j, :, inverse[j]] re-aligns copy j with canonical positions
    pulled = np.take_along_axis(g, plan.inverse_maps[None, :, None, :], axis=3)
    out = pulled.sum(axis=1)
    if plan.first_layer:
        return out.reshape(out.shape[0], n_in, *plan.kshape)
    return out.reshape(out.shape[0], n_in, n_h, *plan.kshape)
