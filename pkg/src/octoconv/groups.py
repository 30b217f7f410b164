"""Discrete roto-reflection groups of the cube and the square-based cuboid.

Elements are signed 3x3 permutation matrices acting on ``(x, y, z)`` column
vectors. Volumes and filters are stored with spatial axes ordered
``(z, y, x)``; :func:`transform_array` performs the translation between the
two conventions.
"""

from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "GroupName",
    "SymmetryGroup",
    "PermutationRep",
    "generators",
    "build_group",
    "derive_rho",
    "get_group",
    "signed_permutation_matrices",
    "transform_array",
]

MAX_ORDER = 48


class GroupName(str, enum.Enum):
    Z3_TRIVIAL = "Z3"
    D4 = "D4"
    D4H = "D4h"
    O = "O"  # noqa: E741
    OH = "Oh"

    @classmethod
    def parse(cls, name: "str | GroupName") -> "GroupName":
        if isinstance(name, GroupName):
            return name
        key = str(name).strip().lower()
        aliases = {
            "z3": cls.Z3_TRIVIAL,
            "z3_trivial": cls.Z3_TRIVIAL,
            "trivial": cls.Z3_TRIVIAL,
            "z": cls.Z3_TRIVIAL,
            "d4": cls.D4,
            "d4h": cls.D4H,
            "o": cls.O,
            "oh": cls.OH,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown group name {name!r}") from None


ORDERS = {
    GroupName.Z3_TRIVIAL: 1,
    GroupName.D4: 8,
    GroupName.D4H: 16,
    GroupName.O: 24,
    GroupName.OH: 48,
}

# (x, y, z) -> (-y, x, z)
RZ90 = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.int8)
# (x, y, z) -> (-x, y, -z)
RY180 = np.array([[-1, 0, 0], [0, 1, 0], [0, 0, -1]], dtype=np.int8)
# (x, y, z) -> (x, y, -z)
MZ = np.array([[1, 0, 0], [0, 1, 0], [0, 0, -1]], dtype=np.int8)
# (x, y, z) -> (y, z, x), 120 degrees about the (1, 1, 1) diagonal
RDIAG120 = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=np.int8)
NEG_I = -np.eye(3, dtype=np.int8)


def generators(name: "str | GroupName") -> list[np.ndarray]:
    """Return the fixed generator matrices of a group, in canonical order."""
    name = GroupName.parse(name)
    table = {
        GroupName.Z3_TRIVIAL: [],
        GroupName.D4: [RZ90, RY180],
        GroupName.D4H: [RZ90, RY180, MZ],
        GroupName.O: [RZ90, RDIAG120],
        GroupName.OH: [RZ90, RDIAG120, NEG_I],
    }
    return [g.copy() for g in table[name]]


def _key(m: np.ndarray) -> bytes:
    return np.ascontiguousarray(m, dtype=np.int8).tobytes()


@dataclass(frozen=True, eq=False)
class SymmetryGroup:
    """A finite matrix group with precomputed multiplication tables.

    ``cayley[i, j]`` is the index of ``elements[i] @ elements[j]``; element 0
    is the identity.
    """

    name: GroupName
    elements: np.ndarray  # (|H|, 3, 3) int8
    cayley: np.ndarray  # (|H|, |H|) intp
    inverse: np.ndarray  # (|H|,) intp
    _index: dict = field(repr=False, compare=False)

    @property
    def order(self) -> int:
        return len(self.elements)

    def __len__(self) -> int:
        return len(self.elements)

    def index_of(self, matrix: np.ndarray) -> int:
        try:
            return self._index[_key(matrix)]
        except KeyError:
            raise ValueError("matrix is not an element of this group") from None

    def multiply(self, i: int, j: int) -> int:
        return int(self.cayley[i, j])

    def is_commutative(self) -> bool:
        return bool(np.array_equal(self.cayley, self.cayley.T))


@dataclass(frozen=True, eq=False)
class PermutationRep:
    """Regular representation as channel permutations.

    ``perms[h][o]`` is the source orientation channel that lands in slot ``o``
    when the representation of element ``h`` is applied (a gather index).
    """

    group_name: GroupName
    perms: np.ndarray  # (|H|, |H|) intp

    def apply(self, h: int, x: np.ndarray, axis: int = 0) -> np.ndarray:
        return np.take(x, self.perms[h], axis=axis)


def build_group(name: "str | GroupName") -> SymmetryGroup:
    """Close the generator set under multiplication by breadth-first search.

    The queue is FIFO and generators are tried in the order returned by
    :func:`generators`, so the element ordering is deterministic. A new
    element ``g @ s`` is discovered from ``g`` by right-multiplication with
    generator ``s``.
    """
    name = GroupName.parse(name)
    gens = generators(name)
    identity = np.eye(3, dtype=np.int8)
    elements = [identity]
    index = {_key(identity): 0}
    queue = deque([identity])
    while queue:
        g = queue.popleft()
        for s in gens:
            m = (g.astype(np.int16) @ s).astype(np.int8)
            k = _key(m)
            if k not in index:
                if len(elements) >= MAX_ORDER:
                    raise RuntimeError(
                        f"closure of {name.value} exceeds {MAX_ORDER} elements; "
                        "generator constants are wrong"
                    )
                index[k] = len(elements)
                elements.append(m)
                queue.append(m)

    els = np.stack(elements)
    n = len(els)
    prods = np.einsum("iab,jbc->ijac", els.astype(np.int16), els.astype(np.int16))
    cayley = np.empty((n, n), dtype=np.intp)
    for i in range(n):
        for j in range(n):
            cayley[i, j] = index[_key(prods[i, j])]
    inverse = np.argmax(cayley == 0, axis=1).astype(np.intp)
    for arr in (els, cayley, inverse):
        arr.setflags(write=False)
    return SymmetryGroup(name=name, elements=els, cayley=cayley, inverse=inverse, _index=index)


def derive_rho(group: SymmetryGroup) -> PermutationRep:
    """Left regular representation: ``perms[h][idx(g)] = idx(h^-1 g)``."""
    perms = group.cayley[group.inverse, :].copy()
    perms.setflags(write=False)
    return PermutationRep(group_name=group.name, perms=perms)


@lru_cache(maxsize=None)
def get_group(name: "str | GroupName") -> SymmetryGroup:
    """Cached :func:`build_group`."""
    return build_group(GroupName.parse(name))


@lru_cache(maxsize=None)
def get_rho(name: "str | GroupName") -> PermutationRep:
    return derive_rho(get_group(name))


def signed_permutation_matrices() -> list[np.ndarray]:
    """All 48 signed 3x3 permutation matrices, by direct enumeration."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3), dtype=np.int8)
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            out.append(m)
    return out


def transform_array(arr: np.ndarray, matrix: np.ndarray, axes=(-3, -2, -1)) -> np.ndarray:
    """Rotate/reflect the three spatial axes of ``arr`` about their centre.

    ``axes`` name the array axes holding ``(z, y, x)``. The result satisfies
    ``out[p] = arr[R^-1 (p - c_out) + c_in]`` in centred voxel coordinates,
    which for a signed permutation is a transpose followed by flips. When
    ``R`` permutes axes of different lengths the output shape is permuted
    accordingly.
    """
    matrix = np.asarray(matrix)
    nd = arr.ndim
    axes = tuple(a % nd for a in axes)
    # vector component i (x=0, y=1, z=2) lives on array axis axes[2 - i]
    src_for = {}
    flip = []
    for b in range(3):  # output vector component
        a = int(np.flatnonzero(matrix[b])[0])  # input component feeding it
        src_for[axes[2 - b]] = axes[2 - a]
        if matrix[b, a] < 0:
            flip.append(axes[2 - b])
    order = [src_for.get(ax, ax) for ax in range(nd)]
    out = np.transpose(arr, order)
    if flip:
        out = np.flip(out, axis=tuple(flip))
    return out
