"""Offline packing of complementary sparse kernels.

A set of kernels is *complementary* when no two members have a nonzero
weight at the same position.  Such a set overlays into a single dense
structure holding one (weight, kernel id) pair per occupied position, so a
whole set of sparse kernels is processed with the cost of one dense kernel.
Several sets are stacked along a slot axis; a position then carries up to
``n_sets`` pairs, with vacant slots marked by a null kernel id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import SparseKernel

NULL_KERNEL_ID = -1


class PackingError(ValueError):
    """Raised when kernels cannot be packed as requested."""


@dataclass(frozen=True)
class Collision:
    """Two kernels claiming the same flat position."""

    position: int
    kernel_ids: tuple[int, int]


@dataclass(frozen=True)
class ComplementarySet:
    member_kernel_ids: tuple[int, ...]
    shape: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class AugmentedWeightTensor:
    """Dense overlay of stacked complementary sets.

    ``weights`` and ``kernel_ids`` are (positions, n_sets) arrays; a vacant
    slot holds weight 0 and kernel id ``NULL_KERNEL_ID``.  ``n_per_kernel``
    records the largest member nonzero count (the N of the layer plan) and
    the bit widths feed the memory resource model.
    """

    shape: tuple[int, ...]
    weights: np.ndarray
    kernel_ids: np.ndarray
    n_per_kernel: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.int8)
        ids = np.asarray(self.kernel_ids, dtype=np.int32)
        if w.ndim != 2 or w.shape != ids.shape:
            raise PackingError("weights/kernel_ids must be matching (positions, sets) arrays")
        if w.shape[0] != int(np.prod(self.shape)):
            raise PackingError("entry rows must cover every position of shape")
        if np.any((ids == NULL_KERNEL_ID) & (w != 0)):
            raise PackingError("null slots must carry zero weight")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "kernel_ids", ids)

    @property
    def n_positions(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_sets(self) -> int:
        return int(self.weights.shape[1])

    @property
    def n_kernels(self) -> int:
        ids = self.kernel_ids
        return int(ids.max()) + 1 if np.any(ids >= 0) else 0

    @property
    def nonnull_count(self) -> int:
        """Occupied slots across all sets (= total packed nonzero weights)."""
        return int((self.kernel_ids >= 0).sum())

    @property
    def bit_width_weight(self) -> int:
        return 8

    @property
    def bit_width_id(self) -> int:
        # one extra code point reserved for the null id
        return max(1, math.ceil(math.log2(self.n_kernels + 1)))

    def validate(self) -> None:
        """Re-check the packing invariants (used after deserialization)."""
        live_mask = self.kernel_ids >= 0
        for p in np.flatnonzero(live_mask.sum(axis=1) > 1):
            row = self.kernel_ids[p][live_mask[p]]
            if np.unique(row).size != row.size:
                raise PackingError(f"duplicate kernel id at position {int(p)}")
        if np.any(self.weights[live_mask] == 0):
            raise PackingError("occupied slots must carry nonzero weights")
        # every kernel lives in exactly one set
        owner = {}
        for s in range(self.n_sets):
            for kid in np.unique(self.kernel_ids[live_mask[:, s], s]):
                if int(kid) in owner and owner[int(kid)] != s:
                    raise PackingError(f"kernel {int(kid)} split across sets")
                owner[int(kid)] = s


def verify_complementarity(kernels: Sequence[SparseKernel]) -> list[Collision]:
    """Return every pairwise support collision; an empty list means ok.

    All kernels must share one shape; a mismatch raises naming the offender.
    """
    if not kernels:
        return []
    shape = kernels[0].shape
    for k in kernels:
        if k.shape != shape:
            raise PackingError(f"kernel {k.kernel_id}: shape {k.shape} != expected {shape}")
    occupants: dict[int, list[int]] = {}
    for k in kernels:
        for p in k.positions:
            occupants.setdefault(int(p), []).append(k.kernel_id)
    collisions = []
    for position in sorted(occupants):
        ids = occupants[position]
        if len(ids) > 1:
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    collisions.append(Collision(position, (ids[i], ids[j])))
    return collisions


def partition_into_complementary_sets(
    kernels: Sequence[SparseKernel],
) -> list[ComplementarySet]:
    """Greedy first-fit partition, visiting kernels by ascending kernel id.

    Every returned set is complementary; singleton sets make the partition
    total.  Minimal set count is not attempted (training-side mask
    generation already produces tiling groups, and first-fit recovers them).
    """
    if not kernels:
        return []
    shape = kernels[0].shape
    n_positions = int(np.prod(shape))
    ordered = sorted(kernels, key=lambda k: k.kernel_id)
    occupied: list[np.ndarray] = []
    fill: list[int] = []
    members: list[list[int]] = []
    for kernel in ordered:
        if kernel.shape != shape:
            raise PackingError(f"kernel {kernel.kernel_id}: shape {kernel.shape} != expected {shape}")
        placed = False
        for s, occ in enumerate(occupied):
            if fill[s] + kernel.n_nonzero > n_positions:
                continue
            if not occ[kernel.positions].any():
                occ[kernel.positions] = True
                fill[s] += kernel.n_nonzero
                members[s].append(kernel.kernel_id)
                placed = True
                break
        if not placed:
            occ = np.zeros(n_positions, dtype=bool)
            occ[kernel.positions] = True
            occupied.append(occ)
            fill.append(kernel.n_nonzero)
            members.append([kernel.kernel_id])
    return [ComplementarySet(tuple(m), shape) for m in members]


def combine(
    cset: ComplementarySet, kernels: Sequence[SparseKernel]
) -> AugmentedWeightTensor:
    """Overlay one complementary set into a single-set augmented tensor.

    Collisions are re-checked defensively even though a verified set cannot
    produce any.
    """
    by_id = {k.kernel_id: k for k in kernels}
    n_positions = int(np.prod(cset.shape))
    weights = np.zeros((n_positions, 1), dtype=np.int8)
    ids = np.full((n_positions, 1), NULL_KERNEL_ID, dtype=np.int32)
    n_max = 0
    for kid in cset.member_kernel_ids:
        kernel = by_id[kid]
        if kernel.shape != cset.shape:
            raise PackingError(f"kernel {kid}: shape {kernel.shape} != set shape {cset.shape}")
        taken = ids[kernel.positions, 0] != NULL_KERNEL_ID
        if taken.any():
            p = int(kernel.positions[np.flatnonzero(taken)[0]])
            raise PackingError(
                f"collision at position {p}: kernels {int(ids[p, 0])} and {kid}"
            )
        weights[kernel.positions, 0] = kernel.weights
        ids[kernel.positions, 0] = kid
        n_max = max(n_max, kernel.n_nonzero)
    return AugmentedWeightTensor(cset.shape, weights, ids, n_max)


def stack_sets(slices: Sequence[AugmentedWeightTensor]) -> AugmentedWeightTensor:
    """Stack single-set tensors along the slot axis."""
    if not slices:
        raise PackingError("nothing to stack")
    shape = slices[0].shape
    for s in slices:
        if s.shape != shape:
            raise PackingError("stacked sets must share one shape")
    return AugmentedWeightTensor(
        shape,
        np.concatenate([s.weights for s in slices], axis=1),
        np.concatenate([s.kernel_ids for s in slices], axis=1),
        max(s.n_per_kernel for s in slices),
    )


def pack_kernels(kernels: Sequence[SparseKernel]) -> AugmentedWeightTensor:
    """Partition kernels into complementary sets and stack the overlays."""
    if not kernels:
        raise PackingError("no kernels to pack")
    sets = partition_into_complementary_sets(kernels)
    return stack_sets([combine(cset, kernels) for cset in sets])


def unpack(awt: AugmentedWeightTensor) -> list[SparseKernel]:
    """Exact inverse of packing: recover kernels, ascending kernel id."""
    entries: dict[int, list[tuple[int, int]]] = {}
    for s in range(awt.n_sets):
        ids = awt.kernel_ids[:, s]
        for p in np.flatnonzero(ids >= 0):
            entries.setdefault(int(ids[p]), []).append((int(p), int(awt.weights[p, s])))
    kernels = []
    for kid in sorted(entries):
        pairs = sorted(entries[kid])
        kernels.append(
            SparseKernel(
                kid,
                awt.shape,
                np.array([p for p, _ in pairs], dtype=np.int64),
                np.array([w for _, w in pairs], dtype=np.int8),
            )
        )
    return kernels


def grouped_collisions(kernels: Sequence[SparseKernel]) -> list[Collision]:
    """Verify training-style contiguous groups of ``positions // N`` kernels.

    Mask generators deal one permutation per group, so consecutive kernels
    (by ascending id) must be complementary in runs of that length.  Returns
    every collision inside any group; kernels with differing nonzero counts
    fall back to a single greedy feasibility notion and report nothing here.
    """
    if not kernels:
        return []
    ordered = sorted(kernels, key=lambda k: k.kernel_id)
    counts = {k.n_nonzero for k in ordered}
    if len(counts) != 1:
        return []
    n = counts.pop()
    if n == 0:
        return []
    group_size = max(1, int(np.prod(ordered[0].shape)) // n)
    collisions = []
    for start in range(0, len(ordered), group_size):
        collisions.extend(verify_complementarity(ordered[start : start + group_size]))
    return collisions


def generate_complementary_masks(
    shape: Sequence[int], n_per_kernel: int, n_kernels: int, seed: int
) -> list[np.ndarray]:
    """Deterministic binary masks with disjoint supports inside each group.

    Positions are dealt from a fresh seeded permutation per group of
    ``positions // n_per_kernel`` kernels, so every group tiles the shape
    without overlap (perfectly when n_per_kernel divides the position count).
    """
    shape = tuple(int(d) for d in shape)
    n_positions = int(np.prod(shape))
    if not 1 <= n_per_kernel <= n_positions:
        raise PackingError(
            f"n_per_kernel={n_per_kernel} infeasible for {n_positions} positions"
        )
    if n_kernels < 1:
        raise PackingError("n_kernels must be positive")
    per_group = n_positions // n_per_kernel
    rng = np.random.default_rng(seed)
    masks = []
    for start in range(0, n_kernels, per_group):
        perm = rng.permutation(n_positions)
        for j in range(min(per_group, n_kernels - start)):
            mask = np.zeros(n_positions, dtype=bool)
            mask[perm[j * n_per_kernel : (j + 1) * n_per_kernel]] = True
            masks.append(mask.reshape(shape))
    return masks
