"""Sparse compute core: gather, routing arbitration, and the packed
convolution / linear operators.

Every operator produces 32-bit pre-requantization accumulators that are
bit-exact equal to a dense computation on mask-expanded weights (and, for
the sparse-activation variants, densified inputs): integer addition is
associative, so routing order cannot change any value.  Executed multiply
and add counts are tracked per occupied slot only; vacant (null) slots cost
nothing, which keeps the accounting honest for imperfect packings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kwta import SparseActivation, SparseMap
from .packing import (
    NULL_KERNEL_ID,
    AugmentedWeightTensor,
    ComplementarySet,
    combine,
    partition_into_complementary_sets,
    stack_sets,
)
from .tensor import SparseKernel


@dataclass(frozen=True)
class ConvConfig:
    """Square convolution geometry; [C_in:C_out] in the channel notation."""

    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.kernel_size, self.in_channels, self.out_channels, self.stride) < 1:
            raise ValueError("kernel_size, channels and stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def out_spatial(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"input {h}x{w} too small for {self.kernel_size}x{self.kernel_size} kernel")
        return oh, ow

    @property
    def window_positions(self) -> int:
        return self.kernel_size * self.kernel_size * self.in_channels


@dataclass(frozen=True)
class AugmentedEntry:
    """(weight, kernel id) pair read from one slot of the packed tensor."""

    weight: int
    kernel_id: int


@dataclass(frozen=True)
class RoutedProduct:
    """A partial product plus the adder-tree slot assigned by arbitration."""

    kernel_id: int
    slot_offset: int
    product: int


@dataclass
class MacCounter:
    """Executed multiply/add tally for one computation."""

    mults: int = 0
    adds: int = 0

    def count(self, mults: int, adds: int) -> None:
        self.mults += mults
        self.adds += adds


def gather_weights(
    awt: AugmentedWeightTensor, activation_index: int
) -> list[AugmentedEntry]:
    """Read the slot row for one activation index; null slots are dropped.

    Models a single access to the K-ported augmented weight memory: all
    sets' entries for that position arrive in parallel.
    """
    if not 0 <= activation_index < awt.n_positions:
        raise IndexError(f"activation index {activation_index} out of range")
    ids = awt.kernel_ids[activation_index]
    weights = awt.weights[activation_index]
    return [
        AugmentedEntry(int(weights[s]), int(ids[s]))
        for s in range(awt.n_sets)
        if ids[s] != NULL_KERNEL_ID
    ]


def prefix_sum_arbitrate(kernel_ids: Sequence[int]) -> list[int]:
    """Slot offsets via a prefix sum over equal kernel ids.

    offset[i] counts the earlier occurrences of kernel_ids[i], so each
    (kernel id, offset) pair lands in its own adder-tree slot.
    """
    seen: dict[int, int] = {}
    offsets = []
    for kid in kernel_ids:
        offset = seen.get(kid, 0)
        offsets.append(offset)
        seen[kid] = offset + 1
    return offsets


def route_and_sum(
    products: Iterable[tuple[int, int]], n_out: int
) -> np.ndarray:
    """Route (kernel id, product) pairs to per-kernel accumulators.

    The explicit arbitration path: assign slot offsets, then sum in the
    normalized (kernel id, slot offset) order.  Values are order-independent
    in integer arithmetic; the normalization only makes traces reproducible.
    """
    pairs = list(products)
    offsets = prefix_sum_arbitrate([kid for kid, _ in pairs])
    routed = []
    for (kid, product), offset in zip(pairs, offsets):
        if not 0 <= kid < n_out:
            raise ValueError(f"kernel id {kid} outside [0, {n_out})")
        routed.append(RoutedProduct(kid, offset, int(product)))
    out = [0] * n_out
    for rp in sorted(routed, key=lambda r: (r.kernel_id, r.slot_offset)):
        out[rp.kernel_id] += rp.product
    return np.array(out, dtype=np.int32)


def _check_awt_geometry(awt: AugmentedWeightTensor, cfg: ConvConfig) -> None:
    if awt.n_positions != cfg.window_positions:
        raise ValueError(
            f"packed tensor covers {awt.n_positions} positions, config window is {cfg.window_positions}"
        )
    if awt.n_kernels > cfg.out_channels:
        raise ValueError("packed kernel ids exceed out_channels")


def sparse_dense_conv(
    x: np.ndarray,
    awt: AugmentedWeightTensor,
    cfg: ConvConfig,
    counter: MacCounter | None = None,
) -> np.ndarray:
    """Packed-weight convolution over a dense activation map.

    Per output site the dense receptive field is multiplied element-wise
    against every occupied slot (the Hadamard step over the overlaid sets)
    and partial products are routed to their kernel's accumulator.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != cfg.in_channels:
        raise ValueError(f"input shape {x.shape} does not match {cfg.in_channels} channels")
    _check_awt_geometry(awt, cfg)
    h, w, _ = x.shape
    oh, ow = cfg.out_spatial(h, w)
    pad = cfg.padding
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    xw = x.astype(np.int64)
    kk = cfg.kernel_size
    live = awt.kernel_ids.reshape(-1) != NULL_KERNEL_ID
    flat_rows = np.nonzero(live)[0] // awt.n_sets
    live_ids = awt.kernel_ids.reshape(-1)[live]
    live_weights = awt.weights.reshape(-1)[live].astype(np.int64)
    per_site = int(live.sum())
    out = np.zeros((oh, ow, cfg.out_channels), dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            window = xw[
                oy * cfg.stride : oy * cfg.stride + kk,
                ox * cfg.stride : ox * cfg.stride + kk,
                :,
            ].reshape(-1)
            products = window[flat_rows] * live_weights
            np.add.at(out[oy, ox], live_ids, products)
    if counter is not None:
        counter.count(per_site * oh * ow, per_site * oh * ow)
    return out.astype(np.int32)


def sparse_sparse_conv(
    smap: SparseMap,
    awt: AugmentedWeightTensor,
    cfg: ConvConfig,
    counter: MacCounter | None = None,
) -> np.ndarray:
    """Packed-weight convolution over a channel-sparse activation map.

    Only the window's recorded winners are gathered: each winner index reads
    its slot row from the packed tensor, is multiplied against the occupied
    slots, and the products are routed by kernel id.  Equals
    ``sparse_dense_conv`` on the densified map, bit-exactly.
    """
    if smap.channels != cfg.in_channels:
        raise ValueError(f"map has {smap.channels} channels, config wants {cfg.in_channels}")
    _check_awt_geometry(awt, cfg)
    oh, ow = cfg.out_spatial(smap.height, smap.width)
    kk = cfg.kernel_size
    c = cfg.in_channels
    weights = awt.weights.astype(np.int64)
    ids = awt.kernel_ids
    out = np.zeros((oh, ow, cfg.out_channels), dtype=np.int64)
    executed = 0
    for oy in range(oh):
        iy0 = oy * cfg.stride - cfg.padding
        for ox in range(ow):
            ix0 = ox * cfg.stride - cfg.padding
            idx_parts = []
            val_parts = []
            for ky in range(kk):
                y = iy0 + ky
                if y < 0 or y >= smap.height:
                    continue
                for kx in range(kk):
                    xcol = ix0 + kx
                    if xcol < 0 or xcol >= smap.width:
                        continue
                    act = smap.at(y, xcol)
                    if act.indices.size:
                        idx_parts.append(act.indices + (ky * kk + kx) * c)
                        val_parts.append(act.values)
            if not idx_parts:
                continue
            idxs = np.concatenate(idx_parts)
            vals = np.concatenate(val_parts).astype(np.int64)
            kid = ids[idxs]
            live = kid != NULL_KERNEL_ID
            products = vals[:, None] * weights[idxs]
            np.add.at(out[oy, ox], kid[live], products[live])
            executed += int(live.sum())
    if counter is not None:
        counter.count(executed, executed)
    return out.astype(np.int32)


def split_into_taps(
    kernels: Sequence[SparseKernel], kernel_size: int, in_channels: int
) -> list[AugmentedWeightTensor]:
    """Decompose KxK kernels into KxK per-tap 1x1 packed tensors.

    The complementary-set partition is computed once on the full kernels and
    reused for every tap, so kernel ids route identically in all taps; taps
    where a kernel has no weights simply hold null slots for its set.
    """
    shape = (kernel_size, kernel_size, in_channels)
    for k in kernels:
        if k.shape != shape:
            raise ValueError(f"kernel {k.kernel_id}: shape {k.shape}, expected {shape}")
    sets = partition_into_complementary_sets(kernels)
    taps = []
    for tap in range(kernel_size * kernel_size):
        lo, hi = tap * in_channels, (tap + 1) * in_channels
        tap_kernels = {}
        for k in kernels:
            inside = (k.positions >= lo) & (k.positions < hi)
            tap_kernels[k.kernel_id] = SparseKernel(
                k.kernel_id,
                (in_channels,),
                (k.positions[inside] - lo).astype(np.int64),
                k.weights[inside],
            )
        slices = []
        for cset in sets:
            members = tuple(
                kid for kid in cset.member_kernel_ids if tap_kernels[kid].n_nonzero
            )
            sub = ComplementarySet(members, (in_channels,))
            slices.append(combine(sub, list(tap_kernels.values())))
        taps.append(stack_sets(slices))
    return taps


def conv3x3_via_nine_1x1(
    smap: SparseMap,
    taps: Sequence[AugmentedWeightTensor],
    cfg: ConvConfig,
    counter: MacCounter | None = None,
) -> np.ndarray:
    """3x3 convolution as nine serially accumulated 1x1 convolutions.

    Tap (ky, kx) contributes a plain 1x1 gather at the correspondingly
    shifted input site; the nine partial maps land in one accumulator.
    Equals the direct 3x3 computation bit-exactly.
    """
    if cfg.kernel_size != 3:
        raise ValueError("conv3x3_via_nine_1x1 requires kernel_size=3")
    if len(taps) != 9:
        raise ValueError(f"expected 9 tap tensors, got {len(taps)}")
    for t, tap in enumerate(taps):
        if tap.n_positions != cfg.in_channels:
            raise ValueError(f"tap {t} covers {tap.n_positions} positions, expected {cfg.in_channels}")
    if smap.channels != cfg.in_channels:
        raise ValueError(f"map has {smap.channels} channels, config wants {cfg.in_channels}")
    oh, ow = cfg.out_spatial(smap.height, smap.width)
    out = np.zeros((oh, ow, cfg.out_channels), dtype=np.int64)
    executed = 0
    tap_weights = [t.weights.astype(np.int64) for t in taps]
    tap_ids = [t.kernel_ids for t in taps]
    for oy in range(oh):
        iy0 = oy * cfg.stride - cfg.padding
        for ox in range(ow):
            ix0 = ox * cfg.stride - cfg.padding
            acc = out[oy, ox]
            for ky in range(3):
                y = iy0 + ky
                if y < 0 or y >= smap.height:
                    continue
                for kx in range(3):
                    xcol = ix0 + kx
                    if xcol < 0 or xcol >= smap.width:
                        continue
                    act = smap.at(y, xcol)
                    if not act.indices.size:
                        continue
                    tap = ky * 3 + kx
                    kid = tap_ids[tap][act.indices]
                    live = kid != NULL_KERNEL_ID
                    products = act.values.astype(np.int64)[:, None] * tap_weights[tap][act.indices]
                    np.add.at(acc, kid[live], products[live])
                    executed += int(live.sum())
    if counter is not None:
        counter.count(executed, executed)
    return out.astype(np.int32)


def validate_channel_blocks(awt: AugmentedWeightTensor, block: int) -> None:
    """Check that occupancy comes in whole input-channel blocks.

    Every retained spatial tap must carry all ``block`` channel weights of
    its kernel; partially occupied blocks violate the stem's block-sparse
    contract.
    """
    ids = awt.kernel_ids
    if awt.n_positions % block:
        raise ValueError("position count is not a multiple of the block size")
    grouped = ids.reshape(-1, block, awt.n_sets)
    for tap in range(grouped.shape[0]):
        for s in range(awt.n_sets):
            col = grouped[tap, :, s]
            if col.min() != col.max():
                raise ValueError(
                    f"spatial tap {tap}, set {s}: input-channel block is partially occupied"
                )


def stem_conv7x7(
    x: np.ndarray,
    awt: AugmentedWeightTensor,
    cfg: ConvConfig,
    counter: MacCounter | None = None,
) -> np.ndarray:
    """Weight-sparse stem convolution over a dense image.

    The input is dense (images cannot be activation-sparse), so this is the
    sparse-dense path with an extra structural requirement: kernels are
    complementary in the spatial dimensions and each retained tap carries
    its full input-channel block.
    """
    if cfg.kernel_size != 7:
        raise ValueError("stem_conv7x7 requires kernel_size=7")
    validate_channel_blocks(awt, cfg.in_channels)
    return sparse_dense_conv(x, awt, cfg, counter)


def sparse_dense_linear(
    x: np.ndarray,
    awt: AugmentedWeightTensor,
    n_out: int,
    counter: MacCounter | None = None,
) -> np.ndarray:
    """Packed-weight matrix-vector product over a dense input vector."""
    x = np.asarray(x)
    if x.ndim != 1 or x.size != awt.n_positions:
        raise ValueError(f"input length {x.size} != {awt.n_positions} weight positions")
    if awt.n_kernels > n_out:
        raise ValueError("packed kernel ids exceed n_out")
    ids = awt.kernel_ids
    live = ids != NULL_KERNEL_ID
    products = x.astype(np.int64)[:, None] * awt.weights.astype(np.int64)
    out = np.zeros(n_out, dtype=np.int64)
    np.add.at(out, ids[live], products[live])
    if counter is not None:
        n = int(live.sum())
        counter.count(n, n)
    return out.astype(np.int32)


def sparse_sparse_linear(
    act: SparseActivation,
    awt: AugmentedWeightTensor,
    n_out: int,
    counter: MacCounter | None = None,
) -> np.ndarray:
    """Packed-weight matrix-vector product over a sparse input vector.

    Executes one gather per winner: K winners against S slots costs K*S
    multiplies when the packing is perfect.  Equals the dense product on the
    densified input, bit-exactly.
    """
    if act.length != awt.n_positions:
        raise ValueError(f"activation length {act.length} != {awt.n_positions} weight positions")
    if awt.n_kernels > n_out:
        raise ValueError("packed kernel ids exceed n_out")
    out = np.zeros(n_out, dtype=np.int64)
    if act.indices.size:
        kid = awt.kernel_ids[act.indices]
        live = kid != NULL_KERNEL_ID
        products = act.values.astype(np.int64)[:, None] * awt.weights[act.indices].astype(np.int64)
        np.add.at(out, kid[live], products[live])
        if counter is not None:
            n = int(live.sum())
            counter.count(n, n)
    return out.astype(np.int32)
