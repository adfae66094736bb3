"""Model graph assembly, end-to-end inference, and MAC accounting.

A model is an ordered chain of conv / maxpool / flatten / linear / kwta
layers whose shapes must connect.  The same graph can be executed three
ways:

* ``dense`` — every conv/linear runs through the naive dense reference on
  mask-expanded weights (the ground-truth path; also the slow baseline),
* ``sparse-dense`` — packed weights, dense activations,
* ``sparse-sparse`` — packed weights, and every k-WTA output is carried as
  (index, value) winners that later layers gather against.

All three produce bit-identical integer outputs for the same weights; only
the executed multiply/add counts differ, which is the point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels, oracle
from .kernels import ConvConfig, MacCounter
from .kwta import (
    KwtaConfig,
    SparseActivation,
    SparseMap,
    global_kwta_histogram,
    kwta_map,
    local_kwta,
)
from .packing import AugmentedWeightTensor, pack_kernels, unpack
from .tensor import QTensor, Requantizer, SparseKernel, sparse_to_dense

MODES = ("dense", "sparse-dense", "sparse-sparse")


class ShapeChainError(ValueError):
    """A layer's input shape does not match what the chain produces."""


# ---------------------------------------------------------------------------
# plan-level layer specs


@dataclass(frozen=True)
class ConvSpec:
    name: str
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    n_per_kernel: int | None = None  # None = dense
    shift: int | None = 0


@dataclass(frozen=True)
class PoolSpec:
    name: str
    size: int = 2
    stride: int = 2


@dataclass(frozen=True)
class FlattenSpec:
    name: str


@dataclass(frozen=True)
class LinearSpec:
    name: str
    out_features: int
    n_per_kernel: int | None = None
    shift: int | None = 0


@dataclass(frozen=True)
class KwtaSpec:
    name: str
    k: int
    scope: str = "local"  # "local" | "global"
    partition: int | None = None


# ---------------------------------------------------------------------------
# built layers


@dataclass(eq=False)
class ConvLayer:
    spec: ConvSpec
    cfg: ConvConfig
    awt: AugmentedWeightTensor
    bias: np.ndarray | None
    requant: Requantizer | None

    kind = "conv"

    @property
    def name(self) -> str:
        return self.spec.name


@dataclass(eq=False)
class LinearLayer:
    spec: LinearSpec
    in_features: int
    awt: AugmentedWeightTensor
    bias: np.ndarray | None
    requant: Requantizer | None

    kind = "linear"

    @property
    def name(self) -> str:
        return self.spec.name


@dataclass(eq=False)
class PoolLayer:
    spec: PoolSpec
    kind = "maxpool"

    @property
    def name(self) -> str:
        return self.spec.name


@dataclass(eq=False)
class FlattenLayer:
    spec: FlattenSpec
    kind = "flatten"

    @property
    def name(self) -> str:
        return self.spec.name


@dataclass(eq=False)
class KwtaLayer:
    spec: KwtaSpec
    cfg: KwtaConfig
    kind = "kwta"

    @property
    def name(self) -> str:
        return self.spec.name


@dataclass(eq=False)
class ModelGraph:
    """Immutable-after-build layer chain plus packed weights."""

    input_shape: tuple[int, int, int]
    layers: list
    _dense_cache: dict = field(default_factory=dict, repr=False)

    def dense_conv_weights(self, layer: ConvLayer) -> np.ndarray:
        key = ("conv", layer.name)
        if key not in self._dense_cache:
            cfg = layer.cfg
            dense = np.zeros(
                (cfg.out_channels, cfg.kernel_size, cfg.kernel_size, cfg.in_channels),
                dtype=np.int8,
            )
            for kernel in unpack(layer.awt):
                dense[kernel.kernel_id] = sparse_to_dense(kernel).values
            self._dense_cache[key] = dense
        return self._dense_cache[key]

    def dense_linear_weights(self, layer: LinearLayer) -> np.ndarray:
        key = ("linear", layer.name)
        if key not in self._dense_cache:
            dense = np.zeros((layer.spec.out_features, layer.in_features), dtype=np.int8)
            for kernel in unpack(layer.awt):
                dense[kernel.kernel_id] = sparse_to_dense(kernel).values
            self._dense_cache[key] = dense
        return self._dense_cache[key]


# ---------------------------------------------------------------------------
# MAC accounting


@dataclass
class LayerReport:
    name: str
    kind: str
    dense_macs: int = 0
    executed_mults: int = 0
    executed_adds: int = 0
    winners: int = 0
    winner_pool: int = 0

    @property
    def ratio(self) -> float:
        return self.executed_mults / self.dense_macs if self.dense_macs else 0.0

    @property
    def activation_sparsity(self) -> float | None:
        if not self.winner_pool:
            return None
        return 1.0 - self.winners / self.winner_pool


@dataclass
class MacReport:
    layers: list[LayerReport] = field(default_factory=list)

    @property
    def total_dense_macs(self) -> int:
        return sum(l.dense_macs for l in self.layers)

    @property
    def total_executed_mults(self) -> int:
        return sum(l.executed_mults for l in self.layers)

    @property
    def total_executed_adds(self) -> int:
        return sum(l.executed_adds for l in self.layers)

    @property
    def reduction_ratio(self) -> float:
        dense = self.total_dense_macs
        return self.total_executed_mults / dense if dense else 0.0

    def merge(self, other: "MacReport") -> None:
        if not self.layers:
            self.layers = [
                LayerReport(l.name, l.kind, l.dense_macs, l.executed_mults,
                            l.executed_adds, l.winners, l.winner_pool)
                for l in other.layers
            ]
            return
        if len(self.layers) != len(other.layers):
            raise ValueError("cannot merge reports from different graphs")
        for mine, theirs in zip(self.layers, other.layers):
            mine.dense_macs += theirs.dense_macs
            mine.executed_mults += theirs.executed_mults
            mine.executed_adds += theirs.executed_adds
            mine.winners += theirs.winners
            mine.winner_pool += theirs.winner_pool

    def to_csv(self) -> str:
        lines = ["layer,kind,dense_macs,executed_mults,executed_adds,ratio"]
        for l in self.layers:
            lines.append(
                f"{l.name},{l.kind},{l.dense_macs},{l.executed_mults},{l.executed_adds},{l.ratio:.6f}"
            )
        lines.append(
            f"TOTAL,,{self.total_dense_macs},{self.total_executed_mults},"
            f"{self.total_executed_adds},{self.reduction_ratio:.6f}"
        )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "name": l.name,
                    "kind": l.kind,
                    "dense_macs": l.dense_macs,
                    "executed_mults": l.executed_mults,
                    "executed_adds": l.executed_adds,
                    "ratio": l.ratio,
                    "activation_sparsity": l.activation_sparsity,
                }
                for l in self.layers
            ],
            "total_dense_macs": self.total_dense_macs,
            "total_executed_mults": self.total_executed_mults,
            "total_executed_adds": self.total_executed_adds,
            "reduction_ratio": self.reduction_ratio,
        }


# ---------------------------------------------------------------------------
# pooling / flatten layer math


def maxpool2x2(x: np.ndarray, size: int = 2, stride: int = 2) -> np.ndarray:
    """Max pooling over a dense (H, W, C) map."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError("expected an (H, W, C) feature map")
    h, w, _ = x.shape
    if h < size or w < size or (h - size) % stride or (w - size) % stride:
        raise ValueError(f"{h}x{w} map does not tile with {size}x{size}/{stride} pooling")
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    out = None
    for dy in range(size):
        for dx in range(size):
            piece = x[dy : dy + oh * stride : stride, dx : dx + ow * stride : stride, :]
            out = piece if out is None else np.maximum(out, piece)
    return out


def maxpool_sparse(smap: SparseMap, size: int = 2, stride: int = 2) -> SparseMap:
    """Max pooling over a channel-sparse map; absent channels count as zero.

    A channel is present in the pooled site when it is present anywhere in
    the window; its value is the max over the window with absences as zero,
    so the result densifies to exactly the dense pooling of the densified
    input.
    """
    h, w, c = smap.height, smap.width, smap.channels
    if h < size or w < size or (h - size) % stride or (w - size) % stride:
        raise ValueError(f"{h}x{w} map does not tile with {size}x{size}/{stride} pooling")
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    acts = []
    k_max = 0
    for oy in range(oh):
        for ox in range(ow):
            vals = np.zeros(c, dtype=np.int16)
            present = np.zeros(c, dtype=bool)
            first = True
            for dy in range(size):
                for dx in range(size):
                    act = smap.at(oy * stride + dy, ox * stride + dx)
                    k_max = max(k_max, act.k)
                    dense = act.densify().astype(np.int16)
                    vals = dense if first else np.maximum(vals, dense)
                    present[act.indices] = True
                    first = False
            idx = np.flatnonzero(present).astype(np.int64)
            acts.append(SparseActivation(c, idx, vals[idx].astype(np.int8), k_max))
    return SparseMap(oh, ow, c, acts)


def flatten_sparse(smap: SparseMap) -> SparseActivation:
    """Row-major flatten of a channel-sparse map into one sparse vector."""
    c = smap.channels
    parts_i = []
    parts_v = []
    for site, act in enumerate(smap.acts):
        if act.indices.size:
            parts_i.append(act.indices + site * c)
            parts_v.append(act.values)
    length = smap.height * smap.width * c
    if not parts_i:
        return SparseActivation(length, np.empty(0, np.int64), np.empty(0, np.int8), 0)
    indices = np.concatenate(parts_i)
    values = np.concatenate(parts_v)
    return SparseActivation(length, indices, values, int(indices.size))


# ---------------------------------------------------------------------------
# building


def kernels_from_masks(
    masks: np.ndarray, values: np.ndarray
) -> list[SparseKernel]:
    """Turn per-kernel (mask, weights) arrays into coordinate kernels.

    ``masks`` is (n_kernels, *shape) boolean; ``values`` the same shape in
    int8.  Nonzero weights outside a mask are rejected; zero weights inside
    a mask are dropped (only actual nonzeros are stored).
    """
    masks = np.asarray(masks).astype(bool)
    values = np.asarray(values)
    if masks.shape != values.shape:
        raise ValueError("masks and weights must have identical shapes")
    out = []
    shape = masks.shape[1:]
    for kid in range(masks.shape[0]):
        mask = masks[kid].reshape(-1)
        vals = values[kid].reshape(-1)
        if np.any(vals[~mask] != 0):
            raise ValueError(f"kernel {kid}: nonzero weight outside its mask")
        positions = np.flatnonzero(mask & (vals != 0)).astype(np.int64)
        out.append(SparseKernel(kid, shape, positions, vals[positions].astype(np.int8)))
    return out


def _synthesize_kernels(
    shape: tuple[int, ...], n_per_kernel: int, n_kernels: int, rng: np.random.Generator
) -> list[SparseKernel]:
    from .packing import generate_complementary_masks

    masks = generate_complementary_masks(
        shape, n_per_kernel, n_kernels, seed=int(rng.integers(2**31))
    )
    out = []
    for kid, mask in enumerate(masks):
        positions = np.flatnonzero(mask.reshape(-1)).astype(np.int64)
        weights = rng.integers(-128, 128, size=positions.size)
        weights[weights == 0] = 1
        out.append(SparseKernel(kid, shape, positions, weights.astype(np.int8)))
    return out


def build_model(
    input_shape: Sequence[int],
    specs: Sequence,
    *,
    seed: int | None = None,
    weights: Mapping[str, tuple[Sequence[SparseKernel], np.ndarray | None]] | None = None,
) -> ModelGraph:
    """Assemble and shape-check a model.

    Weight-bearing layers take their kernels (and bias) from ``weights`` by
    layer name when provided, otherwise synthesize deterministic masks and
    random nonzero int8 weights from ``seed``.
    """
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3:
        raise ShapeChainError(f"input shape {input_shape} must be (H, W, C)")
    rng = np.random.default_rng(0 if seed is None else seed)
    state: tuple = ("map", *input_shape)
    built: list = []
    names = set()
    for i, spec in enumerate(specs):
        if spec.name in names:
            raise ShapeChainError(f"duplicate layer name {spec.name!r}")
        names.add(spec.name)
        is_last = i == len(specs) - 1
        if isinstance(spec, ConvSpec):
            if state[0] != "map":
                raise ShapeChainError(f"layer {spec.name}: convolution needs a 3-D input")
            _, h, w, c = state
            cfg = ConvConfig(spec.kernel_size, c, spec.out_channels, spec.stride, spec.padding)
            try:
                oh, ow = cfg.out_spatial(h, w)
            except ValueError as e:
                raise ShapeChainError(f"layer {spec.name}: {e}") from e
            kshape = (spec.kernel_size, spec.kernel_size, c)
            n = spec.n_per_kernel or int(np.prod(kshape))
            layer_kernels, bias = _layer_weights(
                spec.name, kshape, n, spec.out_channels, weights, rng
            )
            if spec.shift is None and not is_last:
                raise ShapeChainError(f"layer {spec.name}: only the final layer may skip requantization")
            built.append(
                ConvLayer(
                    spec,
                    cfg,
                    pack_kernels(layer_kernels),
                    bias,
                    None if spec.shift is None else Requantizer(spec.shift),
                )
            )
            state = ("map", oh, ow, spec.out_channels)
        elif isinstance(spec, PoolSpec):
            if state[0] != "map":
                raise ShapeChainError(f"layer {spec.name}: pooling needs a 3-D input")
            _, h, w, c = state
            if h < spec.size or w < spec.size or (h - spec.size) % spec.stride or (w - spec.size) % spec.stride:
                raise ShapeChainError(f"layer {spec.name}: {h}x{w} input does not tile")
            built.append(PoolLayer(spec))
            state = (
                "map",
                (h - spec.size) // spec.stride + 1,
                (w - spec.size) // spec.stride + 1,
                c,
            )
        elif isinstance(spec, FlattenSpec):
            if state[0] != "map":
                raise ShapeChainError(f"layer {spec.name}: flatten needs a 3-D input")
            _, h, w, c = state
            built.append(FlattenLayer(spec))
            state = ("vec", h * w * c)
        elif isinstance(spec, LinearSpec):
            if state[0] != "vec":
                raise ShapeChainError(f"layer {spec.name}: linear needs a flattened input")
            _, n_in = state
            n = spec.n_per_kernel or n_in
            layer_kernels, bias = _layer_weights(
                spec.name, (n_in,), n, spec.out_features, weights, rng
            )
            if spec.shift is None and not is_last:
                raise ShapeChainError(f"layer {spec.name}: only the final layer may skip requantization")
            built.append(
                LinearLayer(
                    spec,
                    n_in,
                    pack_kernels(layer_kernels),
                    bias,
                    None if spec.shift is None else Requantizer(spec.shift),
                )
            )
            state = ("vec", spec.out_features)
        elif isinstance(spec, KwtaSpec):
            if spec.scope not in ("local", "global"):
                raise ShapeChainError(f"layer {spec.name}: unknown scope {spec.scope!r}")
            try:
                if state[0] == "map":
                    _, h, w, c = state
                    if spec.scope != "local":
                        raise ShapeChainError(f"layer {spec.name}: map k-WTA competes along channels; use local scope")
                    partition = spec.partition or c
                    if partition != c:
                        raise ShapeChainError(f"layer {spec.name}: partition {partition} != {c} channels")
                    cfg = KwtaConfig(spec.k, partition=partition)
                else:
                    _, n = state
                    if spec.scope == "local":
                        partition = spec.partition or n
                        if n % partition:
                            raise ShapeChainError(f"layer {spec.name}: partition {partition} does not divide {n}")
                        cfg = KwtaConfig(spec.k, partition=partition)
                    else:
                        if spec.k > n:
                            raise ShapeChainError(f"layer {spec.name}: k={spec.k} exceeds {n} elements")
                        cfg = KwtaConfig(spec.k)
            except ValueError as e:
                if isinstance(e, ShapeChainError):
                    raise
                raise ShapeChainError(f"layer {spec.name}: {e}") from e
            built.append(KwtaLayer(spec, cfg))
        else:
            raise ShapeChainError(f"unknown layer spec {spec!r}")
    return ModelGraph(input_shape, built)


def _layer_weights(name, kshape, n_per_kernel, n_kernels, weights, rng):
    if weights is not None and name in weights:
        layer_kernels, bias = weights[name]
        layer_kernels = list(layer_kernels)
        for k in layer_kernels:
            if k.shape != tuple(kshape):
                raise ShapeChainError(f"layer {name}: kernel shape {k.shape} != {tuple(kshape)}")
        if bias is not None:
            bias = np.asarray(bias, dtype=np.int32)
            if bias.shape != (n_kernels,):
                raise ShapeChainError(f"layer {name}: bias must have {n_kernels} entries")
        return layer_kernels, bias
    layer_kernels = _synthesize_kernels(tuple(kshape), n_per_kernel, n_kernels, rng)
    bias = rng.integers(-1024, 1025, size=n_kernels).astype(np.int32)
    return layer_kernels, bias


# ---------------------------------------------------------------------------
# the reference network


@dataclass(frozen=True)
class GscPlan:
    """Per-layer sparsity plan for the 32x32x1 speech-command network."""

    conv1_n: int | None = 1
    conv2_n: int | None = 80
    linear1_n: int | None = 80
    output_n: int | None = 75
    conv1_k: int = 7
    conv2_k: int = 7
    linear1_k: int = 165
    conv1_shift: int = 6
    conv2_shift: int = 7
    linear1_shift: int = 7
    with_kwta: bool = True

    @classmethod
    def sparse(cls) -> "GscPlan":
        return cls()

    @classmethod
    def dense(cls) -> "GscPlan":
        return cls(conv1_n=None, conv2_n=None, linear1_n=None, output_n=None, with_kwta=False)

    @classmethod
    def from_allocation(cls, allocation: Mapping[str, int], **kwargs) -> "GscPlan":
        """Plan with per-kernel nonzero counts taken from an allocation map."""
        return cls(
            conv1_n=int(allocation["conv1"]),
            conv2_n=int(allocation["conv2"]),
            linear1_n=int(allocation["linear1"]),
            output_n=int(allocation["output"]),
            **kwargs,
        )


GSC_INPUT_SHAPE = (32, 32, 1)


def gsc_specs(plan: GscPlan) -> list:
    specs: list = [
        ConvSpec("conv1", 64, 5, 1, 0, plan.conv1_n, plan.conv1_shift),
        PoolSpec("maxpool1"),
    ]
    if plan.with_kwta:
        specs.append(KwtaSpec("kwta1", plan.conv1_k, "local"))
    specs += [
        ConvSpec("conv2", 64, 5, 1, 0, plan.conv2_n, plan.conv2_shift),
        PoolSpec("maxpool2"),
    ]
    if plan.with_kwta:
        specs.append(KwtaSpec("kwta2", plan.conv2_k, "local"))
    specs.append(FlattenSpec("flatten"))
    specs.append(LinearSpec("linear1", 1500, plan.linear1_n, plan.linear1_shift))
    if plan.with_kwta:
        specs.append(KwtaSpec("kwta3", plan.linear1_k, "global"))
    specs.append(LinearSpec("output", 12, plan.output_n, None))
    return specs


def build_gsc_network(plan: GscPlan, *, seed: int = 0, weights=None) -> ModelGraph:
    """Build the Table-style speech network for the given sparsity plan."""
    return build_model(GSC_INPUT_SHAPE, gsc_specs(plan), seed=seed, weights=weights)


# ---------------------------------------------------------------------------
# inference


def _conv_dense_macs(layer: ConvLayer, h: int, w: int) -> int:
    oh, ow = layer.cfg.out_spatial(h, w)
    return oh * ow * layer.cfg.window_positions * layer.cfg.out_channels


@dataclass(eq=False)
class InferResult:
    logits: np.ndarray
    report: MacReport


def infer(
    model: ModelGraph,
    frame: QTensor | np.ndarray,
    mode: str = "sparse-sparse",
    timings: dict | None = None,
) -> InferResult:
    """Run one frame through the model under the chosen execution mode."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x = frame.values if isinstance(frame, QTensor) else np.asarray(frame, dtype=np.int8)
    if x.shape != model.input_shape:
        raise ValueError(f"frame shape {x.shape} != model input {model.input_shape}")
    report = MacReport()
    state = x
    for layer in model.layers:
        t0 = time.perf_counter()
        entry = LayerReport(layer.name, layer.kind)
        if isinstance(layer, ConvLayer):
            state = _run_conv(layer, state, mode, entry, model)
        elif isinstance(layer, LinearLayer):
            state = _run_linear(layer, state, mode, entry, model)
        elif isinstance(layer, PoolLayer):
            if isinstance(state, SparseMap):
                state = maxpool_sparse(state, layer.spec.size, layer.spec.stride)
            else:
                state = maxpool2x2(state, layer.spec.size, layer.spec.stride)
        elif isinstance(layer, FlattenLayer):
            if isinstance(state, SparseMap):
                state = flatten_sparse(state)
            else:
                state = state.reshape(-1)
        elif isinstance(layer, KwtaLayer):
            state = _run_kwta(layer, state, mode, entry)
        report.layers.append(entry)
        if timings is not None:
            timings[layer.name] = timings.get(layer.name, 0.0) + time.perf_counter() - t0
    if isinstance(state, (SparseMap, SparseActivation)):
        state = state.densify()
    return InferResult(np.asarray(state), report)


def _run_conv(layer: ConvLayer, state, mode: str, entry: LayerReport, model: ModelGraph):
    if isinstance(state, SparseActivation) or (
        not isinstance(state, SparseMap) and np.asarray(state).ndim != 3
    ):
        raise ValueError(f"layer {layer.name}: convolution needs a 3-D input")
    h = state.height if isinstance(state, SparseMap) else state.shape[0]
    w = state.width if isinstance(state, SparseMap) else state.shape[1]
    entry.dense_macs = _conv_dense_macs(layer, h, w)
    counter = MacCounter()
    if mode == "dense":
        dense_in = state.densify() if isinstance(state, SparseMap) else state
        result = oracle.dense_conv_reference(dense_in, model.dense_conv_weights(layer), layer.cfg)
        acc = result.output
        counter.count(result.dense_macs, result.dense_macs)
    elif isinstance(state, SparseMap):
        acc = kernels.sparse_sparse_conv(state, layer.awt, layer.cfg, counter)
    else:
        acc = kernels.sparse_dense_conv(state, layer.awt, layer.cfg, counter)
    entry.executed_mults = counter.mults
    entry.executed_adds = counter.adds
    acc = acc.astype(np.int64)
    if layer.bias is not None:
        acc = acc + layer.bias.astype(np.int64)
    if layer.requant is None:
        return acc.astype(np.int32)
    return layer.requant.apply(acc)


def _run_linear(layer: LinearLayer, state, mode: str, entry: LayerReport, model: ModelGraph):
    if isinstance(state, SparseMap) or (
        not isinstance(state, SparseActivation) and np.asarray(state).ndim != 1
    ):
        raise ValueError(f"layer {layer.name}: linear needs a flattened input")
    entry.dense_macs = layer.in_features * layer.spec.out_features
    counter = MacCounter()
    if mode == "dense":
        dense_in = state.densify() if isinstance(state, SparseActivation) else state
        result = oracle.dense_linear_reference(dense_in, model.dense_linear_weights(layer))
        acc = result.output
        counter.count(result.dense_macs, result.dense_macs)
    elif isinstance(state, SparseActivation):
        acc = kernels.sparse_sparse_linear(state, layer.awt, layer.spec.out_features, counter)
    else:
        acc = kernels.sparse_dense_linear(state, layer.awt, layer.spec.out_features, counter)
    entry.executed_mults = counter.mults
    entry.executed_adds = counter.adds
    acc = acc.astype(np.int64)
    if layer.bias is not None:
        acc = acc + layer.bias.astype(np.int64)
    if layer.requant is None:
        return acc.astype(np.int32)
    return layer.requant.apply(acc)


def _run_kwta(layer: KwtaLayer, state, mode: str, entry: LayerReport):
    cfg = layer.cfg
    if isinstance(state, (SparseMap, SparseActivation)):
        state = state.densify()
    state = np.asarray(state)
    if state.ndim == 3:
        h, w, c = state.shape
        if mode == "dense":
            flat = state.reshape(-1, c)
            dense_rows = np.stack(
                [oracle.naive_topk(row, cfg.k).densify() for row in flat]
            )
            out = dense_rows.reshape(h, w, c)
            entry.winners = min(cfg.k, c) * h * w
            entry.winner_pool = h * w * c
            return out
        smap = kwta_map(state, cfg.k)
        entry.winners = smap.total_winners
        entry.winner_pool = h * w * c
        if mode == "sparse-sparse":
            return smap
        return smap.densify()
    vec = state.reshape(-1)
    if mode == "dense":
        if cfg.partition is not None:
            m = cfg.partition
            parts = [
                oracle.naive_topk(vec[p : p + m], cfg.k).densify()
                for p in range(0, vec.size, m)
            ]
            dense_vec = np.concatenate(parts)
            entry.winners = sum(min(cfg.k, m) for _ in parts)
            entry.winner_pool = int(vec.size)
            return dense_vec
        act = oracle.naive_topk(vec, cfg.k)
    elif cfg.partition is not None:
        act = local_kwta(vec, cfg)
    else:
        act = global_kwta_histogram(vec, cfg)
    entry.winners = act.n_winners
    entry.winner_pool = int(vec.size)
    if mode == "sparse-sparse":
        return act
    return act.densify()


def validate_graph(model: ModelGraph) -> None:
    """Re-walk a built graph and check the shape chain (used after load)."""
    state: tuple = ("map", *model.input_shape)
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            if state[0] != "map" or state[3] != layer.cfg.in_channels:
                raise ShapeChainError(f"layer {layer.name}: expects {layer.cfg.in_channels}-channel map, chain gives {state}")
            oh, ow = layer.cfg.out_spatial(state[1], state[2])
            if layer.awt.n_positions != layer.cfg.window_positions:
                raise ShapeChainError(f"layer {layer.name}: packed positions do not cover the window")
            if layer.awt.n_kernels > layer.cfg.out_channels:
                raise ShapeChainError(f"layer {layer.name}: kernel id exceeds out_channels")
            state = ("map", oh, ow, layer.cfg.out_channels)
        elif isinstance(layer, PoolLayer):
            if state[0] != "map":
                raise ShapeChainError(f"layer {layer.name}: pooling needs a 3-D input")
            _, h, w, c = state
            s = layer.spec
            if h < s.size or w < s.size or (h - s.size) % s.stride or (w - s.size) % s.stride:
                raise ShapeChainError(f"layer {layer.name}: {h}x{w} input does not tile")
            state = ("map", (h - s.size) // s.stride + 1, (w - s.size) // s.stride + 1, c)
        elif isinstance(layer, FlattenLayer):
            if state[0] != "map":
                raise ShapeChainError(f"layer {layer.name}: flatten needs a 3-D input")
            state = ("vec", state[1] * state[2] * state[3])
        elif isinstance(layer, LinearLayer):
            if state[0] != "vec" or state[1] != layer.in_features:
                raise ShapeChainError(f"layer {layer.name}: expects a {layer.in_features}-vector, chain gives {state}")
            if layer.awt.n_positions != layer.in_features:
                raise ShapeChainError(f"layer {layer.name}: packed positions do not cover the input")
            if layer.awt.n_kernels > layer.spec.out_features:
                raise ShapeChainError(f"layer {layer.name}: kernel id exceeds out_features")
            state = ("vec", layer.spec.out_features)
        elif isinstance(layer, KwtaLayer):
            if state[0] == "map":
                if layer.cfg.partition != state[3]:
                    raise ShapeChainError(f"layer {layer.name}: partition must equal the channel count")
            elif layer.cfg.partition is not None and state[1] % layer.cfg.partition:
                raise ShapeChainError(f"layer {layer.name}: partition does not divide the vector")


# ---------------------------------------------------------------------------
# parameter accounting


def count_parameters(model: ModelGraph) -> tuple[int, int]:
    """(dense parameter count, packed nonzero count).

    Convention: the dense count is every weight plus the convolution biases;
    linear biases are carried by the model but excluded from the count.
    The nonzero count sums the occupied packed slots, i.e. per-layer
    N * kernels for mask-built models.
    """
    dense = 0
    nonzero = 0
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            dense += layer.cfg.window_positions * layer.cfg.out_channels
            if layer.bias is not None:
                dense += int(layer.bias.size)
            nonzero += layer.awt.nonnull_count
        elif isinstance(layer, LinearLayer):
            dense += layer.in_features * layer.spec.out_features
            nonzero += layer.awt.nonnull_count
    return dense, nonzero


# ---------------------------------------------------------------------------
# plan (de)serialization, shared by the CLI and the container sidecar


def specs_from_plan(plan: Mapping) -> tuple[tuple[int, int, int], list]:
    """Parse a plan dictionary into (input_shape, layer specs)."""
    try:
        input_shape = tuple(int(d) for d in plan["input_shape"])
        raw_layers = plan["layers"]
    except (KeyError, TypeError) as e:
        raise ValueError(f"plan is missing {e}") from e
    specs = []
    counts: dict[str, int] = {}

    def auto_name(kind: str) -> str:
        counts[kind] = counts.get(kind, 0) + 1
        return f"{kind}{counts[kind]}"

    for raw in raw_layers:
        kind = raw.get("kind")
        name = raw.get("name") or auto_name(kind)
        if kind == "conv":
            specs.append(
                ConvSpec(
                    name,
                    int(raw["out_channels"]),
                    int(raw["kernel_size"]),
                    int(raw.get("stride", 1)),
                    int(raw.get("padding", 0)),
                    None if raw.get("n_per_kernel") is None else int(raw["n_per_kernel"]),
                    None if raw.get("shift") is None else int(raw["shift"]),
                )
            )
        elif kind == "maxpool":
            specs.append(PoolSpec(name, int(raw.get("size", 2)), int(raw.get("stride", 2))))
        elif kind == "flatten":
            specs.append(FlattenSpec(name))
        elif kind == "linear":
            specs.append(
                LinearSpec(
                    name,
                    int(raw["out_features"]),
                    None if raw.get("n_per_kernel") is None else int(raw["n_per_kernel"]),
                    None if raw.get("shift") is None else int(raw["shift"]),
                )
            )
        elif kind == "kwta":
            specs.append(
                KwtaSpec(
                    name,
                    int(raw["k"]),
                    raw.get("scope", "local"),
                    None if raw.get("partition") is None else int(raw["partition"]),
                )
            )
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return input_shape, specs


def plan_to_dict(input_shape: Sequence[int], specs: Sequence) -> dict:
    layers = []
    for spec in specs:
        if isinstance(spec, ConvSpec):
            layers.append(
                {
                    "kind": "conv",
                    "name": spec.name,
                    "out_channels": spec.out_channels,
                    "kernel_size": spec.kernel_size,
                    "stride": spec.stride,
                    "padding": spec.padding,
                    "n_per_kernel": spec.n_per_kernel,
                    "shift": spec.shift,
                }
            )
        elif isinstance(spec, PoolSpec):
            layers.append({"kind": "maxpool", "name": spec.name, "size": spec.size, "stride": spec.stride})
        elif isinstance(spec, FlattenSpec):
            layers.append({"kind": "flatten", "name": spec.name})
        elif isinstance(spec, LinearSpec):
            layers.append(
                {
                    "kind": "linear",
                    "name": spec.name,
                    "out_features": spec.out_features,
                    "n_per_kernel": spec.n_per_kernel,
                    "shift": spec.shift,
                }
            )
        elif isinstance(spec, KwtaSpec):
            layers.append(
                {
                    "kind": "kwta",
                    "name": spec.name,
                    "k": spec.k,
                    "scope": spec.scope,
                    "partition": spec.partition,
                }
            )
    return {"input_shape": list(input_shape), "layers": layers}
