"""Sparse-sparse int8 inference built on complementary weight packing.

Non-overlapping sparse kernels are overlaid into dense kernel-ID-augmented
tensors offline; at inference time k-WTA keeps activations sparse and each
winner gathers only its packed weight slots, so the executed multiply count
scales with the product of weight and activation sparsity while staying
bit-exact with a dense reference.
"""

from .kernels import (
    AugmentedEntry,
    ConvConfig,
    MacCounter,
    RoutedProduct,
    conv3x3_via_nine_1x1,
    gather_weights,
    prefix_sum_arbitrate,
    route_and_sum,
    sparse_dense_conv,
    sparse_dense_linear,
    sparse_sparse_conv,
    sparse_sparse_linear,
    split_into_taps,
    stem_conv7x7,
)
from .kwta import (
    KwtaConfig,
    SparseActivation,
    SparseMap,
    global_kwta_histogram,
    kwta_map,
    local_kwta,
    topk_fifo_merge,
)
from .packing import (
    NULL_KERNEL_ID,
    AugmentedWeightTensor,
    Collision,
    ComplementarySet,
    PackingError,
    combine,
    generate_complementary_masks,
    pack_kernels,
    partition_into_complementary_sets,
    stack_sets,
    unpack,
    verify_complementarity,
)
from .network import (
    GscPlan,
    InferResult,
    MacReport,
    ModelGraph,
    ShapeChainError,
    build_gsc_network,
    build_model,
    count_parameters,
    infer,
    maxpool2x2,
)
from .resource_model import PortEstimate, estimate_ports
from .tensor import (
    QTensor,
    Requantizer,
    SparseKernel,
    dense_to_sparse,
    requantize,
    sparse_to_dense,
)

__version__ = "0.1.0"
