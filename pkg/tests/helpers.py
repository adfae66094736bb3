"""Shared builders for tests: tiling kernels, dense expansions, sparse inputs."""

from __future__ import annotations

import numpy as np

from csnn.kwta import KwtaConfig, SparseActivation, SparseMap, global_kwta_histogram, kwta_map
from csnn.packing import generate_complementary_masks
from csnn.tensor import SparseKernel


def random_kernels(shape, n_per_kernel, n_kernels, seed) -> list[SparseKernel]:
    """Kernels on deterministic tiling masks with random nonzero weights."""
    rng = np.random.default_rng(seed)
    masks = generate_complementary_masks(shape, n_per_kernel, n_kernels, seed)
    kernels = []
    for kid, mask in enumerate(masks):
        positions = np.flatnonzero(mask.reshape(-1)).astype(np.int64)
        weights = rng.integers(-128, 128, size=positions.size)
        weights[weights == 0] = 1
        kernels.append(SparseKernel(kid, tuple(shape), positions, weights.astype(np.int8)))
    return kernels


def dense_from_kernels(kernels, n_out, shape) -> np.ndarray:
    """Mask-expanded dense weights, one row per kernel id."""
    dense = np.zeros((n_out, *shape), dtype=np.int8)
    for k in kernels:
        flat = dense[k.kernel_id].reshape(-1)
        flat[k.positions] = k.weights
    return dense


def random_int8(rng, shape) -> np.ndarray:
    return rng.integers(-128, 128, size=shape).astype(np.int8)


def random_sparse_map(rng, h, w, c, k) -> SparseMap:
    return kwta_map(random_int8(rng, (h, w, c)), k)


def random_sparse_vec(rng, n, k) -> SparseActivation:
    return global_kwta_histogram(random_int8(rng, n), KwtaConfig(k))
