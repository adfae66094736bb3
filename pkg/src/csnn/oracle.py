"""Naive dense reference implementations used as ground truth.

Everything here is deliberately unoptimized: plain Python loops over plain
Python integers, sharing no code with the packed sparse kernels, so that
bit-exact equivalence checks against the fast path actually mean something.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kwta import SparseActivation


@dataclass(frozen=True, eq=False)
class OracleResult:
    output: np.ndarray
    dense_macs: int


def dense_conv_reference(x, weights, cfg) -> OracleResult:
    """Direct convolution: loop over outputs, accumulate over the window.

    ``x`` is (H, W, C_in), ``weights`` is (C_out, kh, kw, C_in); zero padding
    is applied implicitly via bounds checks.  Accumulation happens in Python
    integers and is range-asserted against the 32-bit accumulator contract.
    """
    xs = np.asarray(x).tolist()
    ws = np.asarray(weights).tolist()
    h, w = len(xs), len(xs[0])
    c_in = len(xs[0][0])
    c_out = len(ws)
    kk = cfg.kernel_size
    if len(ws[0]) != kk or len(ws[0][0]) != kk or len(ws[0][0][0]) != c_in:
        raise ValueError("weight tensor does not match the convolution config")
    oh, ow = cfg.out_spatial(h, w)
    out = [[[0] * c_out for _ in range(ow)] for _ in range(oh)]
    for oy in range(oh):
        for ox in range(ow):
            iy0 = oy * cfg.stride - cfg.padding
            ix0 = ox * cfg.stride - cfg.padding
            row = out[oy][ox]
            for oc in range(c_out):
                acc = 0
                wk = ws[oc]
                for ky in range(kk):
                    y = iy0 + ky
                    if y < 0 or y >= h:
                        continue
                    for kx in range(kk):
                        xcol = ix0 + kx
                        if xcol < 0 or xcol >= w:
                            continue
                        xv = xs[y][xcol]
                        wv = wk[ky][kx]
                        for c in range(c_in):
                            acc += xv[c] * wv[c]
                assert -(2**31) <= acc < 2**31, "accumulator left the 32-bit range"
                row[oc] = acc
    macs = oh * ow * c_out * kk * kk * c_in
    return OracleResult(np.array(out, dtype=np.int32), macs)


def dense_linear_reference(x, matrix) -> OracleResult:
    """Naive matrix-vector product; ``matrix`` is (n_out, n_in)."""
    xs = np.asarray(x).tolist()
    ms = np.asarray(matrix).tolist()
    n_in = len(xs)
    if any(len(row) != n_in for row in ms):
        raise ValueError("matrix width does not match the input length")
    out = []
    for row in ms:
        acc = 0
        for a, b in zip(xs, row):
            acc += a * b
        assert -(2**31) <= acc < 2**31, "accumulator left the 32-bit range"
        out.append(acc)
    return OracleResult(np.array(out, dtype=np.int32), len(ms) * n_in)


def naive_topk(values, k: int, tie_policy: str = "lowest_index") -> SparseActivation:
    """Stable full sort, take k, lowest index first among equal values."""
    if tie_policy != "lowest_index":
        raise ValueError("only lowest_index tie policy is supported")
    vs = [int(v) for v in np.asarray(values).tolist()]
    order = sorted(range(len(vs)), key=lambda i: (-vs[i], i))
    chosen = sorted(order[: max(0, min(k, len(vs)))])
    return SparseActivation(
        len(vs),
        np.array(chosen, dtype=np.int64),
        np.array([vs[i] for i in chosen], dtype=np.int8),
        k,
    )
