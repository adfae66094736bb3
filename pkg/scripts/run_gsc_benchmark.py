#!/usr/bin/env python3
"""Desk-scale benchmark of the speech-command network.

Builds a synthetic model for the chosen sparsity plan, runs the dense
reference path and both packed paths on the same frames, and prints the
per-layer MAC table plus measured host throughput.  Absolute throughput is
host-dependent; the MAC ratios are the portable result.
"""

import argparse
import json
import time

import numpy as np

from csnn.network import GscPlan, build_gsc_network, infer

MODES = ("dense", "sparse-dense", "sparse-sparse")


def run_mode(model, frames, mode):
    t0 = time.perf_counter()
    report = None
    for frame in frames:
        result = infer(model, frame, mode=mode)
        if report is None:
            report = result.report
        else:
            report.merge(result.report)
    elapsed = time.perf_counter() - t0
    return report, len(frames) / elapsed


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--frames", type=int, default=20, help="frames for the packed modes")
    parser.add_argument("--dense-frames", type=int, default=2, help="frames for the slow dense path")
    parser.add_argument("--allocation", help="JSON file of per-layer nonzeros per kernel")
    args = parser.parse_args()

    if args.allocation:
        with open(args.allocation) as fh:
            plan = GscPlan.from_allocation(json.load(fh))
    else:
        plan = GscPlan.sparse()
    model = build_gsc_network(plan, seed=args.seed)
    rng = np.random.default_rng([args.seed, 1])
    frames = rng.integers(-128, 128, size=(args.frames, 32, 32, 1)).astype(np.int8)

    throughput = {}
    reports = {}
    for mode in MODES:
        subset = frames[: args.dense_frames] if mode == "dense" else frames
        reports[mode], throughput[mode] = run_mode(model, subset, mode)
        print(f"{mode}: {throughput[mode]:.1f} inferences/sec")

    print("\nper-layer executed multiplies (one frame)")
    header = f"{'layer':<10}{'dense':>12}" + "".join(f"{m:>16}" for m in MODES)
    print(header)
    n_layers = len(reports["dense"].layers)
    for idx in range(n_layers):
        ref = reports["sparse-sparse"].layers[idx]
        if ref.kind not in ("conv", "linear"):
            continue
        row = f"{ref.name:<10}{reports['dense'].layers[idx].dense_macs // args.dense_frames:>12}"
        for mode in MODES:
            layer = reports[mode].layers[idx]
            per_frame = layer.executed_mults // (args.dense_frames if mode == "dense" else args.frames)
            row += f"{per_frame:>16}"
        print(row)
    for mode in MODES:
        ratio = reports[mode].reduction_ratio
        print(f"{mode}: executed/dense = {100 * ratio:.3f}%")
    speedup = throughput["sparse-sparse"] / throughput["dense"]
    print(f"\nsparse-sparse vs dense reference path: {speedup:.1f}x on this host")


if __name__ == "__main__":
    main()
