"""Command-line entry points: pack, infer, bench, resources, gen-synthetic.

Exit codes are a stable contract: 0 success, 1 usage error, 2 data or
validation failure (bad container CRC, mask collisions, shape mismatches).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import container, network
from .network import (
    ConvLayer,
    GscPlan,
    LinearLayer,
    MacReport,
    build_model,
    count_parameters,
    gsc_specs,
    infer,
    kernels_from_masks,
    plan_to_dict,
    specs_from_plan,
    GSC_INPUT_SHAPE,
)
from .packing import PackingError, grouped_collisions
from .resource_model import estimate_ports

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_plan(path: str | None) -> dict:
    if path is None:
        return plan_to_dict(GSC_INPUT_SHAPE, gsc_specs(GscPlan.sparse()))
    with open(path) as fh:
        return json.load(fh)


def _set_summary(awt) -> str:
    from .packing import NULL_KERNEL_ID

    sizes = []
    for s in range(awt.n_sets):
        ids = awt.kernel_ids[:, s]
        sizes.append(int(np.unique(ids[ids != NULL_KERNEL_ID]).size))
    if len(set(sizes)) == 1:
        return f"{awt.n_sets} sets x {sizes[0]} kernels (S={awt.n_sets}, N={awt.n_per_kernel})"
    return f"{awt.n_sets} sets (sizes {'/'.join(str(s) for s in sizes)}, N={awt.n_per_kernel})"


def _print_model_summary(model) -> None:
    for layer in model.layers:
        if isinstance(layer, (ConvLayer, LinearLayer)):
            print(f"  {layer.name}: {_set_summary(layer.awt)}")
    dense, nonzero = count_parameters(model)
    print(f"  parameters: dense {dense}, packed nonzero {nonzero}")


def cmd_pack(args) -> int:
    plan = _load_plan(args.plan)
    input_shape, specs = specs_from_plan(plan)
    masks_npz = np.load(args.masks)
    weights_npz = np.load(args.weights)
    if not masks_npz.files:
        raise PackingError(f"mask file {args.masks} contains no layers")
    weights = {}
    for spec in specs:
        if not isinstance(spec, (network.ConvSpec, network.LinearSpec)):
            continue
        if spec.name not in masks_npz.files:
            raise PackingError(f"mask file has no array for layer {spec.name!r}")
        if spec.name not in weights_npz.files:
            raise PackingError(f"weight file has no array for layer {spec.name!r}")
        kernels = kernels_from_masks(masks_npz[spec.name], weights_npz[spec.name])
        collisions = grouped_collisions(kernels)
        if collisions:
            print(f"layer {spec.name}: complementarity violations:", file=sys.stderr)
            for c in collisions:
                print(f"  position {c.position}: kernels {c.kernel_ids}", file=sys.stderr)
            raise PackingError(f"layer {spec.name}: {len(collisions)} colliding position pairs")
        bias_key = f"{spec.name}.bias"
        bias = weights_npz[bias_key] if bias_key in weights_npz.files else None
        weights[spec.name] = (kernels, bias)
    model = build_model(input_shape, specs, weights=weights)
    container.save(model, args.out)
    Path(str(args.out) + ".json").write_text(json.dumps(plan, indent=2, sort_keys=True) + "\n")
    print(f"packed model written to {args.out}")
    _print_model_summary(model)
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    plan = _load_plan(args.plan)
    input_shape, specs = specs_from_plan(plan)
    model = build_model(input_shape, specs, seed=args.seed)
    prefix = Path(args.out)
    model_path = prefix.with_suffix(".csnn")
    frames_path = prefix.with_suffix(".frames.bin")
    container.save(model, model_path)
    frame_rng = np.random.default_rng([args.seed, 1])
    frames = frame_rng.integers(-128, 128, size=(args.frames, *input_shape), dtype=np.int64)
    frames.astype(np.int8).tofile(frames_path)
    sidecar = {"plan": plan, "seed": args.seed, "frames": args.frames}
    Path(str(model_path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"model written to {model_path}")
    print(f"{args.frames} input frames written to {frames_path}")
    _print_model_summary(model)
    return EXIT_OK


def _read_frames(path: str, input_shape) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.int8)
    frame_size = int(np.prod(input_shape))
    if raw.size == 0 or raw.size % frame_size:
        raise ValueError(
            f"input file holds {raw.size} values; expected a multiple of {frame_size}"
        )
    return raw.reshape(-1, *input_shape)


def cmd_infer(args) -> int:
    model = container.load(args.model)
    frames = _read_frames(args.input, model.input_shape)
    total = MacReport()
    for i, frame in enumerate(frames):
        result = infer(model, frame, mode=args.mode)
        total.merge(result.report)
        logits = ",".join(str(int(v)) for v in result.logits)
        print(f"frame {i}: class={int(np.argmax(result.logits))} logits=[{logits}]")
    if args.report:
        Path(args.report).write_text(total.to_csv())
        print(f"MAC report written to {args.report}")
    return EXIT_OK


def _bench_worker(model, frames, indices, mode):
    report = MacReport()
    timings: dict[str, float] = {}
    results = {}
    for i in indices:
        out = infer(model, frames[i % len(frames)], mode=mode, timings=timings)
        report.merge(out.report)
        results[i] = out.logits
    return report, timings, results


def cmd_bench(args) -> int:
    if args.instances < 1:
        raise ValueError("--instances must be >= 1")
    if args.frames < 0:
        raise ValueError("--frames must be >= 0")
    model = container.load(args.model)
    n = args.frames
    result = {
        "throughput_ips": 0.0,
        "instances": args.instances,
        "frames": n,
        "mode": args.mode,
        "per_layer_latency_us": {},
        "mac_report": MacReport().to_dict(),
    }
    if n > 0:
        pool_rng = np.random.default_rng([args.seed, 1])
        pool = pool_rng.integers(
            -128, 128, size=(min(n, 64), *model.input_shape), dtype=np.int64
        ).astype(np.int8)
        workers = args.instances
        cap = os.environ.get("CS_THREADS")
        if cap:
            workers = max(1, min(workers, int(cap)))
        assignments = [
            [i for i in range(n) if i % args.instances == inst]
            for inst in range(args.instances)
        ]
        t0 = time.perf_counter()
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            futures = [
                pool_exec.submit(_bench_worker, model, pool, idx, args.mode)
                for idx in assignments
                if idx
            ]
            outcomes = [f.result() for f in futures]
        elapsed = time.perf_counter() - t0
        report = MacReport()
        timings: dict[str, float] = {}
        logits_by_frame: dict[int, np.ndarray] = {}
        for worker_report, worker_timings, worker_logits in outcomes:
            report.merge(worker_report)
            for name, t in worker_timings.items():
                timings[name] = timings.get(name, 0.0) + t
            logits_by_frame.update(worker_logits)
        ordered = np.stack([logits_by_frame[i] for i in range(n)])
        result["throughput_ips"] = n / elapsed if elapsed > 0 else 0.0
        result["per_layer_latency_us"] = {
            name: t / n * 1e6 for name, t in sorted(timings.items())
        }
        result["mac_report"] = report.to_dict()
        result["logits_crc32"] = zlib.crc32(ordered.astype("<i4").tobytes()) & 0xFFFFFFFF
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_resources(args) -> int:
    estimate = estimate_ports(
        args.c_in, args.c_out, args.n, args.k, args.bw, args.bid
    )
    print(json.dumps(estimate.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="csnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="pack mask/weight arrays into a model container")
    p.add_argument("--masks", required=True, help="npz of boolean masks per layer name")
    p.add_argument("--weights", required=True, help="npz of int8 weights per layer name")
    p.add_argument("--out", required=True, help="output container path")
    p.add_argument("--plan", help="architecture plan JSON (default: built-in speech network)")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic model and input frames")
    p.add_argument("--plan", help="architecture plan JSON (default: built-in speech network)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix (writes .csnn, .frames.bin)")
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("infer", help="run frames through a model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="raw int8 frames, row-major")
    p.add_argument("--mode", choices=network.MODES, default="sparse-sparse")
    p.add_argument("--report", help="write the per-layer MAC report CSV here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="benchmark replicated model instances")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--instances", type=int, default=1)
    p.add_argument("--mode", choices=network.MODES, default="sparse-sparse")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON result here (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("resources", help="memory port / bandwidth estimate for a packed layer")
    p.add_argument("--c-in", type=int, required=True)
    p.add_argument("--c-out", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="nonzero weights per kernel")
    p.add_argument("--k", type=int, required=True, help="nonzero activations per vector")
    p.add_argument("--bw", type=int, default=8, help="weight bit width")
    p.add_argument("--bid", type=int, default=None, help="kernel id bit width")
    p.set_defaults(func=cmd_resources)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (container.ContainerError, PackingError, ValueError, OSError) as exc:
        print(f"csnn: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
