#!/usr/bin/env python3
"""Sweep the memory-port model over weight and activation sparsity.

Prints a CSV of port/bandwidth/URAM estimates for a [C:C] 1x1 layer across
N and K grids, showing the linear scaling of ports with K and of port width
with N.
"""

import argparse

from csnn.resource_model import estimate_ports


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--channels", type=int, default=64)
    parser.add_argument("--grid", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32])
    parser.add_argument("--bw", type=int, default=8)
    args = parser.parse_args()

    print("c,n,k,ports,port_width_bits,bandwidth_bits_per_cycle,urams,binding")
    for n in args.grid:
        for k in args.grid:
            est = estimate_ports(args.channels, args.channels, n, k, args.bw)
            print(
                f"{args.channels},{n},{k},{est.ports},{est.port_width_bits},"
                f"{est.total_bandwidth_bits_per_cycle},{est.urams},{est.binding}"
            )


if __name__ == "__main__":
    main()
