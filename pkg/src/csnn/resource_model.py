"""Analytical memory-port and bandwidth model for a packed sparse layer.

The on-chip memories are modeled after dual-ported URAM blocks: 72-bit
ports, 288 Kbit capacity.  Each of the K parallel activation lookups needs
its own port, and each port must deliver all S slot entries for a position
in one read, so the port requirement falls linearly with activation
sparsity and the port width falls linearly with weight sparsity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

URAM_PORT_BITS = 72
URAM_PORTS = 2
URAM_CAPACITY_BITS = 288 * 1024


@dataclass(frozen=True)
class PortEstimate:
    ports: int
    port_width_bits: int
    urams: int
    total_bandwidth_bits_per_cycle: int
    urams_bandwidth_bound: int
    urams_capacity_bound: int
    binding: str  # "bandwidth" | "capacity"

    def to_dict(self) -> dict:
        return {
            "ports": self.ports,
            "port_width_bits": self.port_width_bits,
            "urams": self.urams,
            "total_bandwidth_bits_per_cycle": self.total_bandwidth_bits_per_cycle,
            "urams_bandwidth_bound": self.urams_bandwidth_bound,
            "urams_capacity_bound": self.urams_capacity_bound,
            "binding": self.binding,
        }


def default_id_bits(c_out: int) -> int:
    """Bits for a kernel id with one code point reserved for the null id."""
    return max(1, math.ceil(math.log2(c_out + 1)))


def estimate_ports(
    c_in: int,
    c_out: int,
    n_per_kernel: int,
    k_active: int,
    bit_width_weight: int = 8,
    bit_width_id: int | None = None,
) -> PortEstimate:
    """Port/bandwidth estimate for a 1x1 [c_in:c_out] packed layer.

    ``ports = K`` (one lookup per parallel nonzero activation) and
    ``port_width = S * (B_W + B_ID)`` with ``S = ceil(c_out*N/c_in)`` sets
    per position.  URAM demand is reported both bandwidth-bound and
    capacity-bound; the larger one binds.
    """
    if min(c_in, c_out, n_per_kernel, k_active) < 1:
        raise ValueError("all size parameters must be positive")
    if bit_width_id is None:
        bit_width_id = default_id_bits(c_out)
    if not 1 <= bit_width_weight <= 16 or not 1 <= bit_width_id <= 16:
        raise ValueError("bit widths must be in [1, 16]")
    sets = math.ceil(c_out * n_per_kernel / c_in)
    entry_bits = bit_width_weight + bit_width_id
    ports = k_active
    port_width_bits = sets * entry_bits
    total_bandwidth = ports * port_width_bits
    urams_bandwidth = math.ceil(total_bandwidth / (URAM_PORTS * URAM_PORT_BITS))
    storage_bits = c_in * sets * entry_bits
    urams_capacity = math.ceil(storage_bits / URAM_CAPACITY_BITS)
    binding = "bandwidth" if urams_bandwidth >= urams_capacity else "capacity"
    return PortEstimate(
        ports=ports,
        port_width_bits=port_width_bits,
        urams=max(urams_bandwidth, urams_capacity),
        total_bandwidth_bits_per_cycle=total_bandwidth,
        urams_bandwidth_bound=urams_bandwidth,
        urams_capacity_bound=urams_capacity,
        binding=binding,
    )
