"""Kernel/neuron memory footprints and layer-to-core placement for the nine-core Speck chip.

Core limits are read as Ki *entries*: kernel entries hold 8-bit weights, neuron
entries 16-bit states. Reports show both entry and byte figures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .snn.layers import Conv, NetworkConfig, spatial_trace

KI = 1024
KERNEL_ENTRY_BYTES = 1
NEURON_ENTRY_BYTES = 2


class CoreSpec(NamedTuple):
    id: int
    kernel_limit: int  # Ki entries
    neuron_limit: int  # Ki entries


SPECK_CORES = tuple(
    CoreSpec(i, k, n)
    for i, (k, n) in enumerate([(16, 64)] * 3 + [(32, 32)] * 2 + [(64, 16)] * 2 + [(16, 16)] * 2)
)

# Reference per-layer memory table: (N_M column, K_MT column, Cores ID) in Ki, None = "all".
PRINTED_TABLE = (
    (0.78, 15.02, None),
    (9.00, 64.00, (0, 1, 2)),
    (9.00, 4.00, None),
    (2.25, 1.00, None),
    (1.12, 0.50, None),
    (1.12, 1.00, None),
    (18.00, 1.12, (3, 4, 5, 6)),
    (34.37, 2.42, (5, 6)),
)


class KernelMemory(NamedTuple):
    addressed: int  # c * 2^(ceil log2(kx*ky) + ceil log2 f)
    exact: int  # c * kx * ky * f


def _ceil_log2(n: int) -> int:
    return (n - 1).bit_length()


def kernel_memory(conv: Conv) -> KernelMemory:
    kk = conv.k_x * conv.k_y
    addressed = conv.c_in * 2 ** (_ceil_log2(kk) + _ceil_log2(conv.c_out))
    return KernelMemory(addressed, conv.c_in * kk * conv.c_out)


def neuron_memory(f: int, f_x: int, f_y: int) -> int:
    if min(f, f_x, f_y) <= 0:
        raise ValueError("neuron memory needs positive dimensions")
    return f * f_x * f_y


@dataclass(frozen=True)
class LayerFootprint:
    name: str
    kernel_entries: int
    neuron_entries: int
    kernel_entries_exact: int | None = None

    def __post_init__(self):
        if self.kernel_entries < 0 or self.neuron_entries < 0:
            raise ValueError("footprints must be non-negative")

    @property
    def kernel_ki(self) -> float:
        return self.kernel_entries / KI

    @property
    def neuron_ki(self) -> float:
        return self.neuron_entries / KI

    @property
    def exact_kernel_ki(self) -> float:
        return (self.kernel_entries if self.kernel_entries_exact is None else self.kernel_entries_exact) / KI


def layer_footprints(net: NetworkConfig, addressed: bool = True) -> list[LayerFootprint]:
    """One footprint per conv block; neuron memory uses the conv's output map (before pooling)."""
    shapes = spatial_trace(net)
    out = []
    for n, i in enumerate(net.conv_indices(), start=1):
        conv = net.layers[i]
        km = kernel_memory(conv)
        fs = shapes[i]
        out.append(LayerFootprint(
            f"layer{n}",
            km.addressed if addressed else km.exact,
            neuron_memory(conv.c_out, fs.f_x, fs.f_y),
            km.exact,
        ))
    return out


def compatible_cores(footprint: LayerFootprint, cores=SPECK_CORES) -> frozenset[int]:
    return frozenset(
        c.id for c in cores
        if c.kernel_limit * KI >= footprint.kernel_entries and c.neuron_limit * KI >= footprint.neuron_entries
    )


@dataclass(frozen=True)
class Mapping:
    assignment: dict | None  # layer index -> core id
    conflict: tuple | None = None  # layer indices that cannot all be placed

    @property
    def feasible(self) -> bool:
        return self.assignment is not None


def assign_layers(footprints, cores=SPECK_CORES) -> Mapping:
    """Injective layer -> core placement by backtracking.

    Most constrained layer first, lowest core id first. When no placement
    exists, returns a set of layers whose joint candidate cores are fewer than
    the layers themselves.
    """
    options = [sorted(compatible_cores(fp, cores)) for fp in footprints]
    order = sorted(range(len(options)), key=lambda i: (len(options[i]), i))
    assignment: dict[int, int] = {}
    used: set[int] = set()

    def place(k: int) -> bool:
        if k == len(order):
            return True
        layer = order[k]
        for core in options[layer]:
            if core in used:
                continue
            assignment[layer] = core
            used.add(core)
            if place(k + 1):
                return True
            del assignment[layer]
            used.discard(core)
        return False

    if place(0):
        return Mapping(dict(sorted(assignment.items())))
    return Mapping(None, _hall_violator(options))


def _hall_violator(options) -> tuple:
    """Layers reachable by alternating paths from an unmatched layer of a maximum matching."""
    match_core: dict[int, int] = {}

    def augment(layer, seen):
        for core in options[layer]:
            if core in seen:
                continue
            seen.add(core)
            if core not in match_core or augment(match_core[core], seen):
                match_core[core] = layer
                return True
        return False

    free = [layer for layer in range(len(options)) if not augment(layer, set())]
    if not free:
        return ()
    layers, cores, frontier = {free[0]}, set(), [free[0]]
    while frontier:
        layer = frontier.pop()
        for core in options[layer]:
            if core not in cores:
                cores.add(core)
                nxt = match_core[core]
                if nxt not in layers:
                    layers.add(nxt)
                    frontier.append(nxt)
    return tuple(sorted(layers))


# ---------------------------------------------------------------------------
# validation against the printed table

MATCH_AS_PRINTED = "matches-as-printed"
MATCH_SWAPPED = "matches-with-columns-swapped"
MISMATCH = "mismatch"


@dataclass(frozen=True)
class LayerVerdict:
    name: str
    kernel_ki: float
    kernel_exact_ki: float
    neuron_ki: float
    printed_nm: float
    printed_kmt: float
    verdict: str
    kernel_matches: bool  # some printed column equals the kernel value
    neuron_matches: bool


def _close(a: float, b: float, tol: float = 0.01) -> bool:
    return abs(a - b) <= tol


def validate_against_table(footprints, table=PRINTED_TABLE, tol: float = 0.01) -> list[LayerVerdict]:
    """Compare footprints with the printed N_M/K_MT columns under both column orderings.

    A kernel value matches if either its exact or its addressed form agrees
    with the printed column to ``tol`` Ki.
    """
    verdicts = []
    for fp, (nm, kmt, _) in zip(footprints, table):
        kernel_opts = (fp.exact_kernel_ki, fp.kernel_ki)
        neuron = fp.neuron_ki
        as_printed = any(_close(k, kmt, tol) for k in kernel_opts) and _close(neuron, nm, tol)
        swapped = any(_close(k, nm, tol) for k in kernel_opts) and _close(neuron, kmt, tol)
        verdict = MATCH_AS_PRINTED if as_printed else MATCH_SWAPPED if swapped else MISMATCH
        verdicts.append(LayerVerdict(
            fp.name, fp.kernel_ki, fp.exact_kernel_ki, neuron, nm, kmt, verdict,
            any(_close(k, c, tol) for k in kernel_opts for c in (nm, kmt)),
            any(_close(neuron, c, tol) for c in (nm, kmt)),
        ))
    return verdicts


def format_report(net: NetworkConfig, cores=SPECK_CORES) -> tuple[str, Mapping]:
    fps = layer_footprints(net)
    mapping = assign_layers(fps, cores)
    lines = [
        f"{'layer':<8}{'kernel':>10}{'exact':>10}{'kernel B':>10}{'neuron':>10}{'neuron B':>11}  cores",
    ]
    for fp in fps:
        cores_ok = sorted(compatible_cores(fp, cores))
        shown = "all" if len(cores_ok) == len(cores) else ",".join(map(str, cores_ok)) or "-"
        lines.append(
            f"{fp.name:<8}{fp.kernel_ki:>9.2f}K{fp.exact_kernel_ki:>9.2f}K"
            f"{fp.kernel_entries * KERNEL_ENTRY_BYTES:>10}{fp.neuron_ki:>9.2f}K"
            f"{fp.neuron_entries * NEURON_ENTRY_BYTES:>11}  {shown}"
        )
    if len(fps) == len(PRINTED_TABLE):
        lines.append("")
        lines.append("reference-table check (Ki, tolerance 0.01):")
        for v in validate_against_table(fps):
            lines.append(f"  {v.name:<8} printed N_M={v.printed_nm:<6} K_MT={v.printed_kmt:<6} -> {v.verdict}")
    lines.append("")
    if mapping.feasible:
        lines.append("assignment: " + ", ".join(f"{fps[i].name}->core{c}" for i, c in mapping.assignment.items()))
    else:
        lines.append("infeasible: layers " + ", ".join(fps[i].name for i in mapping.conflict)
                     + " compete for too few cores")
    return "\n".join(lines), mapping
