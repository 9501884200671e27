"""Forward-only measurement of the cross-layer sensitivity matrix.

Quantizing layer ``i`` to one of ``|B|`` candidate bit-widths perturbs
its weights by a fixed vector.  The loss increase of the whole model is
summarized by a symmetric matrix of dimension ``|B| * L``: diagonal
entries capture single-layer damage, off-diagonal entries capture how
two layers' quantization errors interact.  Everything is computed from
plain loss evaluations, and per-batch results are cached in a text
format that merges by sample-weighted averaging.

Flat indexing: entry ``(i * |B| + m, j * |B| + n)`` couples layer ``i``
at menu position ``m`` (0-based, menu sorted ascending) with layer ``j``
at position ``n``.  Entries coupling two different bit-widths of the
same layer are structurally zero: a one-hot assignment never selects
both, and the measurement loop never fills them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .quantizer import perturbation

__all__ = [
    "BitMenu",
    "SensitivityMatrix",
    "measure_diagonal",
    "measure_cross",
    "build_matrix",
    "merge_batches",
    "save_matrix",
    "load_matrix",
]

CACHE_FORMAT = "mixprec-cache"
CACHE_VERSION = 1


@dataclass(frozen=True)
class BitMenu:
    """Sorted distinct candidate bit-widths, each at least 2."""

    bits: tuple[int, ...]

    def __init__(self, bits):
        values = sorted(set(int(b) for b in bits))
        if not values:
            raise ValueError("bit menu must not be empty")
        if any(b < 2 for b in values):
            raise ValueError(f"bit-widths must be >= 2, got {values}")
        object.__setattr__(self, "bits", tuple(values))

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)

    def __contains__(self, bit) -> bool:
        return bit in self.bits

    def index(self, bit: int) -> int:
        try:
            return self.bits.index(bit)
        except ValueError:
            raise ValueError(f"bit-width {bit} is not in the menu {self.bits}") from None


@dataclass(frozen=True)
class SensitivityMatrix:
    """Symmetric ``|B|L x |B|L`` sensitivity entries plus their provenance."""

    menu: BitMenu
    layer_sizes: tuple[int, ...]
    entries: np.ndarray
    sample_count: int

    def __post_init__(self):
        menu = self.menu if isinstance(self.menu, BitMenu) else BitMenu(self.menu)
        sizes = tuple(int(s) for s in self.layer_sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        entries = np.array(self.entries, dtype=np.float64)
        dim = len(menu) * len(sizes)
        if entries.shape != (dim, dim):
            raise ValueError(f"entries must have shape {(dim, dim)}, got {entries.shape}")
        if not np.array_equal(entries, entries.T):
            raise ValueError("entries must be exactly symmetric")
        if int(self.sample_count) < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        entries.setflags(write=False)
        object.__setattr__(self, "menu", menu)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "sample_count", int(self.sample_count))

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def dim(self) -> int:
        return len(self.menu) * self.num_layers

    def flat_index(self, layer: int, menu_pos: int) -> int:
        return layer * len(self.menu) + menu_pos

    def with_entries(self, entries) -> "SensitivityMatrix":
        """Same menu, sizes and sample count with replaced entries."""
        return SensitivityMatrix(self.menu, self.layer_sizes, entries, self.sample_count)

    def has_block_zeros(self) -> bool:
        """True when every same-layer cross-bit entry is exactly zero."""
        nb = len(self.menu)
        for i in range(self.num_layers):
            block = self.entries[i * nb:(i + 1) * nb, i * nb:(i + 1) * nb]
            if np.any(block[~np.eye(nb, dtype=bool)] != 0.0):
                return False
        return True


def measure_diagonal(oracle, layer: int, bits: int, *, baseline=None, delta=None) -> float:
    """Single-layer sensitivity: twice the loss increase of quantizing one layer."""
    if baseline is None:
        baseline = oracle.evaluate({})
    if delta is None:
        delta = perturbation(oracle.layers[layer], bits)
    loss = oracle.evaluate({layer: delta})
    return 2.0 * (loss - baseline)


def measure_cross(oracle, i: int, m_bits: int, j: int, n_bits: int,
                  diag_ii: float, diag_jj: float, *,
                  baseline=None, delta_i=None, delta_j=None) -> float:
    """Pairwise sensitivity from one joint evaluation and the two diagonals.

    Requires ``i < j``.  Algebraically this equals the four-evaluation
    difference ``loss(both) + loss(none) - loss(i) - loss(j)``; reusing the
    already-measured diagonals keeps it to a single new evaluation.
    """
    if i == j:
        raise ValueError("cross measurement needs two distinct layers")
    if i > j:
        raise ValueError(f"cross measurement expects i < j, got i={i}, j={j}")
    if baseline is None:
        baseline = oracle.evaluate({})
    if delta_i is None:
        delta_i = perturbation(oracle.layers[i], m_bits)
    if delta_j is None:
        delta_j = perturbation(oracle.layers[j], n_bits)
    joint = oracle.evaluate({i: delta_i, j: delta_j})
    return joint - baseline - 0.5 * diag_ii - 0.5 * diag_jj


def build_matrix(oracle, menu, *, include_same_layer_cross: bool = False) -> SensitivityMatrix:
    """Measure the full sensitivity matrix of an oracle.

    Costs exactly ``1 + |B|L + |B|^2 L(L-1)/2`` loss evaluations: one
    baseline, one per (layer, bit-width), and one joint evaluation per
    cross pair.  The upper triangle is measured in lexicographic order
    and mirrored, so the result is exactly symmetric and bit-identical
    across runs for a deterministic oracle.

    ``include_same_layer_cross=True`` additionally measures the
    couplings between two bit-widths of the same layer by applying both
    perturbations to that layer at once.  One-hot assignments never see
    these entries; they exist so the quadratic form ``v' G v`` matches
    the underlying curvature for arbitrary dense ``v``, which is what
    the PSD argument relies on.  The default leaves them zero.
    """
    menu = menu if isinstance(menu, BitMenu) else BitMenu(menu)
    layers = oracle.layers
    num_layers = len(layers)
    if num_layers < 1:
        raise ValueError("oracle must expose at least one layer")
    nb = len(menu)
    dim = nb * num_layers
    baseline = oracle.evaluate({})
    deltas = [[perturbation(layers[i], b) for b in menu] for i in range(num_layers)]
    g = np.zeros((dim, dim))
    for i in range(num_layers):
        for m in range(nb):
            p = i * nb + m
            g[p, p] = measure_diagonal(oracle, i, menu.bits[m],
                                       baseline=baseline, delta=deltas[i][m])
    for i in range(num_layers - 1):
        for j in range(i + 1, num_layers):
            for m in range(nb):
                for n in range(nb):
                    p = i * nb + m
                    q = j * nb + n
                    val = measure_cross(oracle, i, menu.bits[m], j, menu.bits[n],
                                        g[p, p], g[q, q], baseline=baseline,
                                        delta_i=deltas[i][m], delta_j=deltas[j][n])
                    g[p, q] = val
                    g[q, p] = val
    if include_same_layer_cross:
        for i in range(num_layers):
            for m in range(nb - 1):
                for n in range(m + 1, nb):
                    p = i * nb + m
                    q = i * nb + n
                    joint = oracle.evaluate({i: deltas[i][m] + deltas[i][n]})
                    val = joint - baseline - 0.5 * g[p, p] - 0.5 * g[q, q]
                    g[p, q] = val
                    g[q, p] = val
    sample_count = int(getattr(oracle, "sample_count", 1))
    matrix = SensitivityMatrix(menu, tuple(l.count for l in layers), g, sample_count)
    if not include_same_layer_cross:
        assert matrix.has_block_zeros()
    return matrix


def merge_batches(parts) -> SensitivityMatrix:
    """Sample-count-weighted mean of per-batch matrices.

    The accumulation order is the order of ``parts``, folded left to
    right, so merging is reproducible; for two parts it is also exactly
    commutative because IEEE addition of two terms is.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("cannot merge an empty list of matrices")
    first = parts[0]
    for p in parts[1:]:
        if p.menu.bits != first.menu.bits:
            raise ValueError(f"bit menus differ: {p.menu.bits} vs {first.menu.bits}")
        if p.layer_sizes != first.layer_sizes:
            raise ValueError(f"layer sizes differ: {p.layer_sizes} vs {first.layer_sizes}")
    total = sum(p.sample_count for p in parts)
    acc = np.zeros_like(first.entries)
    for p in parts:
        acc = acc + float(p.sample_count) * p.entries
    return SensitivityMatrix(first.menu, first.layer_sizes, acc / float(total), total)


def save_matrix(matrix: SensitivityMatrix, path) -> None:
    """Write one matrix as a text cache file.

    Upper-triangle values are printed with 17 significant digits, which
    round-trips IEEE doubles exactly, so save followed by load is the
    identity and identical matrices produce byte-identical files.

    Only matrices with structurally zero same-layer cross-bit entries
    are cacheable; the variant that measures those entries is an
    in-memory analysis tool, not a pipeline artifact.
    """
    if not matrix.has_block_zeros():
        raise ValueError("cache format requires zero same-layer cross-bit entries")
    dim = matrix.dim
    lines = [
        f"{CACHE_FORMAT} {CACHE_VERSION}",
        f"layers {matrix.num_layers}",
        "bits " + " ".join(str(b) for b in matrix.menu.bits),
        "sizes " + " ".join(str(s) for s in matrix.layer_sizes),
        f"samples {matrix.sample_count}",
        f"entries {dim * (dim + 1) // 2}",
    ]
    for p in range(dim):
        for q in range(p, dim):
            lines.append(f"{p} {q} {matrix.entries[p, q]:.17g}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _header_value(line: str, key: str) -> str:
    tag, _, rest = line.partition(" ")
    if tag != key:
        raise ValueError(f"malformed cache file: expected {key!r}, got {line!r}")
    return rest


def load_matrix(path) -> SensitivityMatrix:
    """Read a text cache file written by :func:`save_matrix`."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if len(lines) < 6:
        raise ValueError(f"malformed cache file {path!r}: truncated header")
    fmt = _header_value(lines[0], CACHE_FORMAT)
    if int(fmt) != CACHE_VERSION:
        raise ValueError(f"unsupported cache version {fmt!r}")
    num_layers = int(_header_value(lines[1], "layers"))
    menu = BitMenu(int(b) for b in _header_value(lines[2], "bits").split())
    sizes = tuple(int(s) for s in _header_value(lines[3], "sizes").split())
    samples = int(_header_value(lines[4], "samples"))
    count = int(_header_value(lines[5], "entries"))
    if len(sizes) != num_layers:
        raise ValueError(f"cache file {path!r}: layer count does not match sizes")
    dim = len(menu) * num_layers
    if count != dim * (dim + 1) // 2:
        raise ValueError(f"cache file {path!r}: wrong entry count {count}")
    records = lines[6:]
    if len(records) != count:
        raise ValueError(f"cache file {path!r}: expected {count} records, found {len(records)}")
    entries = np.zeros((dim, dim))
    expect = ((p, q) for p in range(dim) for q in range(p, dim))
    for line, (p, q) in zip(records, expect):
        fields = line.split()
        if len(fields) != 3 or int(fields[0]) != p or int(fields[1]) != q:
            raise ValueError(f"cache file {path!r}: bad record {line!r}")
        value = float(fields[2])
        entries[p, q] = value
        entries[q, p] = value
    matrix = SensitivityMatrix(menu, sizes, entries, samples)
    if not matrix.has_block_zeros():
        raise ValueError(f"cache file {path!r}: same-layer cross-bit entries must be zero")
    return matrix
