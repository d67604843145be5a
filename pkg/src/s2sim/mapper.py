"""Lower a convolution layer onto the PE array.

Output positions are enumerated in raster order and dealt ``N`` at a time to
PE rows, so neighbouring rows hold horizontally adjacent outputs. Kernels
are dealt ``M`` at a time to PE columns. Every receptive field (and every
kernel) is reshaped into channel groups ordered as

    channel group -> kernel row -> kernel column (innermost)

which makes row ``r + 1`` stream, one period early, exactly the tap that
row ``r`` needs next whenever the stride is 1. The collective-element
schedule turns those repeats into neighbour reads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .ecoo import (
    DEFAULT_GROUP_LEN,
    CompressedStream,
    StreamKind,
    encode_group,
    stream_footprint_bits,
)
from .model import ConvLayerSpec, Scalar, Tensor3, Precision, _check_shapes


class Source(enum.Enum):
    FB = "FB"
    NEIGHBOR = "NEIGHBOR"


@dataclass(frozen=True)
class GroupDirective:
    group_id: int
    source: Source = Source.FB


@dataclass
class Tile:
    index: int
    row_assignments: list  # output position (i', j') per active PE row
    col_assignments: list  # kernel index per active PE column
    feature_directives: list  # per row: list[GroupDirective]
    weight_streams: list  # per column: CompressedStream


@dataclass
class DataflowProgram:
    layer: ConvLayerSpec
    G: int
    N: int
    M: int
    tiles: list
    groups: dict  # group id -> CompressedStream (feature)
    kernel_streams: list  # kernel index -> CompressedStream (weight)
    mixed: bool = False
    ce_scheduled: bool = False
    workload_digest: str = ""

    @property
    def groups_per_field(self) -> int:
        kh, kl, kd = self.layer.kernel
        return kh * kl * math.ceil(kd / self.G)

    @property
    def slot_count(self) -> int:
        return sum(len(t.row_assignments) * len(t.col_assignments) for t in self.tiles)


def _channel_groups(D: int, G: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + G, D)) for lo in range(0, D, G)]


def receptive_field_groups(layer: ConvLayerSpec, out_pos, G: int = DEFAULT_GROUP_LEN) -> list[int]:
    """Group ids feeding one output position.

    Real input taps get ids ``(y * L_in + x) * n_groups + k``; taps that fall
    in the zero padding get ``-(k + 1)``. Equal ids mean the same data.
    """
    if G < 1:
        raise ValueError(f"group length must be >= 1, got {G}")
    oh, ol, _ = layer.output
    i, j = out_pos
    if not (0 <= i < oh and 0 <= j < ol):
        raise ValueError(f"output position {out_pos} outside {oh}x{ol}")
    kh, kl, kd = layer.kernel
    ih, il, _ = layer.input
    ng = math.ceil(kd / G)
    s, p = layer.stride, layer.padding
    ids = []
    for k in range(ng):
        for a in range(kh):
            y = i * s + a - p
            for b in range(kl):
                x = j * s + b - p
                if 0 <= y < ih and 0 <= x < il:
                    ids.append((y * il + x) * ng + k)
                else:
                    ids.append(-(k + 1))
    return ids


def _scalars(values: np.ndarray, wide: np.ndarray) -> list[Scalar]:
    return [
        Scalar(int(v), Precision.BITS16 if w else Precision.BITS8)
        for v, w in zip(values.tolist(), wide.tolist())
    ]


def _feature_group(layer: ConvLayerSpec, input: Tensor3, gid: int, G: int) -> CompressedStream:
    kd = layer.kernel[2]
    ng = math.ceil(kd / G)
    chunks = _channel_groups(kd, G)
    if gid < 0:
        lo, hi = chunks[-gid - 1]
        group = [Scalar(0)] * (hi - lo)
    else:
        tap, k = divmod(gid, ng)
        y, x = divmod(tap, layer.input[1])
        lo, hi = chunks[k]
        group = _scalars(input.values[y, x, lo:hi], input.wide[y, x, lo:hi])
    return CompressedStream(tuple(encode_group(group, G)), G, StreamKind.FEATURE, len(group))


def kernel_stream(layer: ConvLayerSpec, kernel: Tensor3, G: int = DEFAULT_GROUP_LEN) -> CompressedStream:
    kh, kl, kd = layer.kernel
    chunks = _channel_groups(kd, G)
    triplets = []
    sizes = []
    n = len(chunks) * kh * kl
    idx = 0
    for lo, hi in chunks:
        for a in range(kh):
            for b in range(kl):
                idx += 1
                sizes.append(hi - lo)
                group = _scalars(kernel.values[a, b, lo:hi], kernel.wide[a, b, lo:hi])
                triplets.extend(encode_group(group, G, is_last_of_kernel=idx == n))
    return CompressedStream(tuple(triplets), G, StreamKind.WEIGHT, kh * kl * kd, tuple(sizes))


def dense_field(layer: ConvLayerSpec, input: Tensor3, out_pos, G: int = DEFAULT_GROUP_LEN) -> list[int]:
    """Receptive field of ``out_pos`` flattened in stream group order."""
    kh, kl, kd = layer.kernel
    s, p = layer.stride, layer.padding
    x = np.pad(input.values, ((p, p), (p, p), (0, 0)))
    i, j = out_pos
    win = x[i * s : i * s + kh, j * s : j * s + kl, :]
    out = []
    for lo, hi in _channel_groups(kd, G):
        out.extend(win[:, :, lo:hi].reshape(-1).tolist())
    return out


def dense_kernel(kernel: Tensor3, G: int = DEFAULT_GROUP_LEN) -> list[int]:
    kd = kernel.dims[2]
    out = []
    for lo, hi in _channel_groups(kd, G):
        out.extend(kernel.values[:, :, lo:hi].reshape(-1).tolist())
    return out


def lower_layer(layer: ConvLayerSpec, input: Tensor3, kernels: Sequence[Tensor3], N: int, M: int, G: int = DEFAULT_GROUP_LEN) -> DataflowProgram:
    if N < 1 or M < 1 or G < 1:
        raise ValueError(f"N, M and G must all be >= 1 (got {N}, {M}, {G})")
    _check_shapes(layer, input, kernels)
    oh, ol, od = layer.output
    positions = [(i, j) for i in range(oh) for j in range(ol)]
    kstreams = [kernel_stream(layer, k, G) for k in kernels]
    groups: dict[int, CompressedStream] = {}
    fields = {}
    for pos in positions:
        ids = receptive_field_groups(layer, pos, G)
        fields[pos] = ids
        for gid in ids:
            if gid not in groups:
                groups[gid] = _feature_group(layer, input, gid, G)
    tiles = []
    for r0 in range(0, len(positions), N):
        rows = positions[r0 : r0 + N]
        for c0 in range(0, od, M):
            cols = list(range(c0, min(c0 + M, od)))
            tiles.append(
                Tile(
                    index=len(tiles),
                    row_assignments=rows,
                    col_assignments=cols,
                    feature_directives=[[GroupDirective(g) for g in fields[pos]] for pos in rows],
                    weight_streams=[kstreams[c] for c in cols],
                )
            )
    mixed = bool(input.wide.any() or any(k.wide.any() for k in kernels))
    digest = _workload_digest(layer, input, kernels, G)
    return DataflowProgram(layer, G, N, M, tiles, groups, kstreams, mixed, False, digest)


def _workload_digest(layer, input, kernels, G) -> str:
    import hashlib

    h = hashlib.blake2b(digest_size=8)
    h.update(repr(sorted(layer.to_dict().items())).encode())
    h.update(str(G).encode())
    h.update(input.digest().encode())
    for k in kernels:
        h.update(k.digest().encode())
    return h.hexdigest()


def schedule_ce(program: DataflowProgram) -> DataflowProgram:
    """Mark directives that can be served from the next row's CE hold.

    CEs advance in lockstep periods, one group each. Row ``r`` at global
    period ``P`` reads from its neighbour when row ``r + 1`` streamed the
    same group at ``P - 1``; the neighbour still holds exactly that group.
    """
    n = program.groups_per_field
    streamed: dict[tuple[int, int], int] = {}
    for t in program.tiles:
        for r, dirs in enumerate(t.feature_directives):
            for q, d in enumerate(dirs):
                streamed[(r, t.index * n + q)] = d.group_id
    tiles = []
    for t in program.tiles:
        new_dirs = []
        for r, dirs in enumerate(t.feature_directives):
            row = []
            for q, d in enumerate(dirs):
                period = t.index * n + q
                held = streamed.get((r + 1, period - 1))
                src = Source.NEIGHBOR if held is not None and held == d.group_id else Source.FB
                row.append(GroupDirective(d.group_id, src))
            new_dirs.append(row)
        tiles.append(replace(t, feature_directives=new_dirs))
    _check_ce_holds(tiles, n)
    return replace(program, tiles=tiles, ce_scheduled=True)


def _check_ce_holds(tiles, n):
    # Each CE holds only the group it streamed in the previous period.
    last = {}
    for t in tiles:
        for r, dirs in enumerate(t.feature_directives):
            for q, d in enumerate(dirs):
                last[(r, t.index * n + q)] = d.group_id
    for t in tiles:
        for r, dirs in enumerate(t.feature_directives):
            for q, d in enumerate(dirs):
                if d.source is Source.NEIGHBOR:
                    assert last.get((r + 1, t.index * n + q - 1)) == d.group_id, "CE hold capacity exceeded"


def _bytes(bits: int) -> int:
    return (bits + 7) // 8


def footprint(program: DataflowProgram, ce_enabled: bool) -> dict:
    """Buffer capacity needed to feed the program.

    Weights count each kernel once. Features count one copy per fetched
    group for a single pass over the output rows (the first column tile);
    with the CE array, groups served by a neighbour need no FB copy.
    """
    if ce_enabled and not program.ce_scheduled:
        program = schedule_ce(program)
    mixed = program.mixed
    wb_bits = sum(stream_footprint_bits(s, mixed) for s in program.kernel_streams)
    fb_bits = 0
    for t in program.tiles:
        if t.col_assignments and t.col_assignments[0] != 0:
            continue
        for dirs in t.feature_directives:
            for d in dirs:
                if ce_enabled and d.source is Source.NEIGHBOR:
                    continue
                fb_bits += stream_footprint_bits(program.groups[d.group_id], mixed)
    return {"fb_bytes": _bytes(fb_bits), "wb_bytes": _bytes(wb_bits)}


def dram_bytes(program: DataflowProgram) -> int:
    """Compressed bytes loaded once from DRAM: unique feature groups and kernels."""
    mixed = program.mixed
    bits = sum(stream_footprint_bits(s, mixed) for s in program.kernel_streams)
    bits += sum(stream_footprint_bits(s, mixed) for gid, s in program.groups.items() if gid >= 0)
    return _bytes(bits)


def program_to_json(program: DataflowProgram) -> dict:
    return {
        "layer": program.layer.to_dict(),
        "G": program.G,
        "N": program.N,
        "M": program.M,
        "mixed": program.mixed,
        "ce_scheduled": program.ce_scheduled,
        "workload_digest": program.workload_digest,
        "groups": {str(g): len(s) for g, s in sorted(program.groups.items())},
        "tiles": [
            {
                "index": t.index,
                "rows": [list(p) for p in t.row_assignments],
                "cols": list(t.col_assignments),
                "directives": [[[d.group_id, d.source.value] for d in dirs] for dirs in t.feature_directives],
                "weight_stream_lengths": [len(s) for s in t.weight_streams],
            }
            for t in program.tiles
        ],
    }
