"""Dense output-stationary systolic array used as the comparison baseline.

Each PE consumes one weight and one feature element per base-clock tick,
zeros included, so its schedule is fixed: with ``K`` elements per receptive
field, element ``e`` of tile ``t`` reaches PE ``(r, c)`` at tick
``t*K + e + r + c``. Only the result chain needs stepping, and it uses the
same one-slot-per-PE shift semantics as the sparse engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ecoo import decode_stream
from .engine import Counters, ResultToken, SimConfig, SimReport
from .mapper import DataflowProgram, Source, schedule_ce
from .metrics import energy
from .model import INT32_MAX, INT32_MIN, AccumulatorOverflow


@dataclass
class DenseStream:
    values: list  # plain ints in stream group order

    def __len__(self):
        return len(self.values)


def dense_streams(program: DataflowProgram):
    """Decode every feature group and kernel stream back to dense vectors."""
    groups = {gid: DenseStream([s.value for s in decode_stream(st)]) for gid, st in program.groups.items()}
    kernels = [DenseStream([s.value for s in decode_stream(st)]) for st in program.kernel_streams]
    return groups, kernels


def simulate_naive(program: DataflowProgram, config: SimConfig, trace: bool = False) -> SimReport:
    if program.N != config.N or program.M != config.M:
        raise ValueError(f"program lowered for {program.N}x{program.M}, config is {config.N}x{config.M}")
    if config.ce_enabled and not program.ce_scheduled:
        program = schedule_ce(program)
    N, M = config.N, config.M
    ctr = Counters()
    groups, kernels = dense_streams(program)
    K = program.layer.kernel_size
    elem_bytes = 2 if program.mixed else 1

    slots = {}
    values = {}
    ready = {}  # (r, c) -> list of (tick, coords), in tile order
    field_cache = {}
    for t in program.tiles:
        rows, cols = t.row_assignments, t.col_assignments
        fvecs = []
        for r, dirs in enumerate(t.feature_directives):
            key = tuple(d.group_id for d in dirs)
            vec = field_cache.get(key)
            if vec is None:
                vec = np.array([v for d in dirs for v in groups[d.group_id].values], dtype=np.int64)
                field_cache[key] = vec
            fvecs.append(vec)
            for d in dirs:
                n = len(groups[d.group_id])
                if config.ce_enabled and d.source is Source.NEIGHBOR:
                    ctr.neighbor_reads += n
                    ctr.fifo_reads += n
                else:
                    ctr.fb_reads += n
                    ctr.fb_group_reads += 1
        F = np.stack(fvecs)
        W = np.stack([np.array(kernels[k].values, dtype=np.int64) for k in cols])
        acc = F @ W.T
        for r, pos in enumerate(rows):
            for c, k in enumerate(cols):
                coords = (t.index, r, c)
                slots[coords] = (pos[0], pos[1], k)
                v = int(acc[r, c])
                if not INT32_MIN <= v <= INT32_MAX:
                    raise AccumulatorOverflow(f"naive PE({r},{c}) accumulated {v}, outside 32-bit range")
                values[coords] = v
                ready.setdefault((r, c), []).append((t.index * K + K + r + c, coords))
        ctr.wb_reads += len(cols) * K
        active = len(rows) * len(cols)
        ctr.mac_ops += active * K
        ctr.fifo_writes += 2 * active * K

    collector, last_tick = _drain_results(N, M, ready, values, ctr)
    cycles = last_tick + 1 if collector else 0
    fb_bytes, wb_bytes = _dense_capacity(program, config.ce_enabled, elem_bytes)
    counters = ctr.as_dict()
    uniq = sum(len(g) for gid, g in groups.items() if gid >= 0)
    counters["dram_bytes"] = (uniq + sum(len(k) for k in kernels)) * elem_bytes
    counters["fb_bytes"] = fb_bytes
    counters["wb_bytes"] = wb_bytes
    report = SimReport(
        kind="naive",
        config=config,
        layer=program.layer,
        ds_cycles=cycles,
        mac_cycles=cycles,
        counters=counters,
        tokens=sorted(collector, key=lambda t: t.coords),
        workload_digest=program.workload_digest,
        slots=slots,
    )
    if trace:
        report.group_log = _group_log(program, N, M)
    report.energy = energy(report, config.energy)
    return report


def _drain_results(N, M, ready, values, ctr):
    """Step the per-column result chains, jumping over idle stretches."""
    collector = []
    last_tick = 0
    for c in range(M):
        pending = {r: list(ready.get((r, c), [])) for r in range(N)}
        heads = {r: 0 for r in range(N)}
        slot = [None] * N
        left = sum(len(v) for v in pending.values())
        tick = min((v[0][0] for v in pending.values() if v), default=0)
        while left:
            # Result chain first, then any PE whose result is ready and whose slot is free.
            if slot[N - 1] is not None:
                collector.append(slot[N - 1])
                slot[N - 1] = None
                ctr.rf_hops += 1
                left -= 1
                last_tick = max(last_tick, tick)
            for r in range(N - 2, -1, -1):
                if slot[r] is not None and slot[r + 1] is None:
                    slot[r + 1], slot[r] = slot[r], None
                    ctr.rf_hops += 1
            for r in range(N):
                h = heads[r]
                q = pending[r]
                if h < len(q) and q[h][0] <= tick and slot[r] is None:
                    coords = q[h][1]
                    slot[r] = ResultToken(values[coords], coords)
                    heads[r] = h + 1
            tick += 1
            if left and all(s is None for s in slot):
                nxt = [pending[r][heads[r]][0] for r in range(N) if heads[r] < len(pending[r])]
                if nxt:
                    tick = max(tick, min(nxt))
    return collector, last_tick


def _dense_capacity(program, ce_enabled, elem_bytes):
    wb = len(program.kernel_streams) * program.layer.kernel_size * elem_bytes
    fb = 0
    for t in program.tiles:
        if t.col_assignments and t.col_assignments[0] != 0:
            continue
        for dirs in t.feature_directives:
            for d in dirs:
                if ce_enabled and d.source is Source.NEIGHBOR:
                    continue
                fb += program.groups[d.group_id].length * elem_bytes
    return fb, wb


def _group_log(program, N, M):
    """Tick at which each PE finishes each dense group."""
    K = program.layer.kernel_size
    lengths = [program.groups[d.group_id].length for d in program.tiles[0].feature_directives[0]] if program.tiles else []
    log = {}
    for t in program.tiles:
        for r in range(len(t.row_assignments)):
            for c in range(len(t.col_assignments)):
                done = t.index * K + r + c - 1
                ticks = log.setdefault((r, c), [])
                for n in lengths:
                    done += n
                    ticks.append(done)
    return log
