"""Cycle-level model of the sparse systolic engine.

One global clock ticks at the dynamic-selection (DS) rate. Every ``R``-th
tick is also a base-clock edge on which the MAC units and the result chain
advance. All writes into a FIFO land at the end of the tick that made them,
and a FIFO's free space is judged by its occupancy at the start of the
tick, so the raster order in which PEs are visited never changes results.

Stream elements travel as plain tuples ``(value, offset, eog, eok, tag16,
hi, limit)``; ``limit`` is the last PE index (row for weights, column for
features) that the element must reach within its tile.
"""

from __future__ import annotations

import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ecoo import EcooTriplet
from .mapper import DataflowProgram, Source, dram_bytes, footprint, schedule_ce
from .metrics import EnergyTable, energy
from .model import INT32_MAX, INT32_MIN, AccumulatorOverflow, Tensor3

log = logging.getLogger("s2sim")
if os.environ.get("S2SIM_LOG"):
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "trace": 5}.get(os.environ["S2SIM_LOG"].lower(), logging.WARNING)
    )

V, OFF, EOG, EOK, T16, HI, LIM = range(7)
FLUSH = None  # sentinel in the WF-FIFO marking a finished kernel


class SimulationDeadlock(RuntimeError):
    pass


class SimulationFault(AssertionError):
    pass


class IncompleteSimulation(RuntimeError):
    pass


@dataclass
class SimConfig:
    N: int = 16
    M: int = 16
    W_dep: Optional[int] = 8  # None means unbounded
    F_dep: Optional[int] = 8
    WF_dep: Optional[int] = 8
    R: int = 4
    G: int = 16
    ce_enabled: bool = True
    mac_freq_mhz: float = 500.0
    energy: EnergyTable = field(default_factory=EnergyTable)

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ValueError(f"array must be at least 1x1, got {self.N}x{self.M}")
        for name in ("W_dep", "F_dep", "WF_dep"):
            d = getattr(self, name)
            if d is not None and (int(d) != d or d < 1):
                raise ValueError(f"{name} must be >= 1 or None (unbounded), got {d}")
        if int(self.R) != self.R or self.R < 1:
            raise ValueError(f"DS:MAC ratio must be an integer >= 1, got {self.R}")
        if self.G < 1:
            raise ValueError(f"group length must be >= 1, got {self.G}")

    @property
    def depths(self):
        return self.W_dep, self.F_dep, self.WF_dep

    def with_depths(self, depths) -> "SimConfig":
        w, f, wf = depths
        return _replace(self, W_dep=w, F_dep=f, WF_dep=wf)

    def to_dict(self) -> dict:
        inf = lambda d: "inf" if d is None else d
        return {
            "N": self.N,
            "M": self.M,
            "W_dep": inf(self.W_dep),
            "F_dep": inf(self.F_dep),
            "WF_dep": inf(self.WF_dep),
            "R": self.R,
            "G": self.G,
            "ce_enabled": self.ce_enabled,
            "mac_freq_mhz": self.mac_freq_mhz,
            "energy": self.energy.to_dict(),
        }


def _replace(cfg, **kw):
    from dataclasses import replace

    return replace(cfg, **kw)


@dataclass
class ResultToken:
    value: int
    coords: tuple  # (tile, row, col)


@dataclass
class SimReport:
    kind: str
    config: SimConfig
    layer: object
    ds_cycles: int
    mac_cycles: int
    counters: dict
    tokens: list  # ResultToken, ordered by coords
    workload_digest: str
    slots: dict  # coords -> (i', j', k')
    energy: dict = field(default_factory=dict)
    pair_log: dict = field(default_factory=dict)
    group_log: dict = field(default_factory=dict)

    def outputs_digest(self) -> str:
        import hashlib

        out = extract_outputs(self, relu=False)
        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(out.values, dtype="<i4").tobytes())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "layer": self.layer.to_dict(),
            "workload_digest": self.workload_digest,
            "ds_cycles": self.ds_cycles,
            "mac_cycles": self.mac_cycles,
            "counters": dict(self.counters),
            "energy": dict(self.energy),
            "outputs_digest": self.outputs_digest() if self.tokens else None,
        }


class Fifo:
    """Bounded queue with end-of-tick write visibility."""

    __slots__ = ("items", "incoming", "depth", "popped", "dirty", "name")

    def __init__(self, depth, name=""):
        self.items = deque()
        self.incoming = []
        self.depth = depth
        self.popped = 0
        self.dirty = False
        self.name = name

    def can_push(self) -> bool:
        return self.depth is None or len(self.items) + self.popped + len(self.incoming) < self.depth

    def push(self, item, dirty_list):
        self.incoming.append(item)
        if not self.dirty:
            self.dirty = True
            dirty_list.append(self)

    def pop(self, dirty_list):
        self.popped += 1
        if not self.dirty:
            self.dirty = True
            dirty_list.append(self)
        return self.items.popleft()

    def commit(self):
        if self.incoming:
            self.items.extend(self.incoming)
            self.incoming.clear()
        self.popped = 0
        self.dirty = False

    def __len__(self):
        return len(self.items) + len(self.incoming)


class Counters:
    __slots__ = (
        "mac_ops",
        "pairs_emitted",
        "flushes",
        "ds_active",
        "fifo_reads",
        "fifo_writes",
        "fb_reads",
        "fb_group_reads",
        "wb_reads",
        "neighbor_reads",
        "rf_hops",
    )

    def __init__(self):
        for s in self.__slots__:
            setattr(self, s, 0)

    def as_dict(self) -> dict:
        return {s: getattr(self, s) for s in self.__slots__}


class PEState:
    """Registers, FIFOs and accumulator of one processing element."""

    __slots__ = (
        "r",
        "c",
        "w_fifo",
        "f_fifo",
        "wf_fifo",
        "w_reg",
        "f_reg",
        "phase",
        "latch",
        "flush_pending",
        "acc",
        "rf_slot",
        "down",
        "right",
        "ds_tiles",
        "mac_tiles",
        "pairs",
        "groups_done",
    )

    def __init__(self, r, c, depths):
        w, f, wf = depths
        self.r, self.c = r, c
        self.w_fifo = Fifo(w, f"W-FIFO({r},{c})")
        self.f_fifo = Fifo(f, f"F-FIFO({r},{c})")
        self.wf_fifo = Fifo(wf, f"WF-FIFO({r},{c})")
        self.w_reg = None
        self.f_reg = None
        self.phase = 0
        self.latch = 0
        self.flush_pending = False
        self.acc = 0
        self.rf_slot = None
        self.down = None  # W-FIFO of PE(r+1, c)
        self.right = None  # F-FIFO of PE(r, c+1)
        self.ds_tiles = deque()
        self.mac_tiles = deque()
        self.pairs = None  # optional trace: list of consumed pairs per tile
        self.groups_done = None  # optional trace: tick of each group boundary


# Outcomes of trying to advance a stream register.
_OK, _EMPTY, _BLOCKED = 0, 1, 2


def _probe(fifo, idx, out):
    """Can the register fed by ``fifo`` move on to its next element?"""
    if not fifo.items:
        return _EMPTY
    if fifo.items[0][LIM] > idx and not out.can_push():
        return _BLOCKED
    return _OK


def _advance(fifo, idx, out, dirty, ctr):
    if not fifo.items:
        return None
    item = fifo.pop(dirty)
    ctr.fifo_reads += 1
    if item[LIM] > idx:
        out.push(item, dirty)
        ctr.fifo_writes += 1
    return item


def ds_step(pe: PEState, dirty: list, ctr: Counters, tick: int = 0) -> bool:
    """One dynamic-selection tick. Returns True when any state changed.

    With both registers loaded:
      * offsets equal: emit the aligned pair (16-bit operands expand to two
        or four shifted pairs, one per tick), then push both streams, or
        only the non-EOG one when exactly one side is at its group end;
      * offsets differ, no EOG: push the smaller offset;
      * exactly one EOG: push the other stream;
      * both EOG: push both, crossing the group boundary.
    Any push or emit that cannot complete stalls the whole step.
    """
    if pe.flush_pending:
        if pe.wf_fifo.can_push():
            pe.wf_fifo.push(FLUSH, dirty)
            ctr.fifo_writes += 1
            pe.flush_pending = False
            return True
        return False

    w, f = pe.w_reg, pe.f_reg
    if w is None or f is None:
        moved = False
        if w is None and pe.w_fifo.items and _probe(pe.w_fifo, pe.r, pe.down) == _OK:
            pe.w_reg = _advance(pe.w_fifo, pe.r, pe.down, dirty, ctr)
            moved = True
        if f is None and pe.f_fifo.items and _probe(pe.f_fifo, pe.c, pe.right) == _OK:
            pe.f_reg = _advance(pe.f_fifo, pe.c, pe.right, dirty, ctr)
            moved = True
        return moved

    wf = pe.wf_fifo
    if w[OFF] == f[OFF]:
        # A zero placeholder matches nothing, whatever the other side holds.
        placeholder = (w[V] == 0 and not w[T16]) or (f[V] == 0 and not f[T16])
        wh = w[T16] and w[HI] and not placeholder
        fh = f[T16] and f[HI] and not placeholder
        phase = pe.phase
        if phase == 0 and wh and fh:
            if not wf.can_push() or _probe(pe.f_fifo, pe.c, pe.right) != _OK:
                return False
            _emit(pe, w[V], f[V], 16, dirty, ctr)
            pe.latch = f[V]
            pe.f_reg = _advance(pe.f_fifo, pe.c, pe.right, dirty, ctr)
            pe.phase = 1
            return True
        if phase == 1:
            if not wf.can_push() or _probe(pe.w_fifo, pe.r, pe.down) != _OK:
                return False
            _emit(pe, w[V], f[V], 8, dirty, ctr)
            pe.w_reg = _advance(pe.w_fifo, pe.r, pe.down, dirty, ctr)
            pe.phase = 2
            return True
        if phase == 2:
            if not wf.can_push():
                return False
            _emit(pe, w[V], pe.latch, 8, dirty, ctr)
            pe.phase = 3
            return True
        if phase == 0 and (wh or fh):
            if wh:
                if not wf.can_push() or _probe(pe.w_fifo, pe.r, pe.down) != _OK:
                    return False
                _emit(pe, w[V], f[V], 8, dirty, ctr)
                pe.w_reg = _advance(pe.w_fifo, pe.r, pe.down, dirty, ctr)
            else:
                if not wf.can_push() or _probe(pe.f_fifo, pe.c, pe.right) != _OK:
                    return False
                _emit(pe, w[V], f[V], 8, dirty, ctr)
                pe.f_reg = _advance(pe.f_fifo, pe.c, pe.right, dirty, ctr)
            return True
        # Last (or only) product of this element.
        if not placeholder and not wf.can_push():
            return False
        we, fe = w[EOG], f[EOG]
        push_w = fe or not we
        push_f = we or not fe
        if not _pushable(pe, push_w, push_f):
            return False
        if not placeholder:
            _emit(pe, w[V], f[V], 0, dirty, ctr)
        pe.phase = 0
        _push(pe, push_w, push_f, dirty, ctr, tick)
        return True

    we, fe = w[EOG], f[EOG]
    if we and fe:
        push_w = push_f = True
    elif we:
        push_w, push_f = False, True
    elif fe:
        push_w, push_f = True, False
    elif w[OFF] < f[OFF]:
        push_w, push_f = True, False
    else:
        push_w, push_f = False, True
    if not _pushable(pe, push_w, push_f):
        return False
    _push(pe, push_w, push_f, dirty, ctr, tick)
    return True


def _emit(pe, wv, fv, shift, dirty, ctr):
    pe.wf_fifo.push((wv, fv, shift), dirty)
    ctr.fifo_writes += 1
    ctr.pairs_emitted += 1


def _pushable(pe, push_w, push_f) -> bool:
    if push_w and _probe(pe.w_fifo, pe.r, pe.down) == _BLOCKED:
        return False
    if push_f and _probe(pe.f_fifo, pe.c, pe.right) == _BLOCKED:
        return False
    return True


def _push(pe, push_w, push_f, dirty, ctr, tick):
    w, f = pe.w_reg, pe.f_reg
    if push_w and push_f and w[EOG] and f[EOG]:
        if pe.groups_done is not None:
            pe.groups_done.append(tick)
        if w[EOK]:
            pe.flush_pending = True
            pe.mac_tiles.append(pe.ds_tiles.popleft())
    if push_w:
        pe.w_reg = _advance(pe.w_fifo, pe.r, pe.down, dirty, ctr)
    if push_f:
        pe.f_reg = _advance(pe.f_fifo, pe.c, pe.right, dirty, ctr)


def mac_step(pe: PEState, dirty: list, ctr: Counters, pair_log: dict | None = None) -> bool:
    """One base-clock MAC tick: consume at most one aligned pair.

    A flush sentinel moves the accumulator into the result slot, stalling
    while that slot is still occupied.
    """
    fifo = pe.wf_fifo
    if not fifo.items:
        return False
    head = fifo.items[0]
    if head is FLUSH:
        if pe.rf_slot is not None:
            return False
        fifo.pop(dirty)
        ctr.fifo_reads += 1
        ctr.mac_ops += 1
        ctr.flushes += 1
        acc = pe.acc
        if not INT32_MIN <= acc <= INT32_MAX:
            raise AccumulatorOverflow(f"PE({pe.r},{pe.c}) accumulated {acc}, outside 32-bit range")
        coords = (pe.mac_tiles.popleft(), pe.r, pe.c)
        pe.rf_slot = ResultToken(acc, coords)
        pe.acc = 0
        if pe.pairs is not None and pair_log is not None:
            pair_log[coords] = pe.pairs
            pe.pairs = []
        return True
    fifo.pop(dirty)
    ctr.fifo_reads += 1
    ctr.mac_ops += 1
    wv, fv, shift = head
    pe.acc += (wv * fv) << shift
    if pe.pairs is not None:
        pe.pairs.append(head)
    return True


def rf_step(column: list, collector: list, ctr: Counters) -> bool:
    """Shift result tokens one hop toward the bottom edge of a column."""
    moved = False
    last = len(column) - 1
    if column[last].rf_slot is not None:
        collector.append(column[last].rf_slot)
        column[last].rf_slot = None
        ctr.rf_hops += 1
        moved = True
    for r in range(last - 1, -1, -1):
        tok = column[r].rf_slot
        if tok is not None and column[r + 1].rf_slot is None:
            column[r + 1].rf_slot = tok
            column[r].rf_slot = None
            ctr.rf_hops += 1
            moved = True
    return moved


class CEArray:
    """Per-row front end that streams feature groups into the array.

    Without collective elements every row fetches its own groups from the
    feature buffer as fast as its first F-FIFO accepts them. With them, the
    CEs step through lockstep periods, one group each; a NEIGHBOR directive
    replays the group the next row's CE streamed (and held) one period ago.
    """

    def __init__(self, rows: list, program: DataflowProgram, ce_enabled: bool, ctr: Counters):
        self.ce_enabled = ce_enabled
        self.ctr = ctr
        self.rows = rows  # row -> first F-FIFO
        n = program.groups_per_field
        self.n = n
        cache = {}
        # queue[r]: list of (period, gid, source, items)
        self.queue = [[] for _ in rows]
        for t in program.tiles:
            lim = len(t.col_assignments) - 1
            for r, dirs in enumerate(t.feature_directives):
                for q, d in enumerate(dirs):
                    key = (d.group_id, lim)
                    items = cache.get(key)
                    if items is None:
                        items = tuple(tuple(tr) + (lim,) for tr in program.groups[d.group_id].triplets)
                        cache[key] = items
                    src = d.source if ce_enabled else Source.FB
                    self.queue[r].append((t.index * n + q, d.group_id, src, items))
        self.head = [0] * len(rows)  # next queue entry per row
        self.pos = [0] * len(rows)  # next triplet within the current group
        self.period = 0
        self.hold = [None] * len(rows)  # group id each CE currently holds
        self.next_hold = [None] * len(rows)
        referenced = set()
        for r, q in enumerate(self.queue):
            for period, gid, src, _ in q:
                if src is Source.NEIGHBOR:
                    referenced.add((r + 1, period - 1))
        self.referenced = referenced
        self.remaining = sum(len(q) for q in self.queue)

    def done(self) -> bool:
        return self.remaining == 0

    def step(self, dirty) -> bool:
        """ce_step: stream one triplet per CE; returns True on any progress."""
        if self.remaining == 0:
            return False
        ctr = self.ctr
        moved = False
        if not self.ce_enabled:
            for r, fifo in enumerate(self.rows):
                h = self.head[r]
                q = self.queue[r]
                if h >= len(q) or not fifo.can_push():
                    continue
                _, gid, _, items = q[h]
                p = self.pos[r]
                if p == 0:
                    ctr.fb_group_reads += 1
                fifo.push(items[p], dirty)
                ctr.fifo_writes += 1
                ctr.fb_reads += 1
                moved = True
                p += 1
                if p == len(items):
                    self.head[r] = h + 1
                    self.remaining -= 1
                    p = 0
                self.pos[r] = p
            return moved

        period = self.period
        busy = False
        for r, fifo in enumerate(self.rows):
            h = self.head[r]
            q = self.queue[r]
            if h >= len(q) or q[h][0] != period:
                continue
            busy = True
            if not fifo.can_push():
                continue
            _, gid, src, items = q[h]
            p = self.pos[r]
            if src is Source.NEIGHBOR:
                if self.hold[r + 1] != gid:
                    raise SimulationFault(f"CE{r} expects group {gid} held by CE{r + 1}, which holds {self.hold[r + 1]}")
                ctr.neighbor_reads += 1
                ctr.fifo_reads += 1
            else:
                if p == 0:
                    ctr.fb_group_reads += 1
                ctr.fb_reads += 1
            if (r, period) in self.referenced:
                ctr.fifo_writes += 1  # copy into this CE's hold
            fifo.push(items[p], dirty)
            ctr.fifo_writes += 1
            moved = True
            p += 1
            if p == len(items):
                self.head[r] = h + 1
                self.remaining -= 1
                self.next_hold[r] = gid
                p = 0
            self.pos[r] = p
        if not busy or self._period_finished(period):
            self._advance_period()
            moved = True
        return moved

    def _period_finished(self, period) -> bool:
        for r, q in enumerate(self.queue):
            h = self.head[r]
            if h < len(q) and q[h][0] == period:
                return False
        return True

    def _advance_period(self):
        self.hold = list(self.next_hold)
        self.next_hold = [None] * len(self.rows)
        self.period += 1


def simulate(program: DataflowProgram, config: SimConfig, trace: bool = False, max_ticks: int | None = None) -> SimReport:
    """Run the program to quiescence and return the collected results."""
    if program.N != config.N or program.M != config.M:
        raise ValueError(f"program lowered for {program.N}x{program.M}, config is {config.N}x{config.M}")
    if program.G != config.G:
        raise ValueError(f"program group length {program.G} != config G {config.G}")
    if config.ce_enabled and not program.ce_scheduled:
        program = schedule_ce(program)
    N, M, R = config.N, config.M, config.R
    ctr = Counters()
    pes = [[PEState(r, c, config.depths) for c in range(M)] for r in range(N)]
    for r in range(N):
        for c in range(M):
            pe = pes[r][c]
            if r + 1 < N:
                pe.down = pes[r + 1][c].w_fifo
            if c + 1 < M:
                pe.right = pes[r][c + 1].f_fifo
            if trace:
                pe.pairs = []
                pe.groups_done = []
    slots = {}
    for t in program.tiles:
        for r, pos in enumerate(t.row_assignments):
            for c, k in enumerate(t.col_assignments):
                pes[r][c].ds_tiles.append(t.index)
                slots[(t.index, r, c)] = (pos[0], pos[1], k)

    # Weight buffer: one triplet per tick into the top of each column.
    w_queue = [[] for _ in range(M)]
    wcache = {}
    for t in program.tiles:
        lim = len(t.row_assignments) - 1
        for c, s in enumerate(t.weight_streams):
            key = (id(s), lim)
            items = wcache.get(key)
            if items is None:
                items = [tuple(tr) + (lim,) for tr in s.triplets]
                wcache[key] = items
            w_queue[c].extend(items)
    w_pos = [0] * M
    w_left = sum(len(q) for q in w_queue)
    top = [pes[0][c].w_fifo for c in range(M)]

    ce = CEArray([pes[r][0].f_fifo for r in range(N)], program, config.ce_enabled, ctr)
    columns = [[pes[r][c] for r in range(N)] for c in range(M)]
    flat = [pe for row in pes for pe in row]
    total = len(slots)
    collector: list = []
    dirty: list = []
    tick = 0
    idle = 0
    pair_traces = {}
    while len(collector) < total:
        progress = False
        if w_left:
            for c in range(M):
                p = w_pos[c]
                q = w_queue[c]
                if p < len(q) and top[c].can_push():
                    top[c].push(q[p], dirty)
                    ctr.fifo_writes += 1
                    ctr.wb_reads += 1
                    w_pos[c] = p + 1
                    w_left -= 1
                    progress = True
        if ce.step(dirty):
            progress = True
        for pe in flat:
            if ds_step(pe, dirty, ctr, tick):
                ctr.ds_active += 1
                progress = True
        if tick % R == 0:
            for col in columns:
                if rf_step(col, collector, ctr):
                    progress = True
            for pe in flat:
                if mac_step(pe, dirty, ctr, pair_traces):
                    progress = True
        for fifo in dirty:
            fifo.commit()
        dirty.clear()
        tick += 1
        if progress:
            idle = 0
        else:
            idle += 1
            if idle > 2 * R + 2:
                raise SimulationDeadlock(_diagnose(pes, ce, tick))
        if max_ticks is not None and tick >= max_ticks:
            raise SimulationDeadlock(f"tick budget {max_ticks} exhausted with {total - len(collector)} results outstanding")
    ds_cycles = tick
    counters = ctr.as_dict()
    fp = footprint(program, config.ce_enabled)
    counters["dram_bytes"] = dram_bytes(program)
    counters["fb_bytes"] = fp["fb_bytes"]
    counters["wb_bytes"] = fp["wb_bytes"]
    report = SimReport(
        kind="s2",
        config=config,
        layer=program.layer,
        ds_cycles=ds_cycles,
        mac_cycles=math.ceil(ds_cycles / R),
        counters=counters,
        tokens=sorted(collector, key=lambda t: t.coords),
        workload_digest=program.workload_digest,
        slots=slots,
    )
    if trace:
        report.pair_log = pair_traces
        report.group_log = {(pe.r, pe.c): list(pe.groups_done) for pe in flat}
    report.energy = energy(report, config.energy)
    log.info("s2 run: %d DS ticks, %d MAC cycles, %d results", ds_cycles, report.mac_cycles, total)
    return report


def _diagnose(pes, ce, tick) -> str:
    blocked = []
    for row in pes:
        for pe in row:
            if pe.w_reg is not None or pe.f_reg is not None or len(pe.w_fifo) or len(pe.f_fifo) or len(pe.wf_fifo):
                full = [f.name for f in (pe.w_fifo, pe.f_fifo, pe.wf_fifo) if not f.can_push()]
                blocked.append(f"PE({pe.r},{pe.c}) full={full} rf_slot={'busy' if pe.rf_slot else 'free'}")
                if len(blocked) >= 8:
                    break
    return f"no progress at tick {tick}; CE period {ce.period}; " + "; ".join(blocked)


def extract_outputs(report: SimReport, relu: bool | None = None) -> Tensor3:
    """Reassemble collected tokens into the H' x L' x D' output tensor."""
    oh, ol, od = report.layer.output
    out = np.zeros((oh, ol, od), dtype=np.int64)
    seen = np.zeros((oh, ol, od), dtype=bool)
    for tok in report.tokens:
        i, j, k = report.slots[tok.coords]
        out[i, j, k] = tok.value
        seen[i, j, k] = True
    if not seen.all():
        missing = np.argwhere(~seen)[0].tolist()
        raise IncompleteSimulation(f"no result for output coordinate {tuple(missing)}")
    if relu is None:
        relu = report.layer.relu
    if relu:
        out = np.maximum(out, 0)
    return Tensor3.raw(out)
