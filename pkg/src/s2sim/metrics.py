"""Event-energy model and derived comparison figures.

The default energy table holds order-of-magnitude placeholder costs in
picojoules. They are not silicon data; only ratios between runs are
meaningful.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields


class InvalidComparison(ValueError):
    pass


@dataclass(frozen=True)
class EnergyTable:
    mac_op: float = 0.25
    ds_tick_active: float = 0.05
    fifo_read: float = 0.03
    fifo_write: float = 0.03
    fb_read_per_triplet: float = 1.5
    wb_read_per_triplet: float = 1.5
    dram_per_byte: float = 160.0
    rf_hop: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"energy cost {f.name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def zero(cls) -> "EnergyTable":
        return cls(**{f.name: 0.0 for f in fields(cls)})


def energy(report, table: EnergyTable) -> dict:
    """Linear energy breakdown (pJ) of a report's event counters."""
    c = report.counters
    out = {
        "mac": c.get("mac_ops", 0) * table.mac_op,
        "ds": c.get("ds_active", 0) * table.ds_tick_active,
        "fifo": c.get("fifo_reads", 0) * table.fifo_read + c.get("fifo_writes", 0) * table.fifo_write,
        "sram": c.get("fb_reads", 0) * table.fb_read_per_triplet + c.get("wb_reads", 0) * table.wb_read_per_triplet,
        "dram": c.get("dram_bytes", 0) * table.dram_per_byte,
        "rf": c.get("rf_hops", 0) * table.rf_hop,
    }
    out["onchip"] = out["mac"] + out["ds"] + out["fifo"] + out["sram"] + out["rf"]
    out["total"] = out["onchip"] + out["dram"]
    return out


# Relative area units for the efficiency proxy: one MAC datapath is 1.0.
FIFO_SLOT_AREA = 0.02
DS_LOGIC_AREA = 0.15
SRAM_KB_AREA = 0.5


def area_units(report) -> float:
    cfg = report.config
    pes = cfg.N * cfg.M
    cap_kb = (report.counters.get("fb_bytes", 0) + report.counters.get("wb_bytes", 0)) / 1024
    if report.kind == "naive":
        return pes * 1.0 + cap_kb * SRAM_KB_AREA
    slots = sum(16 if d is None else d for d in cfg.depths)
    return pes * (1.0 + DS_LOGIC_AREA + slots * FIFO_SLOT_AREA) + cap_kb * SRAM_KB_AREA


def _ratio(num, den) -> float:
    if num == den:
        return 1.0
    if den == 0:
        return float("inf")
    return num / den


def compare(s2, naive) -> dict:
    """Ratios of ``naive`` over ``s2`` for cycles, energy, FB traffic and capacity."""
    if s2.workload_digest != naive.workload_digest:
        raise InvalidComparison(f"reports describe different workloads ({s2.workload_digest} vs {naive.workload_digest})")
    es = s2.energy or energy(s2, s2.config.energy)
    en = naive.energy or energy(naive, naive.config.energy)
    cap_s2 = s2.counters.get("fb_bytes", 0) + s2.counters.get("wb_bytes", 0)
    cap_nv = naive.counters.get("fb_bytes", 0) + naive.counters.get("wb_bytes", 0)
    return {
        "speedup": _ratio(naive.mac_cycles, s2.mac_cycles),
        "onchip_ee_imp": _ratio(en["onchip"], es["onchip"]),
        "ee_imp_with_dram": _ratio(en["total"], es["total"]),
        "fb_access_reduction": _ratio(naive.counters.get("fb_reads", 0), s2.counters.get("fb_reads", 0)),
        "capacity_reduction": _ratio(cap_nv, cap_s2),
        "ae_imp": _ratio(naive.mac_cycles * area_units(naive), s2.mac_cycles * area_units(s2)),
    }


CSV_COLUMNS = [
    "workload", "N", "M", "Wdep", "Fdep", "WFdep", "R", "ce", "wd", "fd", "ratio16",
    "ds_cycles", "mac_cycles", "mac_ops", "fb_reads", "wb_reads", "fifo_rw", "dram_bytes",
    "energy_onchip_pj", "energy_total_pj", "speedup", "ee_imp", "fb_reduction", "cap_reduction",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def sweep_row(workload: str, point: dict, s2, naive=None) -> dict:
    cfg = s2.config
    e = s2.energy or energy(s2, cfg.energy)
    depth = lambda d: "inf" if d is None else d
    row = {
        "workload": workload,
        "N": cfg.N,
        "M": cfg.M,
        "Wdep": depth(cfg.W_dep),
        "Fdep": depth(cfg.F_dep),
        "WFdep": depth(cfg.WF_dep),
        "R": cfg.R,
        "ce": cfg.ce_enabled,
        "wd": point.get("weight_density"),
        "fd": point.get("feature_density"),
        "ratio16": point.get("ratio16"),
        "ds_cycles": s2.ds_cycles,
        "mac_cycles": s2.mac_cycles,
        "mac_ops": s2.counters["mac_ops"],
        "fb_reads": s2.counters["fb_reads"],
        "wb_reads": s2.counters["wb_reads"],
        "fifo_rw": s2.counters["fifo_reads"] + s2.counters["fifo_writes"],
        "dram_bytes": s2.counters["dram_bytes"],
        "energy_onchip_pj": e["onchip"],
        "energy_total_pj": e["total"],
        "speedup": None,
        "ee_imp": None,
        "fb_reduction": None,
        "cap_reduction": None,
    }
    if naive is not None:
        cmp = compare(s2, naive)
        row.update(
            speedup=cmp["speedup"],
            ee_imp=cmp["onchip_ee_imp"],
            fb_reduction=cmp["fb_access_reduction"],
            cap_reduction=cmp["capacity_reduction"],
        )
    return row


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()
