"""Command-line driver: grid sweeps, oracle verification, CSV/JSON output.

    s2sim run --spec sweep.json --out results/ [--jobs 4] [--seed 7]
    s2sim verify --spec sweep.json

See SPEC_SCHEMA for the accepted experiment file.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import jsonschema
from joblib import Parallel, delayed

from .baseline import simulate_naive
from .engine import SimConfig, SimulationDeadlock, extract_outputs, simulate
from .mapper import Source, lower_layer, schedule_ce
from .metrics import format_csv, sweep_row
from .model import (
    INT16_MAX,
    AccumulatorOverflow,
    ConvLayerSpec,
    WorkloadProfile,
    conv_reference,
    expected_mac_ops,
    generate_workload,
    load_tensor,
)

log = logging.getLogger("s2sim.cli")

_pos_int = {"type": "integer", "minimum": 1}
_depth = {"oneOf": [_pos_int, {"const": "inf"}]}
_unit = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}


def _list_of(item):
    return {"type": "array", "items": item, "minItems": 1}


SPEC_SCHEMA = {
    "type": "object",
    "required": ["layer"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "naive": {"type": "boolean"},
        "max16": {"type": "integer", "minimum": 128, "maximum": INT16_MAX},
        "out": {"type": "string"},
        "layer": {
            "type": "object",
            "required": ["kernel", "num_kernels", "input"],
            "additionalProperties": False,
            "properties": {
                "kernel": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                "input": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                "num_kernels": _pos_int,
                "stride": _pos_int,
                "padding": {"type": "integer", "minimum": 0},
                "relu": {"type": "boolean"},
            },
        },
        "tensors": {
            "type": "object",
            "required": ["input", "kernels"],
            "additionalProperties": False,
            "properties": {
                "input": {"type": "string"},
                "kernels": _list_of({"type": "string"}),
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "array": _list_of({"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2}),
                "depths": _list_of(
                    {"oneOf": [{"const": "inf"}, {"type": "array", "items": _depth, "minItems": 3, "maxItems": 3}]}
                ),
                "R": _list_of(_pos_int),
                "ce": _list_of({"type": "boolean"}),
                "weight_density": _list_of(_unit),
                "feature_density": _list_of(_unit),
                "ratio16": _list_of({"type": "number", "minimum": 0, "maximum": 1}),
                "group_len": _list_of(_pos_int),
                "replicates": _pos_int,
            },
        },
    },
}

GRID_DEFAULTS = {
    "array": [[16, 16]],
    "depths": [[8, 8, 8]],
    "R": [4],
    "ce": [True],
    "weight_density": [1.0],
    "feature_density": [1.0],
    "ratio16": [0.0],
    "group_len": [16],
    "replicates": 1,
}


class SpecError(ValueError):
    pass


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path)


def load_spec(path) -> dict:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}: not valid JSON ({e})") from None
    validate_spec(spec)
    return spec


def validate_spec(spec: dict) -> None:
    err = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(SPEC_SCHEMA).iter_errors(spec))
    if err is not None:
        raise SpecError(f"spec error at {_pointer(err.absolute_path)}: {err.message}")
    try:
        ConvLayerSpec.from_dict(spec["layer"])
    except ValueError as e:
        raise SpecError(f"spec error at /layer: {e}") from None


def _depth_triple(d):
    if d == "inf":
        return (None, None, None)
    return tuple(None if x == "inf" else int(x) for x in d)


@dataclass(frozen=True)
class GridPoint:
    index: int
    N: int
    M: int
    depths: tuple
    R: int
    ce: bool
    weight_density: float
    feature_density: float
    ratio16: float
    G: int
    replicate: int

    def config(self) -> SimConfig:
        w, f, wf = self.depths
        return SimConfig(N=self.N, M=self.M, W_dep=w, F_dep=f, WF_dep=wf, R=self.R, G=self.G, ce_enabled=self.ce)

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "N": self.N,
            "M": self.M,
            "depths": ["inf" if d is None else d for d in self.depths],
            "R": self.R,
            "ce": self.ce,
            "weight_density": self.weight_density,
            "feature_density": self.feature_density,
            "ratio16": self.ratio16,
            "G": self.G,
            "replicate": self.replicate,
        }


def expand_grid(spec: dict) -> list[GridPoint]:
    g = {**GRID_DEFAULTS, **spec.get("grid", {})}
    axes = itertools.product(
        g["array"], g["depths"], g["R"], g["ce"], g["weight_density"], g["feature_density"],
        g["ratio16"], g["group_len"], range(g["replicates"]),
    )
    points = []
    for arr, dep, R, ce, wd, fd, r16, G, rep in axes:
        points.append(GridPoint(len(points), arr[0], arr[1], _depth_triple(dep), R, ce, wd, fd, r16, G, rep))
    return points


def _workload(spec: dict, point: GridPoint, seed: int):
    layer = ConvLayerSpec.from_dict(spec["layer"])
    if "tensors" in spec:
        t = spec["tensors"]
        return layer, load_tensor(t["input"]), [load_tensor(k) for k in t["kernels"]]
    profile = WorkloadProfile(
        point.weight_density, point.feature_density, point.ratio16, seed + point.replicate, spec.get("max16", INT16_MAX)
    )
    inp, kernels = generate_workload(layer, profile)
    return layer, inp, kernels


def _fb_reads_without_ce(program) -> int:
    return sum(len(program.groups[d.group_id]) for t in program.tiles for dirs in t.feature_directives for d in dirs)


def run_point(spec: dict, point: GridPoint, seed: int, with_naive: bool, metrics: bool = True) -> dict:
    """Simulate one grid point and check it against the reference convolution."""
    out = {"point": point.as_dict(), "failures": [], "row": None, "s2": None, "naive": None}
    fail = out["failures"].append
    try:
        layer, inp, kernels = _workload(spec, point, seed)
        cfg = point.config()
        program = lower_layer(layer, inp, kernels, cfg.N, cfg.M, cfg.G)
        if cfg.ce_enabled:
            program = schedule_ce(program)
        ref = conv_reference(layer, inp, kernels)
        s2 = simulate(program, cfg)
    except (SimulationDeadlock, AccumulatorOverflow, ValueError, OSError) as e:
        fail(f"{type(e).__name__}: {e}")
        return out
    if extract_outputs(s2) != ref:
        fail("s2 outputs differ from the reference convolution")
    want = expected_mac_ops(inp, kernels, layer)
    if s2.counters["mac_ops"] != want:
        fail(f"mac_ops {s2.counters['mac_ops']} != expected {want}")
    if cfg.ce_enabled:
        c = s2.counters
        base = _fb_reads_without_ce(program)
        if c["fb_reads"] + c["neighbor_reads"] != base:
            fail(f"CE conservation: {c['fb_reads']} + {c['neighbor_reads']} != {base}")
        if any(d.source is Source.NEIGHBOR for d in program.tiles[0].feature_directives[-1]):
            fail("bottom row cannot read from a neighbour")
    naive = None
    if with_naive:
        naive = simulate_naive(program, cfg)
        if extract_outputs(naive) != ref:
            fail("naive outputs differ from the reference convolution")
    if metrics:
        pt = {"weight_density": point.weight_density, "feature_density": point.feature_density, "ratio16": point.ratio16}
        if "tensors" in spec:
            pt = {"weight_density": _density(kernels), "feature_density": _density([inp]), "ratio16": None}
        out["row"] = sweep_row(spec.get("name", "layer"), pt, s2, naive)
        out["s2"] = s2.to_json()
        out["naive"] = naive.to_json() if naive else None
    return out


def _density(tensors) -> float:
    nnz = sum(t.nnz for t in tensors)
    size = sum(t.values.size for t in tensors)
    return round(nnz / size, 6)


def execute(spec: dict, seed: int, jobs: int = 1, verify_only: bool = False) -> list[dict]:
    points = expand_grid(spec)
    with_naive = spec.get("naive", True) and not verify_only
    work = (delayed(run_point)(spec, p, seed, with_naive, not verify_only) for p in points)
    results = Parallel(n_jobs=jobs)(work) if jobs != 1 else [f(*a, **k) for f, a, k in work]
    return sorted(results, key=lambda r: r["point"]["index"])


def write_outputs(results: list[dict], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = out_dir / "runs"
    runs.mkdir(exist_ok=True)
    rows = [r["row"] for r in results if r["row"] is not None]
    csv_path = out_dir / "results.csv"
    csv_path.write_text(format_csv(rows))
    for r in results:
        name = runs / f"run_{r['point']['index']:04d}.json"
        name.write_text(json.dumps(r, indent=1, sort_keys=True, default=str) + "\n")
    return csv_path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", required=True, help="experiment JSON file")
    common.add_argument("--out", default=None, help="output directory (default: spec 'out' or ./results)")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    common.add_argument("--seed", type=int, default=None, help="override the spec seed")
    common.add_argument("--verify-only", action="store_true", help="only check outputs and invariants")
    p = argparse.ArgumentParser(prog="s2sim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run a sweep and emit CSV/JSON")
    sub.add_parser("verify", parents=[common], help="oracle and invariant checks only")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.spec)
    except (SpecError, OSError) as e:
        print(f"s2sim: {e}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    if seed < 0 or seed >= 2**64:
        print("s2sim: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    verify_only = args.verify_only or args.command == "verify"
    results = execute(spec, seed, max(1, args.jobs), verify_only)
    bad = [r for r in results if r["failures"]]
    for r in bad:
        for msg in r["failures"]:
            print(f"s2sim: point {r['point']['index']} {json.dumps(r['point'])}: {msg}", file=sys.stderr)
    if not verify_only:
        out_dir = Path(args.out or spec.get("out", "results"))
        path = write_outputs(results, out_dir)
        print(f"wrote {len(results)} runs to {path}")
    else:
        print(f"verified {len(results) - len(bad)}/{len(results)} points")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
