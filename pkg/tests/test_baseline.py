import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from s2sim.baseline import simulate_naive
from s2sim.engine import SimConfig, extract_outputs, simulate
from s2sim.mapper import DataflowProgram, lower_layer
from s2sim.model import ConvLayerSpec, Tensor3, WorkloadProfile, conv_reference, count_mandatory_macs, generate_workload


def test_six_ticks_per_group_on_toy():
    w = [0, 2, 0, 3, 0, 0, 0, 0, 7, 0, 0, 0]
    f = [0, 1, 4, 0, 0, 5, 9, 0, 2, 0, 0, 0]
    layer = ConvLayerSpec((1, 1, 12), 1, (1, 1, 12))
    prog = lower_layer(layer, Tensor3(np.array(f).reshape(1, 1, 12)), [Tensor3(np.array(w).reshape(1, 1, 12))], 1, 1, 6)
    rep = simulate_naive(prog, SimConfig(1, 1, G=6, ce_enabled=False), trace=True)
    a, b = rep.group_log[(0, 0)]
    assert (a + 1, b - a) == (6, 6)
    assert rep.tokens[0].value == 16


@settings(max_examples=25)
@given(
    k=st.integers(1, 3), d=st.integers(1, 10), N=st.integers(1, 5), M=st.integers(1, 4), G=st.integers(1, 8),
    ce=st.booleans(), seed=st.integers(0, 10**6),
)
def test_naive_matches_reference(k, d, N, M, G, ce, seed):
    layer = ConvLayerSpec((k, k, d), 3, (k + 2, k + 2, d), padding=1 if k == 3 else 0)
    inp, ks = generate_workload(layer, WorkloadProfile(0.5, 0.5, 0.2, seed, max16=400))
    prog = lower_layer(layer, inp, ks, N, M, G)
    rep = simulate_naive(prog, SimConfig(N, M, G=G, ce_enabled=ce))
    assert extract_outputs(rep) == conv_reference(layer, inp, ks)
    assert rep.counters["mac_ops"] == count_mandatory_macs(inp, ks, layer).total_macs


def test_dense_workload_close_to_s2():
    layer = ConvLayerSpec((3, 3, 16), 8, (6, 6, 16), padding=1)
    inp, ks = generate_workload(layer, WorkloadProfile(1.0, 1.0, 0.0, 1))
    prog = lower_layer(layer, inp, ks, 8, 8)
    cfg = SimConfig(8, 8, R=4)
    s2, nv = simulate(prog, cfg), simulate_naive(prog, cfg)
    assert abs(nv.mac_cycles - s2.mac_cycles) / s2.mac_cycles <= 0.10
    assert extract_outputs(s2) == extract_outputs(nv)


def test_empty_program():
    prog = DataflowProgram(ConvLayerSpec((1, 1, 1), 1, (1, 1, 1)), 16, 1, 1, [], {}, [])
    assert simulate_naive(prog, SimConfig(1, 1)).mac_cycles == 0


def test_array_mismatch_rejected():
    layer = ConvLayerSpec((1, 1, 2), 1, (1, 1, 2))
    t = Tensor3(np.ones((1, 1, 2)))
    with pytest.raises(ValueError):
        simulate_naive(lower_layer(layer, t, [t], 2, 2), SimConfig(1, 1))
