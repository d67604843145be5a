"""Cycle-level simulator of a sparse-CNN systolic engine and its dense baseline."""

from .baseline import simulate_naive
from .ecoo import CompressedStream, EcooTriplet, StreamKind, decode_stream, encode_group, encode_vector
from .engine import SimConfig, SimReport, SimulationDeadlock, extract_outputs, simulate
from .mapper import lower_layer, schedule_ce
from .metrics import EnergyTable, compare
from .model import ConvLayerSpec, Precision, Scalar, SparsityProfile, Tensor3, WorkloadProfile, conv_reference, generate_workload

__version__ = "0.1.0"
