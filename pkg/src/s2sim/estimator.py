"""scikit-learn style facade: fit a layer's kernels, predict its outputs."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .baseline import simulate_naive
from .engine import SimConfig, extract_outputs, simulate
from .mapper import lower_layer
from .model import ConvLayerSpec, Tensor3


def as_tensor(x) -> Tensor3:
    """Wrap a plain integer array; magnitudes above 127 are taken as 16-bit."""
    if isinstance(x, Tensor3):
        return x
    v = np.asarray(x)
    if v.ndim != 3:
        raise ValueError(f"expected an H x L x D array, got shape {v.shape}")
    v = v.astype(np.int32)
    return Tensor3(v, np.abs(v) > 127)


class ConvEngineEstimator(BaseEstimator):
    """Run a convolution layer on the simulated array.

    ``fit`` takes the kernels (and layer geometry); ``predict`` lowers an
    input, simulates it and returns the H' x L' x D' output as an int64
    array. The last run's report is kept in ``report_``.
    """

    def __init__(self, N=16, M=16, W_dep=8, F_dep=8, WF_dep=8, R=4, G=16, ce_enabled=True, engine="s2"):
        self.N = N
        self.M = M
        self.W_dep = W_dep
        self.F_dep = F_dep
        self.WF_dep = WF_dep
        self.R = R
        self.G = G
        self.ce_enabled = ce_enabled
        self.engine = engine

    def _config(self) -> SimConfig:
        return SimConfig(
            N=self.N, M=self.M, W_dep=self.W_dep, F_dep=self.F_dep, WF_dep=self.WF_dep,
            R=self.R, G=self.G, ce_enabled=self.ce_enabled,
        )

    def fit(self, kernels, layer: ConvLayerSpec | dict):
        if self.engine not in ("s2", "naive"):
            raise ValueError(f"engine must be 's2' or 'naive', got {self.engine!r}")
        self.config_ = self._config()
        self.layer_ = layer if isinstance(layer, ConvLayerSpec) else ConvLayerSpec.from_dict(layer)
        self.kernels_ = [as_tensor(k) for k in kernels]
        if len(self.kernels_) != self.layer_.num_kernels:
            raise ValueError(f"{len(self.kernels_)} kernels for a layer of {self.layer_.num_kernels}")
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "kernels_"):
            raise RuntimeError("call fit() before predict()")
        inp = as_tensor(X)
        program = lower_layer(self.layer_, inp, self.kernels_, self.N, self.M, self.G)
        run = simulate if self.engine == "s2" else simulate_naive
        self.report_ = run(program, self.config_)
        return extract_outputs(self.report_).values

    @property
    def cycles_(self) -> int:
        return self.report_.mac_cycles
