"""Tensor types, synthetic sparse workloads and the golden dense convolution."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

INT8_MIN, INT8_MAX = -128, 127
INT16_MIN, INT16_MAX = -32768, 32767
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


class Precision(enum.Enum):
    BITS8 = 8
    BITS16 = 16


class Scalar(NamedTuple):
    value: int
    precision: Precision = Precision.BITS8

    @property
    def wide(self) -> bool:
        return self.precision is Precision.BITS16


class AccumulatorOverflow(ArithmeticError):
    """A convolution sum does not fit the 32-bit signed accumulator."""


@dataclass(frozen=True)
class Tensor3:
    """An H x W x D integer tensor with a per-element 16-bit precision mask.

    ``values`` holds the signed integers (int32 storage); ``wide`` marks the
    elements declared as 16-bit. Elements not marked wide must fit in int8.
    """

    values: np.ndarray
    wide: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"Tensor3 needs 3 dims, got shape {values.shape}")
        values = values.astype(np.int32, copy=False)
        wide = np.zeros(values.shape, dtype=bool) if self.wide is None else np.asarray(self.wide, dtype=bool)
        if wide.shape != values.shape:
            raise ValueError(f"precision mask shape {wide.shape} != value shape {values.shape}")
        narrow = values[~wide]
        if narrow.size and (narrow.min() < INT8_MIN or narrow.max() > INT8_MAX):
            raise ValueError("8-bit element out of [-128, 127]")
        wide_vals = values[wide]
        if wide_vals.size and (wide_vals.min() < INT16_MIN or wide_vals.max() > INT16_MAX):
            raise ValueError("16-bit element out of [-32768, 32767]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "wide", wide)

    @classmethod
    def zeros(cls, dims) -> "Tensor3":
        return cls(np.zeros(tuple(dims), dtype=np.int32))

    @classmethod
    def raw(cls, values) -> "Tensor3":
        """Wrap 32-bit convolution results, skipping the 8/16-bit range check."""
        t = object.__new__(cls)
        values = np.asarray(values).astype(np.int32)
        object.__setattr__(t, "values", values)
        object.__setattr__(t, "wide", np.zeros(values.shape, dtype=bool))
        return t

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    def scalar(self, i, j, k) -> Scalar:
        prec = Precision.BITS16 if self.wide[i, j, k] else Precision.BITS8
        return Scalar(int(self.values[i, j, k]), prec)

    def __eq__(self, other):
        if not isinstance(other, Tensor3):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.wide, other.wide)
        )

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<3i", *self.dims))
        h.update(np.ascontiguousarray(self.values, dtype="<i4").tobytes())
        h.update(np.packbits(self.wide).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ConvLayerSpec:
    """Convolution geometry: H x L x D kernels (``num_kernels`` of them)
    sliding over an H_in x L_in x D input with the given stride and zero
    padding."""

    kernel: tuple[int, int, int]
    num_kernels: int
    input: tuple[int, int, int]
    stride: int = 1
    padding: int = 0
    relu: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(x) for x in self.kernel))
        object.__setattr__(self, "input", tuple(int(x) for x in self.input))
        kh, kl, kd = self.kernel
        ih, il, idp = self.input
        if min(kh, kl, kd, ih, il, idp, self.num_kernels) < 1:
            raise ValueError(f"all layer dimensions must be positive: {self}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"stride must be >= 1 and padding >= 0: {self}")
        if kd != idp:
            raise ValueError(f"kernel depth {kd} != input depth {idp}")
        for n, k in ((ih, kh), (il, kl)):
            span = n + 2 * self.padding - k
            if span < 0 or span % self.stride:
                raise ValueError(
                    f"input extent {n} with padding {self.padding} does not tile kernel {k} at stride {self.stride}"
                )

    @property
    def output(self) -> tuple[int, int, int]:
        kh, kl, _ = self.kernel
        ih, il, _ = self.input
        oh = (ih + 2 * self.padding - kh) // self.stride + 1
        ol = (il + 2 * self.padding - kl) // self.stride + 1
        return oh, ol, self.num_kernels

    @property
    def kernel_size(self) -> int:
        kh, kl, kd = self.kernel
        return kh * kl * kd

    def to_dict(self) -> dict:
        return {
            "kernel": list(self.kernel),
            "num_kernels": self.num_kernels,
            "input": list(self.input),
            "stride": self.stride,
            "padding": self.padding,
            "relu": self.relu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvLayerSpec":
        return cls(
            kernel=tuple(d["kernel"]),
            num_kernels=int(d["num_kernels"]),
            input=tuple(d["input"]),
            stride=int(d.get("stride", 1)),
            padding=int(d.get("padding", 0)),
            relu=bool(d.get("relu", False)),
        )


@dataclass(frozen=True)
class SparsityProfile:
    """Density (1 - sparsity) of a synthetic tensor and its 16-bit share.

    ``max16`` caps the magnitude of 16-bit values; the default keeps the
    full [128, 32767] range.
    """

    density: float = 1.0
    ratio16: float = 0.0
    seed: int = 0
    max16: int = INT16_MAX

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"density must lie in (0, 1], got {self.density}")
        if not 0.0 <= self.ratio16 <= 1.0:
            raise ValueError(f"ratio16 must lie in [0, 1], got {self.ratio16}")
        if not 128 <= self.max16 <= INT16_MAX:
            raise ValueError(f"max16 must lie in [128, 32767], got {self.max16}")


@dataclass(frozen=True)
class WorkloadProfile:
    """Paired weight/feature sparsity used to synthesize a whole layer."""

    weight_density: float = 1.0
    feature_density: float = 1.0
    ratio16: float = 0.0
    seed: int = 0
    max16: int = INT16_MAX

    def weights(self, k: int) -> SparsityProfile:
        return SparsityProfile(self.weight_density, self.ratio16, _mix(self.seed, 1 + k), self.max16)

    def features(self) -> SparsityProfile:
        return SparsityProfile(self.feature_density, self.ratio16, _mix(self.seed, 0), self.max16)


def _mix(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed) & (2**63 - 1), stream]).generate_state(1)[0])


def generate_sparse_tensor(dims, profile: SparsityProfile) -> Tensor3:
    """Uniformly scatter ``round(density * count)`` non-zeros over ``dims``.

    Exactly ``round(ratio16 * nnz)`` of the non-zeros are 16-bit with
    magnitudes in [128, max16]; the rest are 8-bit with magnitudes in
    [1, 127]. Signs are uniform. Output is a pure function of the profile.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive extents, got {dims}")
    count = dims[0] * dims[1] * dims[2]
    nnz = int(round(profile.density * count))
    rng = np.random.default_rng(profile.seed)
    flat = np.zeros(count, dtype=np.int32)
    wide = np.zeros(count, dtype=bool)
    # Fixed-length draws, truncated: raising the density at a fixed seed
    # only adds non-zeros, it never moves existing ones.
    pos = rng.permutation(count)[:nnz]
    n16 = int(round(profile.ratio16 * nnz))
    mags = rng.integers(1, INT8_MAX + 1, size=count)[:nnz]
    big = rng.integers(128, profile.max16 + 1, size=count)
    mags[:n16] = big[:n16]
    wide[pos[:n16]] = True
    signs = rng.choice(np.array([-1, 1]), size=count)[:nnz]
    flat[pos] = mags * signs
    return Tensor3(flat.reshape(dims), wide.reshape(dims))


def generate_workload(layer: ConvLayerSpec, profile: WorkloadProfile):
    """Synthesize ``(input, kernels)`` for a layer."""
    inp = generate_sparse_tensor(layer.input, profile.features())
    kernels = [generate_sparse_tensor(layer.kernel, profile.weights(k)) for k in range(layer.num_kernels)]
    return inp, kernels


def _check_shapes(layer: ConvLayerSpec, input: Tensor3, kernels: Sequence[Tensor3]):
    if input.dims != layer.input:
        raise ValueError(f"input dims {input.dims} != layer input {layer.input}")
    if len(kernels) != layer.num_kernels:
        raise ValueError(f"{len(kernels)} kernels given, layer needs {layer.num_kernels}")
    for n, k in enumerate(kernels):
        if k.dims != layer.kernel:
            raise ValueError(f"kernel {n} dims {k.dims} != layer kernel {layer.kernel}")


def padded_input(layer: ConvLayerSpec, input: Tensor3) -> np.ndarray:
    p = layer.padding
    return np.pad(input.values.astype(np.int64), ((p, p), (p, p), (0, 0)))


def conv_reference(layer: ConvLayerSpec, input: Tensor3, kernels: Sequence[Tensor3], apply_relu=None) -> Tensor3:
    """Dense convolution in 64-bit arithmetic; every output must fit int32."""
    _check_shapes(layer, input, kernels)
    if apply_relu is None:
        apply_relu = layer.relu
    kh, kl, kd = layer.kernel
    oh, ol, od = layer.output
    s = layer.stride
    x = padded_input(layer, input)
    w = np.stack([k.values.astype(np.int64) for k in kernels], axis=-1)  # kh, kl, kd, od
    out = np.zeros((oh, ol, od), dtype=np.int64)
    for a in range(kh):
        for b in range(kl):
            patch = x[a : a + s * (oh - 1) + 1 : s, b : b + s * (ol - 1) + 1 : s, :]
            out += np.tensordot(patch, w[a, b], axes=([2], [0]))
    if out.size and (out.min() < INT32_MIN or out.max() > INT32_MAX):
        raise AccumulatorOverflow("convolution sum exceeds the 32-bit accumulator")
    if apply_relu:
        out = np.maximum(out, 0)
    return Tensor3.raw(out)


class MacStats(NamedTuple):
    total_macs: int
    mandatory_macs: int
    ratio: float


def count_mandatory_macs(input: Tensor3, kernels: Sequence[Tensor3], layer: ConvLayerSpec) -> MacStats:
    """Count MACs whose two operands are both non-zero."""
    _check_shapes(layer, input, kernels)
    kh, kl, _ = layer.kernel
    oh, ol, od = layer.output
    s = layer.stride
    x = (padded_input(layer, input) != 0).astype(np.int64)
    w = np.stack([(k.values != 0).astype(np.int64) for k in kernels], axis=-1)
    mandatory = 0
    for a in range(kh):
        for b in range(kl):
            patch = x[a : a + s * (oh - 1) + 1 : s, b : b + s * (ol - 1) + 1 : s, :]
            mandatory += int(np.tensordot(patch, w[a, b], axes=([2], [0])).sum())
    total = oh * ol * od * layer.kernel_size
    return MacStats(total, mandatory, mandatory / total)


def expected_mac_ops(input: Tensor3, kernels: Sequence[Tensor3], layer: ConvLayerSpec) -> int:
    """MAC-unit operations the sparse engine must issue for a layer.

    Each mandatory product costs one op, one extra when exactly one operand
    is 16-bit and three extra when both are; every output adds a flush.
    """
    _check_shapes(layer, input, kernels)
    kh, kl, _ = layer.kernel
    oh, ol, od = layer.output
    s = layer.stride
    p = layer.padding
    nz = np.pad(input.values != 0, ((p, p), (p, p), (0, 0)))
    wd = np.pad(input.wide & (input.values != 0), ((p, p), (p, p), (0, 0)))
    xs = np.stack([nz & ~wd, wd], axis=-1).astype(np.int64)  # 8-bit, 16-bit
    kw = np.stack([np.stack([(k.values != 0) & ~k.wide, (k.values != 0) & k.wide], axis=-1) for k in kernels], axis=-1).astype(np.int64)
    cost = np.array([[1, 2], [2, 4]], dtype=np.int64)
    total = 0
    for a in range(kh):
        for b in range(kl):
            patch = xs[a : a + s * (oh - 1) + 1 : s, b : b + s * (ol - 1) + 1 : s]
            # counts[u, v] = products of feature precision u with weight precision v
            counts = np.einsum("ijcu,cvk->uv", patch, kw[a, b])
            total += int((counts * cost).sum())
    return total + oh * ol * od


def reuse_factor(layer: ConvLayerSpec) -> float:
    """Average number of MACs that touch each kernel parameter."""
    oh, ol, od = layer.output
    macs = oh * ol * od * layer.kernel_size
    return macs / (layer.kernel_size * layer.num_kernels)


# Flat binary tensor files: "<3i" little-endian dims then "<i2" values.
# The precision mask lives next to it as <path>.mask: one byte per element,
# 1 for 16-bit.


def save_tensor(tensor: Tensor3, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *tensor.dims))
        fh.write(np.ascontiguousarray(tensor.values, dtype="<i2").tobytes())
    Path(str(path) + ".mask").write_bytes(tensor.wide.astype(np.uint8).tobytes())


def load_tensor(path) -> Tensor3:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack("<3i", raw[:12])
    count = dims[0] * dims[1] * dims[2]
    if min(dims) < 1 or len(raw) != 12 + 2 * count:
        raise ValueError(f"{path}: header dims {dims} do not match payload of {len(raw) - 12} bytes")
    values = np.frombuffer(raw, dtype="<i2", offset=12).astype(np.int32).reshape(dims)
    mask_path = Path(str(path) + ".mask")
    if mask_path.exists():
        wide = np.frombuffer(mask_path.read_bytes(), dtype=np.uint8).astype(bool)
        if wide.size != count:
            raise ValueError(f"{mask_path}: {wide.size} mask bytes for {count} elements")
        wide = wide.reshape(dims)
    else:
        wide = (values < INT8_MIN) | (values > INT8_MAX)
    return Tensor3(values, wide)
