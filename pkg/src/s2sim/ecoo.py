"""Enhanced-COO group codec.

A vector is cut into groups of ``G`` elements. Each group is stored as
triplets ``(value, offset, eog)`` holding the non-zeros and their absolute
position inside the group; the last triplet of every group carries the
end-of-group flag and the last triplet of a kernel carries end-of-kernel.
An all-zero group keeps a single zero placeholder at offset ``G - 1``.

16-bit elements are split into a signed high byte followed by an unsigned
low byte, both tagged and sharing the element's offset. In memory the low
byte payload is stored as 0..255 so that ``hi * 256 + lo`` reassembles the
value and a product of payloads needs no further extension.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .model import Precision, Scalar

DEFAULT_GROUP_LEN = 16


class StreamKind(enum.Enum):
    FEATURE = "feature"
    WEIGHT = "weight"


class StreamFormatError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"triplet {index}: {message}")
        self.index = index


class EcooTriplet(NamedTuple):
    value: int
    offset: int
    eog: bool = False
    eok: bool = False
    tag16: bool = False
    hi: bool = False

    @property
    def placeholder(self) -> bool:
        return self.value == 0 and not self.tag16


@dataclass(frozen=True)
class CompressedStream:
    triplets: tuple
    group_len: int = DEFAULT_GROUP_LEN
    kind: StreamKind = StreamKind.FEATURE
    length: int | None = None  # source element count, for exact decode
    sizes: tuple | None = None  # element count of each group when some are short

    def __len__(self):
        return len(self.triplets)

    def groups(self) -> list[tuple]:
        out, cur = [], []
        for t in self.triplets:
            cur.append(t)
            if t.eog:
                out.append(tuple(cur))
                cur = []
        if cur:
            out.append(tuple(cur))
        return out

    @property
    def mixed(self) -> bool:
        return any(t.tag16 for t in self.triplets)


def _as_scalar(x) -> Scalar:
    if isinstance(x, Scalar):
        return x
    return Scalar(int(x), Precision.BITS8)


def partition_groups(vector: Sequence, G: int = DEFAULT_GROUP_LEN) -> list[list]:
    if G < 1:
        raise ValueError(f"group length must be >= 1, got {G}")
    return [list(vector[i : i + G]) for i in range(0, len(vector), G)]


def split16(value: int) -> tuple[int, int]:
    """Signed high byte and unsigned low byte of a 16-bit value."""
    return value >> 8, value & 0xFF


def encode_group(group: Sequence, G: int = DEFAULT_GROUP_LEN, is_last_of_kernel: bool = False) -> list[EcooTriplet]:
    if len(group) > G:
        raise ValueError(f"group of {len(group)} elements exceeds group length {G}")
    out: list[EcooTriplet] = []
    for off, x in enumerate(group):
        s = _as_scalar(x)
        if s.value == 0:
            continue
        if s.wide:
            hi, lo = split16(s.value)
            out.append(EcooTriplet(hi, off, tag16=True, hi=True))
            out.append(EcooTriplet(lo, off, tag16=True, hi=False))
        else:
            out.append(EcooTriplet(s.value, off))
    if not out:
        out.append(EcooTriplet(0, G - 1))
    out[-1] = out[-1]._replace(eog=True, eok=is_last_of_kernel)
    return out


def encode_vector(vector: Sequence, G: int = DEFAULT_GROUP_LEN, kind: StreamKind = StreamKind.FEATURE) -> CompressedStream:
    """Encode a whole vector; weight streams get ``eok`` on their final triplet."""
    groups = partition_groups(vector, G)
    triplets: list[EcooTriplet] = []
    for n, g in enumerate(groups):
        last = kind is StreamKind.WEIGHT and n == len(groups) - 1
        triplets.extend(encode_group(g, G, is_last_of_kernel=last))
    return CompressedStream(tuple(triplets), G, kind, len(vector))


def decode_stream(stream: CompressedStream) -> list[Scalar]:
    G = stream.group_len
    out: list[Scalar] = []
    group = [Scalar(0)] * G
    prev = -1
    pending_hi = None  # (index, hi payload, offset)
    ts = stream.triplets
    sizes = stream.sizes
    gi = 0
    for i, t in enumerate(ts):
        if not 0 <= t.offset < G:
            raise StreamFormatError(i, f"offset {t.offset} outside [0, {G - 1}]")
        if pending_hi is not None:
            if not (t.tag16 and not t.hi and t.offset == pending_hi[2]):
                raise StreamFormatError(i, "16-bit high byte not followed by its low byte")
            if not 0 <= t.value <= 0xFF:
                raise StreamFormatError(i, f"low byte payload {t.value} outside [0, 255]")
            group[t.offset] = Scalar(pending_hi[1] * 256 + t.value, Precision.BITS16)
            pending_hi = None
        elif t.tag16:
            if not t.hi:
                raise StreamFormatError(i, "16-bit low byte without a high byte")
            if t.eog:
                raise StreamFormatError(i, "end-of-group on a 16-bit high byte")
            if t.offset <= prev:
                raise StreamFormatError(i, f"offset regression {prev} -> {t.offset}")
            pending_hi = (i, t.value, t.offset)
            prev = t.offset
        else:
            if t.offset <= prev:
                raise StreamFormatError(i, f"offset regression {prev} -> {t.offset}")
            if t.value == 0 and not t.eog:
                raise StreamFormatError(i, "zero payload outside an all-zero placeholder")
            group[t.offset] = Scalar(t.value)
            prev = t.offset
        if stream.kind is StreamKind.FEATURE and t.eok:
            raise StreamFormatError(i, "end-of-kernel flag in a feature stream")
        if t.eog:
            n = G
            if sizes is not None:
                if gi >= len(sizes):
                    raise StreamFormatError(i, f"more than the declared {len(sizes)} groups")
                n = sizes[gi]
                if any(x.value for x in group[n:]):
                    raise StreamFormatError(i, f"non-zero element past group size {n}")
            out.extend(group[:n])
            gi += 1
            group = [Scalar(0)] * G
            prev = -1
    if ts and not ts[-1].eog:
        raise StreamFormatError(len(ts) - 1, "stream ends without end-of-group")
    if stream.kind is StreamKind.WEIGHT and ts and not ts[-1].eok:
        raise StreamFormatError(len(ts) - 1, "weight stream ends without end-of-kernel")
    if stream.length is not None:
        if any(s.value for s in out[stream.length :]):
            raise StreamFormatError(len(ts) - 1, "non-zero element past the declared length")
        out = out[: stream.length]
    return out


def offset_bits(G: int) -> int:
    return max(4, (G - 1).bit_length())


def triplet_bits(kind: StreamKind, G: int = DEFAULT_GROUP_LEN, mixed: bool = False) -> int:
    bits = 8 + offset_bits(G) + 1
    if kind is StreamKind.WEIGHT:
        bits += 1
    if mixed:
        bits += 1
    return bits


def stream_footprint_bits(stream: CompressedStream, mixed: bool | None = None) -> int:
    """13 bits per feature triplet, 14 per weight triplet, +1 with mixed precision."""
    if mixed is None:
        mixed = stream.mixed
    return len(stream.triplets) * triplet_bits(stream.kind, stream.group_len, mixed)


def pack_stream(stream: CompressedStream, mixed: bool | None = None) -> bytes:
    """LSB-first bit packing of value[8] | offset | eog | eok (weights) | tag16 (mixed)."""
    if mixed is None:
        mixed = stream.mixed
    obits = offset_bits(stream.group_len)
    weight = stream.kind is StreamKind.WEIGHT
    acc = 0
    pos = 0
    for t in stream.triplets:
        word = t.value & 0xFF
        word |= t.offset << 8
        nb = 8 + obits
        word |= int(t.eog) << nb
        nb += 1
        if weight:
            word |= int(t.eok) << nb
            nb += 1
        if mixed:
            word |= int(t.tag16) << nb
            nb += 1
        acc |= word << pos
        pos += nb
    return acc.to_bytes((pos + 7) // 8, "little")


def unpack_stream(data: bytes, count: int, kind: StreamKind, G: int = DEFAULT_GROUP_LEN, mixed: bool = False, length=None) -> CompressedStream:
    obits = offset_bits(G)
    weight = kind is StreamKind.WEIGHT
    acc = int.from_bytes(data, "little")
    pos = 0
    out = []
    prev_hi = False
    for _ in range(count):
        raw = acc >> pos
        value = raw & 0xFF
        offset = (raw >> 8) & ((1 << obits) - 1)
        nb = 8 + obits
        eog = bool((raw >> nb) & 1)
        nb += 1
        eok = False
        if weight:
            eok = bool((raw >> nb) & 1)
            nb += 1
        tag16 = False
        if mixed:
            tag16 = bool((raw >> nb) & 1)
            nb += 1
        pos += nb
        # Inside a 16-bit split the first tagged triplet is the high byte.
        hi = tag16 and not prev_hi
        if not (tag16 and not hi) and value >= 0x80:
            value -= 0x100
        out.append(EcooTriplet(value, offset, eog, eok, tag16, hi))
        prev_hi = hi
    return CompressedStream(tuple(out), G, kind, length)


def aligned_pairs_oracle(wgroup: Iterable[EcooTriplet], fgroup: Iterable[EcooTriplet]) -> list[tuple[int, int, int]]:
    """Every (weight payload, feature payload, shift) product a group match needs.

    Offsets are intersected directly; a 16-bit operand contributes its high
    and low bytes, so a match expands to 1, 2 or 4 shifted pairs.
    """

    def parts(group):
        by_off: dict[int, list[tuple[int, int]]] = {}
        for t in group:
            if t.placeholder:
                continue
            by_off.setdefault(t.offset, []).append((t.value, 8 if t.tag16 and t.hi else 0))
        return by_off

    w, f = parts(wgroup), parts(fgroup)
    pairs = []
    for off in sorted(w.keys() & f.keys()):
        for wv, ws in w[off]:
            for fv, fs in f[off]:
                pairs.append((wv, fv, ws + fs))
    return pairs
