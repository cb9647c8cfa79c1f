"""The `.ncgs` container: quantized features and decoder parameters,
each section Huffman-coded with its own canonical table.

Layout (little-endian)::

    "NCGS" | version u8
    feature quant (a f32, b f32, bits u8) | parameter quant (same)
    arch: K' u16, C u16, head width u16, head kernel u8, L u8,
          L x (kernel u8, scale u8, out channels u16), final kernel u8, K u16
    shape count u32
    feature code lengths (u8 per symbol) | parameter code lengths
    offsets u64 x 4: feature payload, parameter payload, names, end
    feature payload | parameter payload
    names: count u32, then (length u16, utf-8 bytes) per shape
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..cnr.decoder import DecoderArch, DecoderParams, UpModule, decoder_forward
from ..mesh import TriangleMesh
from ..quant import QuantSpec, level_indices, quantize
from ..rgr.dmc import dmc_extract
from ..rgr.grid import GridSpec, TsdfDefTensor
from . import huffman as hf

MAGIC = b"NCGS"
VERSION = 1
MAX_BITS = 16
LEVEL_TOLERANCE = 1e-9


class BitstreamError(ValueError):
    """Base class for malformed or inconsistent containers."""


class IntegrityError(BitstreamError):
    """A value that should lie on the quantization lattice does not."""


class HeaderError(BitstreamError):
    """Bad magic, unsupported version or an inconsistent header field."""


class OffsetError(BitstreamError):
    """Section offsets that disagree with each other or with the file size."""


class TruncatedBitstreamError(BitstreamError):
    """The container ends before a section is complete."""


# ---------------------------------------------------------------------------
# lattice <-> integer levels
# ---------------------------------------------------------------------------

def to_levels(x, spec: QuantSpec) -> np.ndarray:
    """Integer level indices of lattice values; off-lattice input is an error."""
    x = np.asarray(x, dtype=np.float64)
    idx = level_indices(x, spec)
    back = idx * spec.step + spec.a
    if np.any(np.abs(back - x) > LEVEL_TOLERANCE):
        raise IntegrityError("value is not on the quantization lattice")
    return idx


def from_levels(idx, spec: QuantSpec, dtype=np.float32) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() > 2**spec.bits):
        raise IntegrityError("level index outside the quantizer range")
    # same float64 expression as quantize(), so the round trip is bit-exact
    return (idx.astype(np.float64) * spec.step + spec.a).astype(dtype)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass
class Bitstream:
    """Decoded (or to-be-encoded) container contents; values are lattice points."""

    arch: DecoderArch
    feature_quant: QuantSpec
    param_quant: QuantSpec
    features: np.ndarray  # (n, K', K', K', C) float32
    theta: np.ndarray  # float32
    names: List[str] = field(default_factory=list)

    @property
    def n_shapes(self) -> int:
        return len(self.features)

    def params(self) -> DecoderParams:
        p = DecoderParams.zeros(self.arch, np.float32)
        if p.theta.shape != self.theta.shape:
            raise HeaderError("parameter count does not match the architecture")
        return p.with_theta(self.theta)


@dataclass(frozen=True)
class CompressionReport:
    original_bytes: int
    compressed_bytes: int

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.compressed_bytes

    def summary(self) -> str:
        return (
            f"original {self.original_bytes / 1e6:.4f} MB, "
            f"compressed {self.compressed_bytes / 1e6:.4f} MB, ratio {self.ratio:.2f}"
        )


def _pack_quant(q: QuantSpec) -> bytes:
    return struct.pack("<ffB", q.a, q.b, q.bits)


def _pack_arch(arch: DecoderArch) -> bytes:
    out = struct.pack(
        "<HHHBB", arch.feature_res, arch.feature_channels, arch.head_width,
        arch.head_kernel, len(arch.modules),
    )
    for m in arch.modules:
        out += struct.pack("<BBH", m.kernel, m.scale, m.out_channels)
    return out + struct.pack("<BH", arch.final_kernel, arch.output_res)


def _section(levels: np.ndarray, n_symbols: int) -> Tuple[hf.HuffmanTable, bytes]:
    if levels.size == 0:
        return hf.HuffmanTable((0,) * n_symbols), b""
    table = hf.huffman_build(hf.histogram(levels, n_symbols))
    if table.max_length > 255:
        raise BitstreamError("code length does not fit in one byte")
    return table, hf.huffman_encode(levels, table)


def _check_quant(q: QuantSpec) -> None:
    if not 1 <= q.bits <= MAX_BITS:
        raise HeaderError(f"quantizer bit depth must lie in [1, {MAX_BITS}]")
    if np.float32(q.a) != q.a or np.float32(q.b) != q.b:
        raise HeaderError("quantizer bounds must be representable as float32")


def encode_bitstream(bs: Bitstream) -> bytes:
    """Serialize lattice-valued features and parameters; deterministic."""
    arch = bs.arch
    for q in (bs.feature_quant, bs.param_quant):
        _check_quant(q)
    feats = np.asarray(bs.features)
    if feats.shape[1:] != arch.feature_shape:
        raise HeaderError(f"features have shape {feats.shape[1:]}, expected {arch.feature_shape}")
    if bs.theta.shape != (arch.n_params,):
        raise HeaderError("parameter count does not match the architecture")
    if len(bs.names) != len(feats):
        raise HeaderError("one name per shape is required")

    f_table, f_payload = _section(to_levels(feats, bs.feature_quant).ravel(), bs.feature_quant.n_levels)
    p_table, p_payload = _section(to_levels(bs.theta, bs.param_quant), bs.param_quant.n_levels)

    head = (
        MAGIC + struct.pack("<B", VERSION)
        + _pack_quant(bs.feature_quant) + _pack_quant(bs.param_quant)
        + _pack_arch(arch) + struct.pack("<I", len(feats))
        + bytes(f_table.lengths) + bytes(p_table.lengths)
    )
    names = struct.pack("<I", len(bs.names))
    for name in bs.names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise HeaderError("shape name too long")
        names += struct.pack("<H", len(raw)) + raw
    start = len(head) + 4 * 8
    offsets = [start, start + len(f_payload), start + len(f_payload) + len(p_payload)]
    offsets.append(offsets[-1] + len(names))
    return head + struct.pack("<4Q", *offsets) + f_payload + p_payload + names


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise TruncatedBitstreamError("container ends inside the header")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedBitstreamError("container ends inside the header")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def _read_quant(r: _Reader) -> QuantSpec:
    a, b, bits = r.take("<ffB")
    if not 1 <= bits <= MAX_BITS or not a < b:
        raise HeaderError("invalid quantizer in header")
    return QuantSpec(float(a), float(b), int(bits))


def _read_arch(r: _Reader) -> DecoderArch:
    kf, c, width, head_k, n_mod = r.take("<HHHBB")
    modules = tuple(UpModule(*r.take("<BBH")) for _ in range(n_mod))
    final_k, k = r.take("<BH")
    try:
        arch = DecoderArch(kf, c, width, modules, head_k, final_k)
        arch.conv_specs()
    except ValueError as exc:
        raise HeaderError(f"invalid architecture descriptor: {exc}") from exc
    if arch.output_res != k:
        raise HeaderError(f"architecture upsamples to K={arch.output_res}, header says K={k}")
    return arch


def decode_bitstream(data: bytes) -> Bitstream:
    r = _Reader(bytes(data))
    if r.raw(4) != MAGIC:
        raise HeaderError("not an NCGS container (bad magic)")
    (version,) = r.take("<B")
    if version != VERSION:
        raise HeaderError(f"unsupported container version {version}")
    fq = _read_quant(r)
    pq = _read_quant(r)
    arch = _read_arch(r)
    (n_shapes,) = r.take("<I")
    f_table = hf.HuffmanTable(tuple(r.raw(fq.n_levels)))
    p_table = hf.HuffmanTable(tuple(r.raw(pq.n_levels)))
    for t in (f_table, p_table):
        if t.kraft_sum() > 1.0:
            raise HeaderError("code lengths violate the Kraft inequality")
    offsets = r.take("<4Q")
    if offsets[0] != r.pos or any(b < a for a, b in zip(offsets, offsets[1:])):
        raise OffsetError(f"inconsistent section offsets {offsets}")
    if offsets[3] != len(r.data):
        if offsets[3] > len(r.data):
            raise TruncatedBitstreamError(
                f"container holds {len(r.data)} bytes but sections end at {offsets[3]}"
            )
        raise OffsetError(f"sections end at {offsets[3]} but the container holds {len(r.data)} bytes")

    n_feat = n_shapes * int(np.prod(arch.feature_shape))
    sections = []
    for (lo, hi), table, count in (
        ((offsets[0], offsets[1]), f_table, n_feat),
        ((offsets[1], offsets[2]), p_table, arch.n_params),
    ):
        try:
            sections.append(hf.huffman_decode(r.data[lo:hi], table, count))
        except hf.TruncatedPayloadError as exc:
            raise TruncatedBitstreamError(str(exc)) from exc
        except hf.HuffmanError as exc:
            raise BitstreamError(str(exc)) from exc

    names_r = _Reader(r.data[offsets[2] : offsets[3]])
    (n_names,) = names_r.take("<I")
    if n_names != n_shapes:
        raise HeaderError("name count does not match shape count")
    names = []
    for _ in range(n_names):
        (n,) = names_r.take("<H")
        names.append(names_r.raw(n).decode("utf-8"))

    features = from_levels(sections[0], fq).reshape((n_shapes,) + arch.feature_shape)
    theta = from_levels(sections[1], pq)
    return Bitstream(arch, fq, pq, features, theta, names)


# ---------------------------------------------------------------------------
# set-level entry points
# ---------------------------------------------------------------------------

def compress_set(
    features: np.ndarray,
    params: DecoderParams,
    arch: DecoderArch,
    feature_quant: QuantSpec = QuantSpec(),
    param_quant: QuantSpec = QuantSpec(),
    names: Optional[Sequence[str]] = None,
    original_bytes: Optional[int] = None,
) -> Tuple[bytes, Optional[CompressionReport]]:
    """Quantize raw features and parameters and build the container.

    Returns the container bytes and, when ``original_bytes`` is given, the
    compression report against it.
    """
    features = np.asarray(features, dtype=np.float32)
    if names is None:
        names = [f"shape{i:03d}" for i in range(len(features))]
    bs = Bitstream(
        arch, feature_quant, param_quant,
        quantize(features, feature_quant), quantize(params.theta.astype(np.float32), param_quant),
        list(names),
    )
    data = encode_bitstream(bs)
    report = CompressionReport(int(original_bytes), len(data)) if original_bytes is not None else None
    return data, report


@dataclass
class DecodedShape:
    name: str
    tensor: TsdfDefTensor
    mesh: TriangleMesh
    seconds: float


def decode_shapes(bs: Bitstream) -> List[DecodedShape]:
    """Run the decoder and DMC for every shape, timing each one."""
    params = bs.params()
    out = []
    for name, feat in zip(bs.names, bs.features):
        t0 = time.perf_counter()
        vol, _ = decoder_forward(feat, params, bs.arch, bs.feature_quant, bs.param_quant)
        tensor = TsdfDefTensor(GridSpec(bs.arch.output_res), vol.astype(np.float64))
        mesh = dmc_extract(tensor)
        out.append(DecodedShape(name, tensor, mesh, time.perf_counter() - t0))
    return out


def decompress_set(data: bytes) -> Tuple[Bitstream, List[DecodedShape]]:
    bs = decode_bitstream(data)
    return bs, decode_shapes(bs)
