"""Bit-exact tensor checkpoint container with FP8-E4M3FN / BF16 / FP32 numerics.

The FP8 variant is E4M3FN: 4 exponent bits (bias 7), 3 mantissa bits, no
infinities; exponent field 15 reserves only mantissa-all-ones as NaN, so the
largest finite magnitude is 448.  All rounding is round-to-nearest with ties
to even.  Encoding saturates above 448 instead of producing NaN, and encoding
a NaN is rejected so checkpoints never silently carry one.

Checkpoint files use the ADNK container: a 16-byte preamble (magic ``ADNK``,
u16 version = 1, u16 flags = 0, u64 header length), a UTF-8 JSON header, and
a payload starting at the first 64-byte boundary at or after the header end.
Tensors are stored little-endian, row-major, in lexicographic name order.
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptFile, FormatError, InvalidValue

__all__ = [
    "Dtype",
    "TensorSpec",
    "FlatCheckpoint",
    "ParamName",
    "ParamKind",
    "encode_fp8",
    "decode_fp8",
    "encode_bf16",
    "decode_bf16",
    "cast_tensor",
    "accumulate",
    "parse_param_name",
    "format_param_name",
    "write_checkpoint",
    "read_checkpoint",
]

MAGIC = b"ADNK"
VERSION = 1
_PAYLOAD_ALIGN = 64


class Dtype(Enum):
    """Element types supported by the container."""

    FP8_E4M3 = "fp8_e4m3"
    BF16 = "bf16"
    FP32 = "fp32"

    @property
    def itemsize(self) -> int:
        return {Dtype.FP8_E4M3: 1, Dtype.BF16: 2, Dtype.FP32: 4}[self]


# ── FP8 E4M3FN scalar codec ─────────────────────────────────────────────────
#
# Positive codes 0x00..0x7E decode to strictly increasing magnitudes, so
# encoding reduces to a midpoint search over the decoded value table.  The
# midpoint between two adjacent E4M3FN values carries at most 5 significant
# bits and is therefore exact in float64.

def _build_decode_table() -> np.ndarray:
    table = np.empty(256, dtype=np.float32)
    for code in range(256):
        e = (code >> 3) & 0xF
        m = code & 0x7
        if e == 0xF and m == 0x7:
            val = math.nan
        elif e == 0:
            val = m * 2.0**-9  # subnormal: mantissa ulp is 2^(1-7-3)
        else:
            val = (1.0 + m / 8.0) * 2.0 ** (e - 7)
        table[code] = -val if code & 0x80 else val
    return table


_FP8_DECODE = _build_decode_table()
_FP8_POS_VALUES = _FP8_DECODE[:0x7F].astype(np.float64)  # codes 0x00..0x7E
_FP8_MIDPOINTS = (_FP8_POS_VALUES[:-1] + _FP8_POS_VALUES[1:]) / 2.0
FP8_MAX = 448.0
_FP8_NAN = 0x7F


def _encode_fp8_array(values: np.ndarray) -> np.ndarray:
    """Vectorised E4M3FN encode with RNE, saturation, and signed zeros."""
    v = np.asarray(values, dtype=np.float32)
    if not np.isfinite(v).all():
        raise InvalidValue("cannot encode non-finite value as FP8 E4M3FN")
    mag = np.abs(v.astype(np.float64))
    codes = np.searchsorted(_FP8_MIDPOINTS, mag, side="left").astype(np.uint8)
    # a value sitting exactly on a midpoint must round to the even code
    on_mid = (codes < len(_FP8_MIDPOINTS)) & (
        mag == _FP8_MIDPOINTS[np.minimum(codes, len(_FP8_MIDPOINTS) - 1)]
    )
    codes = np.where(on_mid & (codes % 2 == 1), codes + 1, codes).astype(np.uint8)
    sign = (np.signbit(v)).astype(np.uint8) << 7
    return codes | sign


def encode_fp8(value: float) -> int:
    """Encode one finite float as the nearest E4M3FN byte (ties to even).

    Magnitudes above 448 saturate to +-448; the sign of zero is preserved.
    Raises InvalidValue for NaN or infinity.
    """
    return int(_encode_fp8_array(np.array([value], dtype=np.float32))[0])


def decode_fp8(b: int) -> float:
    """Decode an E4M3FN byte; the two NaN codes decode to a quiet NaN."""
    if not 0 <= b <= 0xFF:
        raise InvalidValue(f"FP8 code out of range: {b}")
    return float(_FP8_DECODE[b])


# ── BF16 scalar codec ───────────────────────────────────────────────────────

def _encode_bf16_array(values: np.ndarray) -> np.ndarray:
    """Vectorised float32 -> BF16 with RNE on the dropped 16 mantissa bits."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    nan = (bits & 0x7FFFFFFF) > 0x7F800000
    rounded = ((bits.astype(np.uint64) + 0x7FFF + ((bits >> 16) & 1)) >> 16).astype(
        np.uint16
    )
    # keep NaNs quiet instead of letting truncation turn them into infinities
    quiet = ((bits >> 16) & 0x8000).astype(np.uint16) | np.uint16(0x7FC0)
    return np.where(nan, quiet, rounded)


def _decode_bf16_array(halves: np.ndarray) -> np.ndarray:
    return (halves.astype(np.uint32) << 16).view(np.float32)


def encode_bf16(value: float) -> bytes:
    """Round a float to the nearest BF16 and return its 2 little-endian bytes."""
    half = _encode_bf16_array(np.array([value], dtype=np.float32))
    return half.astype("<u2").tobytes()


def decode_bf16(data: bytes) -> float:
    """Exactly decode 2 little-endian BF16 bytes (zero-extend the mantissa)."""
    if len(data) != 2:
        raise InvalidValue(f"BF16 value is 2 bytes, got {len(data)}")
    half = np.frombuffer(data, dtype="<u2")
    return float(_decode_bf16_array(half)[0])


# ── tensor container types ──────────────────────────────────────────────────

@dataclass(frozen=True)
class TensorSpec:
    """One named tensor: dtype, shape, and raw little-endian row-major bytes."""

    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidValue("tensor name must be non-empty")
        if any(d <= 0 for d in self.shape):
            raise InvalidValue(f"{self.name}: shape must be positive, got {self.shape}")
        expected = self.numel * self.dtype.itemsize
        if len(self.data) != expected:
            raise InvalidValue(
                f"{self.name}: payload is {len(self.data)} bytes, "
                f"expected {expected} for {self.dtype.value}{list(self.shape)}"
            )

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    def to_float32(self) -> np.ndarray:
        """Decode the payload into a float32 array of the tensor's shape."""
        if self.dtype is Dtype.FP8_E4M3:
            codes = np.frombuffer(self.data, dtype=np.uint8)
            arr = _FP8_DECODE[codes]
        elif self.dtype is Dtype.BF16:
            arr = _decode_bf16_array(np.frombuffer(self.data, dtype="<u2"))
        else:
            arr = np.frombuffer(self.data, dtype="<f4")
        return arr.reshape(self.shape).astype(np.float32)

    @classmethod
    def from_float32(
        cls, name: str, dtype: Dtype, values: np.ndarray
    ) -> "TensorSpec":
        """Encode a float32 array into a tensor of the given dtype."""
        arr = np.asarray(values, dtype=np.float32)
        if dtype is Dtype.FP8_E4M3:
            payload = _encode_fp8_array(arr.ravel()).tobytes()
        elif dtype is Dtype.BF16:
            payload = _encode_bf16_array(arr.ravel()).astype("<u2").tobytes()
        else:
            payload = arr.ravel().astype("<f4").tobytes()
        return cls(name=name, dtype=dtype, shape=tuple(arr.shape), data=payload)


@dataclass
class FlatCheckpoint:
    """Ordered collection of uniquely named tensors plus string metadata."""

    tensors: list[TensorSpec] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = [t.name for t in self.tensors]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise InvalidValue(f"duplicate tensor names: {dupes}")

    def sorted(self) -> "FlatCheckpoint":
        """Return a copy with tensors in canonical (lexicographic) name order."""
        return FlatCheckpoint(
            tensors=sorted(self.tensors, key=lambda t: t.name),
            metadata=dict(self.metadata),
        )

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def __getitem__(self, name: str) -> TensorSpec:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(t.name == name for t in self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FlatCheckpoint):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and sorted(self.tensors, key=lambda t: t.name)
            == sorted(other.tensors, key=lambda t: t.name)
        )


# ── casting and accumulation ────────────────────────────────────────────────

def cast_tensor(t: TensorSpec, target: Dtype) -> TensorSpec:
    """Element-wise cast via the scalar codecs; same-dtype casts are copies.

    FP8 -> BF16 is exact (every finite E4M3FN value is representable in BF16),
    so FP8 -> BF16 -> FP8 is byte-identical for non-NaN inputs.
    """
    if target is t.dtype:
        return TensorSpec(name=t.name, dtype=t.dtype, shape=t.shape, data=t.data)
    return TensorSpec.from_float32(t.name, target, t.to_float32())


def accumulate(values: Sequence[float], mode: str = "fp32_accumulate") -> float:
    """Sum BF16 inputs, re-rounding partials to BF16 or keeping them in FP32.

    ``bf16_accumulate`` re-rounds the running sum to BF16 after every
    addition, which stalls once increments fall below half an ulp of the
    partial sum (2048 ones sum to 256).  ``fp32_accumulate`` keeps partials
    in 32-bit, the mixed-precision convention this module demonstrates.
    """
    if mode not in ("bf16_accumulate", "fp32_accumulate"):
        raise InvalidValue(f"unknown accumulation mode: {mode!r}")
    vals = np.asarray(list(values), dtype=np.float32)
    if vals.size and not np.isfinite(vals).all():
        raise InvalidValue("accumulate requires finite inputs")
    total = np.float32(0.0)
    if mode == "fp32_accumulate":
        for x in vals:
            total = np.float32(total + x)
    else:
        for x in vals:
            x_bf = _decode_bf16_array(_encode_bf16_array(np.array([x])))[0]
            total = _decode_bf16_array(
                _encode_bf16_array(np.array([np.float32(total + x_bf)]))
            )[0]
    return float(total)


# ── parameter names ─────────────────────────────────────────────────────────

class ParamKind(Enum):
    EMBEDDING = "embedding"
    ATTENTION = "attention"
    DENSE_MLP = "dense_mlp"
    ROUTED_EXPERT = "routed_expert"
    SHARED_EXPERT = "shared_expert"
    NORM = "norm"
    OUTPUT_HEAD = "output_head"
    OTHER = "other"


@dataclass(frozen=True)
class ParamName:
    """Parsed release-format parameter path.

    ``layer`` is the global layer index when the name carries one, ``expert``
    the routed-expert index for ROUTED_EXPERT params, and ``leaf`` the
    trailing path after the kind-defining prefix.
    """

    raw: str
    layer: int | None
    kind: ParamKind
    leaf: str
    expert: int | None = None

    def __post_init__(self) -> None:
        if self.kind is ParamKind.ROUTED_EXPERT:
            if self.layer is None or self.expert is None or self.expert < 0:
                raise InvalidValue(f"malformed routed expert param: {self.raw}")
        if self.kind in (ParamKind.EMBEDDING, ParamKind.OUTPUT_HEAD):
            if self.layer is not None:
                raise InvalidValue(f"{self.kind.value} param cannot carry a layer")


_LAYER_RE = re.compile(r"^model\.layers\.(\d+)\.(.+)$")
_EXPERT_RE = re.compile(r"^mlp\.experts\.(\d+)\.(.+)$")


def parse_param_name(s: str) -> ParamName:
    """Classify a release parameter path; unknown patterns become OTHER.

    Total over non-empty strings: never raises on unrecognised names.
    """
    if not s:
        raise InvalidValue("parameter name must be non-empty")
    if s.startswith("model.embed_tokens."):
        return ParamName(s, None, ParamKind.EMBEDDING, s[len("model.embed_tokens."):])
    if s.startswith("lm_head."):
        return ParamName(s, None, ParamKind.OUTPUT_HEAD, s[len("lm_head."):])
    if s.startswith("model.norm."):
        return ParamName(s, None, ParamKind.NORM, s[len("model.norm."):])
    m = _LAYER_RE.match(s)
    if m is None:
        return ParamName(s, None, ParamKind.OTHER, s)
    layer = int(m.group(1))
    rest = m.group(2)
    if rest.startswith("self_attn."):
        return ParamName(s, layer, ParamKind.ATTENTION, rest[len("self_attn."):])
    em = _EXPERT_RE.match(rest)
    if em is not None:
        return ParamName(
            s, layer, ParamKind.ROUTED_EXPERT, em.group(2), expert=int(em.group(1))
        )
    if rest.startswith("mlp.shared_experts."):
        return ParamName(
            s, layer, ParamKind.SHARED_EXPERT, rest[len("mlp.shared_experts."):]
        )
    if rest.startswith("mlp."):
        return ParamName(s, layer, ParamKind.DENSE_MLP, rest[len("mlp."):])
    if "norm" in rest.split(".")[0]:
        return ParamName(s, layer, ParamKind.NORM, rest)
    return ParamName(s, layer, ParamKind.OTHER, rest)


def format_param_name(
    kind: ParamKind,
    leaf: str,
    layer: int | None = None,
    expert: int | None = None,
) -> str:
    """Build the release parameter path for the given components."""
    if kind is ParamKind.EMBEDDING:
        return f"model.embed_tokens.{leaf}"
    if kind is ParamKind.OUTPUT_HEAD:
        return f"lm_head.{leaf}"
    if kind is ParamKind.NORM and layer is None:
        return f"model.norm.{leaf}"
    if layer is None:
        raise InvalidValue(f"{kind.value} param requires a layer index")
    if kind is ParamKind.ATTENTION:
        return f"model.layers.{layer}.self_attn.{leaf}"
    if kind is ParamKind.ROUTED_EXPERT:
        if expert is None:
            raise InvalidValue("routed expert param requires an expert index")
        return f"model.layers.{layer}.mlp.experts.{expert}.{leaf}"
    if kind is ParamKind.SHARED_EXPERT:
        return f"model.layers.{layer}.mlp.shared_experts.{leaf}"
    if kind is ParamKind.DENSE_MLP:
        return f"model.layers.{layer}.mlp.{leaf}"
    return f"model.layers.{layer}.{leaf}"


# ── container file I/O ──────────────────────────────────────────────────────

def _align_up(n: int, align: int) -> int:
    return (n + align - 1) // align * align


def write_checkpoint(c: FlatCheckpoint, path: str | os.PathLike) -> None:
    """Write an ADNK container; tensors are re-ordered canonically by name.

    The write is atomic (temp file in the target directory, then rename).
    """
    ordered = c.sorted()
    entries = []
    offset = 0
    for t in ordered.tensors:
        entries.append(
            {
                "name": t.name,
                "dtype": t.dtype.value,
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(t.data),
            }
        )
        offset += len(t.data)
    header = json.dumps(
        {"tensors": entries, "metadata": dict(ordered.metadata)},
        ensure_ascii=False,
        separators=(",", ":"),
    ).encode("utf-8")
    payload_start = _align_up(16 + len(header), _PAYLOAD_ALIGN)

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(VERSION.to_bytes(2, "little"))
            f.write((0).to_bytes(2, "little"))
            f.write(len(header).to_bytes(8, "little"))
            f.write(header)
            f.write(b"\x00" * (payload_start - 16 - len(header)))
            for t in ordered.tensors:
                f.write(t.data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str | os.PathLike) -> FlatCheckpoint:
    """Read an ADNK container back into a FlatCheckpoint.

    Raises FormatError for bad magic/version/header, CorruptFile for
    truncation or payload-size inconsistencies.
    """
    with open(path, "rb") as f:
        preamble = f.read(16)
        if len(preamble) < 16:
            raise CorruptFile(f"{path}: file shorter than the 16-byte preamble")
        if preamble[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic {preamble[:4]!r}")
        version = int.from_bytes(preamble[4:6], "little")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        header_len = int.from_bytes(preamble[8:16], "little")
        header_raw = f.read(header_len)
        if len(header_raw) < header_len:
            raise CorruptFile(f"{path}: truncated header")
        try:
            header = json.loads(header_raw.decode("utf-8"))
            entries = header["tensors"]
            metadata = header["metadata"]
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: unparsable header: {exc}") from exc
        payload_start = _align_up(16 + header_len, _PAYLOAD_ALIGN)
        f.seek(payload_start)
        payload = f.read()

    tensors = []
    for e in entries:
        try:
            dtype = Dtype(e["dtype"])
            name, shape = e["name"], tuple(e["shape"])
            offset, nbytes = int(e["offset"]), int(e["nbytes"])
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: malformed tensor entry: {exc}") from exc
        data = payload[offset : offset + nbytes]
        if len(data) != nbytes:
            raise CorruptFile(f"{path}: payload truncated for tensor {name!r}")
        try:
            tensors.append(TensorSpec(name=name, dtype=dtype, shape=shape, data=data))
        except InvalidValue as exc:
            raise CorruptFile(f"{path}: {exc}") from exc
    try:
        return FlatCheckpoint(
            tensors=tensors, metadata={str(k): str(v) for k, v in metadata.items()}
        )
    except (InvalidValue, AttributeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
