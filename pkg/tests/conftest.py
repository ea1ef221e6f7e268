"""Shared fixtures and independent oracles for the test suite.

The floating-point oracles here are deliberately built on exact rational
arithmetic (fractions.Fraction) rather than on the library's bit tricks, so
they stay independent of the code paths they check.
"""

from __future__ import annotations

import math
import struct
from fractions import Fraction

import numpy as np
import pytest

from moeforge.layout import LayoutPlan, ModelConfig, ParallelConfig, plan_layout
from moeforge.tensor_store import Dtype, FlatCheckpoint, TensorSpec

# ── exact-value oracles ─────────────────────────────────────────────────────

FP8_NAN_CODES = (0x7F, 0xFF)


def fp8_exact(code: int) -> Fraction | None:
    """Exact E4M3FN value of a byte as a Fraction; None for the NaN codes."""
    sign = -1 if code & 0x80 else 1
    e = (code >> 3) & 0xF
    m = code & 0x7
    if e == 0xF and m == 0x7:
        return None
    if e == 0:
        mag = Fraction(m, 8) * Fraction(1, 2**6)
    else:
        mag = (1 + Fraction(m, 8)) * Fraction(2) ** (e - 7)
    return sign * mag


def fp8_encode_oracle(value: float) -> int:
    """Nearest E4M3FN code by exhaustive exact-distance search, ties to even."""
    assert math.isfinite(value)
    target = Fraction(value)
    sign = 0x80 if (value < 0 or (value == 0 and math.copysign(1, value) < 0)) else 0
    best_code, best_dist = 0, None
    for code in range(0x7F):  # positive magnitudes, 0x00..0x7E
        dist = abs(fp8_exact(code) - abs(target))
        if best_dist is None or dist < best_dist or (dist == best_dist and code % 2 == 0):
            best_code, best_dist = code, dist
    return best_code | sign


def bf16_exact(half: int) -> Fraction | None:
    """Exact value of a BF16 bit pattern; None for NaN, +-2^128 stands in
    for the infinities (the unbounded-exponent value used by RNE overflow)."""
    sign = -1 if half & 0x8000 else 1
    e = (half >> 7) & 0xFF
    m = half & 0x7F
    if e == 0xFF:
        if m:
            return None
        return sign * Fraction(2) ** 128
    if e == 0:
        return sign * Fraction(m, 128) * Fraction(2) ** -126
    return sign * (1 + Fraction(m, 128)) * Fraction(2) ** (e - 127)


def bf16_encode_oracle(value: float) -> int:
    """Round a finite float32 value to BF16 by exact nearest search.

    Candidates are the truncated pattern and its successor; a tie picks the
    even mantissa.  Overflow compares against 2^128 per the RNE convention.
    """
    assert math.isfinite(value)
    bits = struct.unpack(">I", struct.pack(">f", value))[0]
    lo = (bits >> 16) & 0xFFFF
    hi = lo + 1  # rolls into the next exponent, eventually the inf pattern
    target = Fraction(value)
    d_lo = abs(target - bf16_exact(lo))
    d_hi = abs(target - bf16_exact(hi)) if (hi & 0x7FFF) <= 0x7F80 else None
    if d_hi is None or d_lo < d_hi:
        return lo
    if d_hi < d_lo:
        return hi
    return lo if lo % 2 == 0 else hi


# ── synthetic checkpoints ───────────────────────────────────────────────────

ATTN_LEAVES = ("q_proj.weight", "k_proj.weight", "v_proj.weight", "o_proj.weight")
MLP_LEAVES = ("gate_proj.weight", "up_proj.weight", "down_proj.weight")
NORM_LEAVES = ("input_layernorm.weight", "post_attention_layernorm.weight")


def model_param_names(model: ModelConfig) -> list[str]:
    """The full release-format parameter name set implied by a model config."""
    names = ["model.embed_tokens.weight", "model.norm.weight", "lm_head.weight"]
    for i in range(model.num_layers):
        names += [f"model.layers.{i}.self_attn.{leaf}" for leaf in ATTN_LEAVES]
        names += [f"model.layers.{i}.{leaf}" for leaf in NORM_LEAVES]
        if i < model.num_dense_layers:
            names += [f"model.layers.{i}.mlp.{leaf}" for leaf in MLP_LEAVES]
        else:
            names.append(f"model.layers.{i}.mlp.gate.weight")
            for e in range(model.num_routed_experts):
                names += [
                    f"model.layers.{i}.mlp.experts.{e}.{leaf}" for leaf in MLP_LEAVES
                ]
            if model.has_shared_expert:
                names += [
                    f"model.layers.{i}.mlp.shared_experts.{leaf}" for leaf in MLP_LEAVES
                ]
    return names


_NON_NAN_FP8 = np.array(
    [c for c in range(256) if c not in FP8_NAN_CODES], dtype=np.uint8
)


def random_tensor(
    name: str, dtype: Dtype, rng: np.random.Generator, dims: tuple[int, ...] = (2, 2)
) -> TensorSpec:
    """Random payload of the given dtype; FP8 payloads avoid the NaN codes."""
    n = int(np.prod(dims))
    if dtype is Dtype.FP8_E4M3:
        data = rng.choice(_NON_NAN_FP8, size=n).tobytes()
    elif dtype is Dtype.BF16:
        values = rng.normal(scale=4.0, size=n).astype(np.float32)
        return TensorSpec.from_float32(name, dtype, values.reshape(dims))
    else:
        values = rng.normal(scale=4.0, size=n).astype(np.float32)
        return TensorSpec.from_float32(name, dtype, values.reshape(dims))
    return TensorSpec(name=name, dtype=dtype, shape=tuple(dims), data=data)


def make_checkpoint(
    model: ModelConfig,
    dtype: Dtype = Dtype.FP8_E4M3,
    seed: int = 0,
    dims: tuple[int, ...] = (2, 2),
    metadata: dict[str, str] | None = None,
) -> FlatCheckpoint:
    """Synthetic checkpoint covering the model's full parameter name set."""
    rng = np.random.default_rng(seed)
    tensors = [random_tensor(n, dtype, rng, dims) for n in model_param_names(model)]
    return FlatCheckpoint(
        tensors=tensors, metadata=metadata if metadata is not None else {"origin": "synthetic"}
    )


def random_model_and_plan(
    rng: np.random.Generator,
    max_layers: int = 12,
    max_experts: int = 16,
    max_pp: int = 4,
    max_width: int = 4,
) -> tuple[ModelConfig, LayoutPlan]:
    """Random valid (model, plan) pair within the given bounds."""
    pp = int(rng.integers(1, max_pp + 1))
    width = int(rng.integers(1, max_width + 1))
    layers = int(rng.integers(pp, max_layers + 1))
    dense = int(rng.integers(0, layers + 1))
    experts = width * int(rng.integers(1, max_experts // width + 1))
    model = ModelConfig(
        num_layers=layers,
        num_dense_layers=dense,
        num_routed_experts=experts,
        has_shared_expert=bool(rng.integers(0, 2)),
    )
    return model, plan_layout(model, ParallelConfig(pp=pp, width=width))


@pytest.fixture
def paper_plan() -> LayoutPlan:
    """The production-scale layout: 61 layers (3 dense), 256 experts, 31x8."""
    return plan_layout(
        ModelConfig(num_layers=61, num_dense_layers=3, num_routed_experts=256),
        ParallelConfig(pp=31, width=8),
    )
