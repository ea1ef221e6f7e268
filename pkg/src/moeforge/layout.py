"""Placement of layers, experts, embedding, and head onto rank coordinates.

A deployment is a grid of ``pp`` pipeline stages by ``width`` local ranks,
where the same ``width`` ranks act as the expert-parallel group on MoE
layers and the data-parallel group on dense layers.  The planner splits
layers into contiguous per-stage ranges whose sizes differ by at most one
(remainder to the earliest stages) and routed experts into contiguous
ascending per-local-rank ranges, e.g. experts 0-31 on local rank 0 and
224-255 on local rank 7 for 256 experts over 8 ranks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .errors import InfeasibleLayout, InvalidValue, OrphanParam, UnknownExpert, UnknownLayer
from .tensor_store import ParamKind, ParamName

__all__ = [
    "ModelConfig",
    "ParallelConfig",
    "RankId",
    "LayoutPlan",
    "plan_layout",
    "assign_param",
    "validate_layout",
    "plan_to_json",
    "plan_from_json",
    "load_plan",
    "save_plan",
]


@dataclass(frozen=True)
class ModelConfig:
    """Depth and expert structure of a hybrid dense-MoE decoder stack.

    Layers with index < ``num_dense_layers`` use a dense MLP; the remaining
    layers are MoE with ``num_routed_experts`` routed experts each (plus an
    always-on shared expert when ``has_shared_expert``).
    """

    num_layers: int
    num_dense_layers: int
    num_routed_experts: int
    has_shared_expert: bool = True

    def __post_init__(self) -> None:
        if self.num_layers <= 0:
            raise InvalidValue(f"num_layers must be positive, got {self.num_layers}")
        if not 0 <= self.num_dense_layers <= self.num_layers:
            raise InvalidValue(
                f"num_dense_layers must be in [0, {self.num_layers}], "
                f"got {self.num_dense_layers}"
            )
        if self.num_routed_experts <= 0:
            raise InvalidValue(
                f"num_routed_experts must be positive, got {self.num_routed_experts}"
            )

    def is_moe_layer(self, layer: int) -> bool:
        return self.num_dense_layers <= layer < self.num_layers


@dataclass(frozen=True)
class ParallelConfig:
    """Pipeline depth and per-stage width (EP degree == DP degree)."""

    pp: int
    width: int

    def __post_init__(self) -> None:
        if self.pp <= 0 or self.width <= 0:
            raise InvalidValue(f"pp and width must be positive, got {self.pp}x{self.width}")

    @property
    def total_ranks(self) -> int:
        return self.pp * self.width


@dataclass(frozen=True, order=True)
class RankId:
    """One device coordinate: (pipeline stage, local rank within the stage)."""

    stage: int
    local: int

    def __str__(self) -> str:
        return f"(s{self.stage},l{self.local})"


@dataclass(frozen=True)
class LayoutPlan:
    """Full assignment of layers and experts to the stage x width grid.

    ``stage_layers[s]`` is the half-open global layer range of stage ``s``;
    ``expert_ranges[j]`` the half-open routed-expert range of local rank
    ``j`` (identical on every MoE stage).
    """

    model: ModelConfig
    parallel: ParallelConfig
    stage_layers: tuple[tuple[int, int], ...]
    expert_ranges: tuple[tuple[int, int], ...]
    embedding_stage: int
    head_stage: int
    moe_stages: frozenset[int]

    def stage_of_layer(self, layer: int) -> int:
        if not 0 <= layer < self.model.num_layers:
            raise UnknownLayer(
                f"layer {layer} outside [0, {self.model.num_layers})"
            )
        for s, (lo, hi) in enumerate(self.stage_layers):
            if lo <= layer < hi:
                return s
        raise UnknownLayer(f"layer {layer} not covered by any stage")

    def owner_of_expert(self, expert: int) -> int:
        if not 0 <= expert < self.model.num_routed_experts:
            raise UnknownExpert(
                f"expert {expert} outside [0, {self.model.num_routed_experts})"
            )
        for j, (lo, hi) in enumerate(self.expert_ranges):
            if lo <= expert < hi:
                return j
        raise UnknownExpert(f"expert {expert} not covered by any local rank")

    def ranks(self) -> list[RankId]:
        """All rank coordinates in (stage, local) order."""
        return [
            RankId(s, j)
            for s in range(self.parallel.pp)
            for j in range(self.parallel.width)
        ]


def plan_layout(m: ModelConfig, p: ParallelConfig) -> LayoutPlan:
    """Balanced contiguous placement; deterministic for identical inputs.

    Layer remainders go to the earliest stages, so stage sizes differ by at
    most one.  Requires num_layers >= pp and experts divisible by width.
    """
    if m.num_layers < p.pp:
        raise InfeasibleLayout(
            f"{m.num_layers} layers cannot fill {p.pp} pipeline stages"
        )
    if m.num_routed_experts % p.width != 0:
        raise InfeasibleLayout(
            f"{m.num_routed_experts} experts not divisible by width {p.width}"
        )

    base, rem = divmod(m.num_layers, p.pp)
    stage_layers = []
    start = 0
    for s in range(p.pp):
        size = base + (1 if s < rem else 0)
        stage_layers.append((start, start + size))
        start += size

    per = m.num_routed_experts // p.width
    expert_ranges = tuple((j * per, (j + 1) * per) for j in range(p.width))

    moe_stages = frozenset(
        s
        for s, (lo, hi) in enumerate(stage_layers)
        if hi > m.num_dense_layers and lo < m.num_layers
    )
    return LayoutPlan(
        model=m,
        parallel=p,
        stage_layers=tuple(stage_layers),
        expert_ranges=expert_ranges,
        embedding_stage=0,
        head_stage=p.pp - 1,
        moe_stages=moe_stages,
    )


def _stage_replicas(plan: LayoutPlan, stage: int) -> set[RankId]:
    return {RankId(stage, j) for j in range(plan.parallel.width)}


def assign_param(n: ParamName, plan: LayoutPlan) -> set[RankId]:
    """Owning ranks for one parameter under the plan.

    Routed experts land on exactly one rank; everything else is replicated
    across the ``width`` ranks of its stage (embedding on stage 0, the final
    norm and output head on the last stage).
    """
    if n.kind is ParamKind.EMBEDDING:
        return _stage_replicas(plan, plan.embedding_stage)
    if n.kind is ParamKind.OUTPUT_HEAD:
        return _stage_replicas(plan, plan.head_stage)
    if n.kind is ParamKind.NORM and n.layer is None:
        return _stage_replicas(plan, plan.head_stage)
    if n.layer is None:
        raise OrphanParam(f"no placement rule for parameter {n.raw!r}")
    stage = plan.stage_of_layer(n.layer)
    if n.kind is ParamKind.ROUTED_EXPERT:
        return {RankId(stage, plan.owner_of_expert(n.expert))}
    # attention, dense MLP, norms, shared experts, and per-layer extras are
    # replicated like dense parameters (gradients sync over the DP group)
    return _stage_replicas(plan, stage)


def validate_layout(plan: LayoutPlan) -> list[str]:
    """Check every LayoutPlan invariant; returns one message per violation."""
    findings: list[str] = []
    m, p = plan.model, plan.parallel

    if len(plan.stage_layers) != p.pp:
        findings.append(
            f"expected {p.pp} stage ranges, found {len(plan.stage_layers)}"
        )
    prev_end = 0
    sizes = []
    for s, (lo, hi) in enumerate(plan.stage_layers):
        if lo != prev_end:
            findings.append(
                f"stage {s}: range [{lo},{hi}) not contiguous with previous end {prev_end}"
            )
        if hi < lo:
            findings.append(f"stage {s}: inverted range [{lo},{hi})")
        sizes.append(max(hi - lo, 0))
        prev_end = hi
    if prev_end != m.num_layers:
        findings.append(
            f"stage ranges cover [0,{prev_end}) but the model has {m.num_layers} layers"
        )
    if sizes and max(sizes) - min(sizes) > 1:
        findings.append(
            f"stage sizes differ by more than 1 (min {min(sizes)}, max {max(sizes)})"
        )

    if len(plan.expert_ranges) != p.width:
        findings.append(
            f"expected {p.width} expert ranges, found {len(plan.expert_ranges)}"
        )
    prev_end = 0
    for j, (lo, hi) in enumerate(plan.expert_ranges):
        if lo != prev_end:
            if lo < prev_end:
                findings.append(
                    f"local ranks {j - 1} and {j}: expert ranges overlap at {lo}"
                )
            else:
                findings.append(
                    f"local rank {j}: experts [{prev_end},{lo}) unassigned"
                )
        if hi < lo:
            findings.append(f"local rank {j}: inverted expert range [{lo},{hi})")
        prev_end = max(prev_end, hi)
    if prev_end != m.num_routed_experts:
        findings.append(
            f"expert ranges cover [0,{prev_end}) but the model has "
            f"{m.num_routed_experts} routed experts"
        )

    expected_moe = {
        s
        for s, (lo, hi) in enumerate(plan.stage_layers)
        if hi > m.num_dense_layers and lo < m.num_layers
    }
    if plan.moe_stages != expected_moe:
        findings.append(
            f"moe_stages {sorted(plan.moe_stages)} != stages with MoE layers "
            f"{sorted(expected_moe)}"
        )
    if plan.embedding_stage != 0:
        findings.append(f"embedding_stage is {plan.embedding_stage}, expected 0")
    if plan.head_stage != p.pp - 1:
        findings.append(f"head_stage is {plan.head_stage}, expected {p.pp - 1}")
    return findings


# ── JSON serialization ──────────────────────────────────────────────────────

def plan_to_json(plan: LayoutPlan) -> dict:
    return {
        "model": {
            "num_layers": plan.model.num_layers,
            "num_dense_layers": plan.model.num_dense_layers,
            "num_routed_experts": plan.model.num_routed_experts,
            "has_shared_expert": plan.model.has_shared_expert,
        },
        "pp": plan.parallel.pp,
        "width": plan.parallel.width,
        "stage_layers": [list(r) for r in plan.stage_layers],
        "expert_ranges": [list(r) for r in plan.expert_ranges],
        "embedding_stage": plan.embedding_stage,
        "head_stage": plan.head_stage,
        "moe_stages": sorted(plan.moe_stages),
    }


def plan_from_json(doc: dict) -> LayoutPlan:
    try:
        model = ModelConfig(
            num_layers=doc["model"]["num_layers"],
            num_dense_layers=doc["model"]["num_dense_layers"],
            num_routed_experts=doc["model"]["num_routed_experts"],
            has_shared_expert=doc["model"]["has_shared_expert"],
        )
        parallel = ParallelConfig(pp=doc["pp"], width=doc["width"])
        return LayoutPlan(
            model=model,
            parallel=parallel,
            stage_layers=tuple(tuple(r) for r in doc["stage_layers"]),
            expert_ranges=tuple(tuple(r) for r in doc["expert_ranges"]),
            embedding_stage=doc["embedding_stage"],
            head_stage=doc["head_stage"],
            moe_stages=frozenset(doc["moe_stages"]),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidValue(f"malformed layout plan document: {exc}") from exc


def save_plan(plan: LayoutPlan, path: str | os.PathLike) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(plan_to_json(plan), f, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def load_plan(path: str | os.PathLike) -> LayoutPlan:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except ValueError as exc:
            raise InvalidValue(f"{path}: not valid JSON: {exc}") from exc
    return plan_from_json(doc)
