"""Deterministic lockstep simulation of per-rank collective-call programs.

Collectives are modelled as barrier-matched rendezvous with per-group FIFO
indexing: the k-th collective on a group completes only once every member
has issued its k-th call on that group, and matched calls must agree on the
operation tag.  No data moves; the hybrid dense/MoE optimizer hang is purely
an arrival property.  Ranks are scheduled round-robin in (stage, local)
order, so identical inputs always produce identical outcomes.

The step-program builder reproduces the hang: with separate dense and MoE
optimizer groups, ranks on dense-only stages never enter the MoE gradient
all-reduce, leaving every MoE-hosting rank blocked on a participant that
never arrives.  Enabling the stub gives those ranks an empty-payload MoE
call, restoring a uniform call order and a completed step.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import CollectiveMismatch, InvalidValue
from .layout import LayoutPlan, RankId

__all__ = [
    "GroupId",
    "CollectiveCall",
    "RankProgram",
    "Verdict",
    "GroupStall",
    "SimOutcome",
    "build_step_program",
    "simulate",
    "explain",
    "DENSE_GROUP",
    "MOE_GROUP",
]

DENSE_GROUP = "dense_optim"
MOE_GROUP = "moe_optim"


@dataclass(frozen=True)
class GroupId:
    """A named process group: the set of ranks participating in its collectives."""

    name: str
    members: frozenset[RankId]

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidValue("group name must be non-empty")
        if not self.members:
            raise InvalidValue(f"group {self.name!r} has no members")


@dataclass(frozen=True)
class CollectiveCall:
    """One collective invocation: target group, operation tag, payload kind."""

    group: str
    op_tag: str
    payload: str = "real"  # "real" or "empty"; matching ignores the payload

    def __post_init__(self) -> None:
        if not self.op_tag:
            raise InvalidValue("op_tag must be non-empty")
        if self.payload not in ("real", "empty"):
            raise InvalidValue(f"payload must be 'real' or 'empty', got {self.payload!r}")


@dataclass(frozen=True)
class RankProgram:
    """The ordered collective calls one rank issues during a step."""

    rank: RankId
    calls: tuple[CollectiveCall, ...]


class Verdict(Enum):
    COMPLETED = "completed"
    DEADLOCK = "deadlock"


@dataclass(frozen=True)
class GroupStall:
    """Arrival picture of one group stuck at collective index ``index``."""

    group: str
    index: int
    arrived: tuple[RankId, ...]
    missing: tuple[RankId, ...]


@dataclass(frozen=True)
class SimOutcome:
    """Simulation verdict plus the blocked map and matched-collective count."""

    verdict: Verdict
    blocked: dict[RankId, tuple[int, str]]
    steps: int
    stalls: tuple[GroupStall, ...] = ()

    def __post_init__(self) -> None:
        if self.verdict is Verdict.COMPLETED and self.blocked:
            raise InvalidValue("completed outcome cannot carry blocked ranks")


def build_step_program(
    plan: LayoutPlan, stub_enabled: bool
) -> tuple[list[GroupId], list[RankProgram]]:
    """One training step's collectives for every rank under the plan.

    Both optimizer groups span all ranks.  Every rank issues one dense
    gradient all-reduce; ranks on MoE stages follow with a real MoE gradient
    all-reduce.  Ranks on dense-only stages issue the MoE call with an empty
    payload when the stub is enabled and omit it otherwise.
    """
    all_ranks = frozenset(plan.ranks())
    groups = [
        GroupId(DENSE_GROUP, all_ranks),
        GroupId(MOE_GROUP, all_ranks),
    ]
    programs = []
    for rank in plan.ranks():
        calls = [CollectiveCall(DENSE_GROUP, "dense_grad_allreduce")]
        if rank.stage in plan.moe_stages:
            calls.append(CollectiveCall(MOE_GROUP, "moe_grad_allreduce", "real"))
        elif stub_enabled:
            calls.append(CollectiveCall(MOE_GROUP, "moe_grad_allreduce", "empty"))
        programs.append(RankProgram(rank=rank, calls=tuple(calls)))
    return groups, programs


def simulate(groups: list[GroupId], programs: list[RankProgram]) -> SimOutcome:
    """Run the programs to completion or deadlock under lockstep semantics."""
    by_name = {g.name: g for g in groups}
    if len(by_name) != len(groups):
        raise InvalidValue("group names must be unique within a simulation")
    for prog in programs:
        for i, call in enumerate(prog.calls):
            g = by_name.get(call.group)
            if g is None:
                raise InvalidValue(
                    f"rank {prog.rank} call {i} references undeclared group {call.group!r}"
                )
            if prog.rank not in g.members:
                raise InvalidValue(
                    f"rank {prog.rank} issues on group {call.group!r} it does not belong to"
                )

    order = sorted(programs, key=lambda pr: pr.rank)
    if len({pr.rank for pr in order}) != len(order):
        raise InvalidValue("each rank may have at most one program")
    pc = {pr.rank: 0 for pr in order}
    prog_of = {pr.rank: pr.calls for pr in order}
    # per group: matched-collective count and the currently waiting ranks
    matched = {g.name: 0 for g in groups}
    waiting: dict[str, dict[RankId, tuple[int, str]]] = {g.name: {} for g in groups}
    blocked_on: dict[RankId, str] = {}
    steps = 0

    progressed = True
    while progressed:
        progressed = False
        for rank in [pr.rank for pr in order]:
            if rank in blocked_on or pc[rank] >= len(prog_of[rank]):
                continue
            call = prog_of[rank][pc[rank]]
            waiting[call.group][rank] = (pc[rank], call.op_tag)
            blocked_on[rank] = call.group
            progressed = True
            group = by_name[call.group]
            if len(waiting[call.group]) == len(group.members):
                tags = {tag for _, tag in waiting[call.group].values()}
                if len(tags) > 1:
                    raise CollectiveMismatch(
                        f"group {call.group!r} collective {matched[call.group]}: "
                        f"divergent op tags {sorted(tags)}"
                    )
                for member in waiting[call.group]:
                    pc[member] += 1
                    del blocked_on[member]
                waiting[call.group].clear()
                matched[call.group] += 1
                steps += 1

    finished = all(pc[r] >= len(prog_of[r]) for r in pc)
    if finished:
        return SimOutcome(verdict=Verdict.COMPLETED, blocked={}, steps=steps)

    blocked = dict(
        sorted(
            (rank, (index, gname))
            for gname, ranks in waiting.items()
            for rank, (index, _tag) in ranks.items()
        )
    )
    stalls = []
    for g in groups:
        if not waiting[g.name]:
            continue
        arrived = tuple(sorted(waiting[g.name]))
        missing = tuple(sorted(g.members - set(arrived)))
        stalls.append(
            GroupStall(
                group=g.name, index=matched[g.name], arrived=arrived, missing=missing
            )
        )
    return SimOutcome(
        verdict=Verdict.DEADLOCK, blocked=blocked, steps=steps, stalls=tuple(stalls)
    )


def explain(outcome: SimOutcome) -> str:
    """Human-readable report: one line when completed, arrival tables when stuck."""
    if outcome.verdict is Verdict.COMPLETED:
        return f"completed; {outcome.steps} collectives matched"
    lines = [
        f"deadlock; {len(outcome.blocked)} ranks blocked after "
        f"{outcome.steps} matched collectives"
    ]
    for stall in outcome.stalls:
        lines.append(
            f"group {stall.group!r} stuck at collective {stall.index}: "
            f"{len(stall.arrived)} arrived, {len(stall.missing)} missing"
        )
        lines.append(
            "  arrived: " + _format_ranks(stall.arrived)
        )
        lines.append(
            "  never arrives: " + _format_ranks(stall.missing)
        )
    return "\n".join(lines)


def _format_ranks(ranks: tuple[RankId, ...], limit: int = 16) -> str:
    shown = ", ".join(str(r) for r in ranks[:limit])
    if len(ranks) > limit:
        shown += f", ... ({len(ranks) - limit} more)"
    return shown if ranks else "(none)"
