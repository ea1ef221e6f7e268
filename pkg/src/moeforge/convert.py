"""Bidirectional conversion between flat release checkpoints and rank shards.

Forward: cast every tensor to BF16, group by layer, rename to the trainer
scheme, and emit one shard per rank holding exactly the parameters that rank
owns.  Reverse: verify replicated parameters are byte-identical across their
owners, merge by layer and expert index back into release naming, and cast
to the requested dtype.

Trainer names keep the global layer index; stage/local coordinates live only
in the manifest, which keeps the renaming a simple prefix bijection:

    model.embed_tokens.*                 <-> embedding.word_embeddings.*
    model.layers.<i>.mlp.experts.<e>.*   <-> decoder.layers.<i>.mlp.experts.local_experts.<e>.*
    model.layers.<i>.*                   <-> decoder.layers.<i>.*
    model.norm.*                         <-> decoder.final_layernorm.*
    lm_head.*                            <-> output_layer.*
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    ConfigMismatch,
    DuplicateParam,
    IncompleteShardSet,
    InvalidValue,
    MissingLayer,
    ReplicaMismatch,
    UnknownExpert,
    UnknownLayer,
)
from .layout import LayoutPlan, RankId, assign_param
from .tensor_store import (
    Dtype,
    FlatCheckpoint,
    ParamKind,
    TensorSpec,
    cast_tensor,
    parse_param_name,
    read_checkpoint,
    write_checkpoint,
)

__all__ = [
    "LayeredModel",
    "ShardSet",
    "group_by_layers",
    "shard",
    "merge",
    "rename_to_trainer",
    "rename_to_release",
    "shard_file_name",
    "write_shard_set",
    "read_shard_set",
    "max_workers",
]

# shard metadata keys holding the rank coordinates; stripped on merge
_META_STAGE = "shard.stage"
_META_LOCAL = "shard.local"


def max_workers() -> int:
    """Thread cap for per-rank work; MOEFORGE_THREADS=0 or unset means auto."""
    raw = os.environ.get("MOEFORGE_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise InvalidValue(f"MOEFORGE_THREADS must be an integer, got {raw!r}")
    if cap < 0:
        raise InvalidValue(f"MOEFORGE_THREADS must be >= 0, got {cap}")
    return cap if cap > 0 else (os.cpu_count() or 1)


@dataclass
class LayeredModel:
    """A checkpoint regrouped into pre-layer, per-layer, and post-layer bins."""

    pre_layers: list[TensorSpec]
    layers: list[list[TensorSpec]]
    post_layers: list[TensorSpec]

    @property
    def num_layers(self) -> int:
        return len(self.layers)


@dataclass
class ShardSet:
    """One BF16 checkpoint per rank plus the manifest binding ranks to files."""

    plan: LayoutPlan
    shards: dict[RankId, FlatCheckpoint]

    def manifest(self) -> dict:
        from .layout import plan_to_json

        return {
            "plan": plan_to_json(self.plan),
            "shards": [
                {
                    "stage": r.stage,
                    "local": r.local,
                    "file": shard_file_name(r),
                    "params": self.shards[r].names(),
                }
                for r in sorted(self.shards)
            ],
        }


def shard_file_name(rank: RankId) -> str:
    return f"shard_s{rank.stage}_l{rank.local}.adnk"


def group_by_layers(c: FlatCheckpoint) -> LayeredModel:
    """Bucket tensors by layer index, canonical order within each bucket.

    Embedding tensors land in pre_layers; the final norm, output head, and
    any other layer-less tensors in post_layers.  Layer indices must be
    dense from zero (gaps raise MissingLayer).
    """
    pre: list[TensorSpec] = []
    post: list[TensorSpec] = []
    by_layer: dict[int, dict[str, TensorSpec]] = {}
    for t in c.tensors:
        p = parse_param_name(t.name)
        if p.layer is None:
            (pre if p.kind is ParamKind.EMBEDDING else post).append(t)
            continue
        bucket = by_layer.setdefault(p.layer, {})
        if t.name in bucket:
            raise DuplicateParam(f"layer {p.layer}: duplicate parameter {t.name!r}")
        bucket[t.name] = t

    layers: list[list[TensorSpec]] = []
    if by_layer:
        top = max(by_layer)
        gaps = [i for i in range(top + 1) if i not in by_layer]
        if gaps:
            raise MissingLayer(f"no tensors for layers {gaps} (layers 0..{top} expected)")
        layers = [
            [by_layer[i][n] for n in sorted(by_layer[i])] for i in range(top + 1)
        ]
    return LayeredModel(
        pre_layers=sorted(pre, key=lambda t: t.name),
        layers=layers,
        post_layers=sorted(post, key=lambda t: t.name),
    )


# ── renaming ────────────────────────────────────────────────────────────────

_RELEASE_EXPERT_RE = re.compile(r"^model\.layers\.(\d+)\.mlp\.experts\.(\d+)\.(.+)$")
_RELEASE_LAYER_RE = re.compile(r"^model\.layers\.(\d+)\.(.+)$")
_TRAINER_EXPERT_RE = re.compile(
    r"^decoder\.layers\.(\d+)\.mlp\.experts\.local_experts\.(\d+)\.(.+)$"
)
_TRAINER_LAYER_RE = re.compile(r"^decoder\.layers\.(\d+)\.(.+)$")


def rename_to_trainer(name: str) -> str:
    """Release -> trainer name; unrecognised names pass through unchanged."""
    if name.startswith("model.embed_tokens."):
        return "embedding.word_embeddings." + name[len("model.embed_tokens."):]
    if name.startswith("model.norm."):
        return "decoder.final_layernorm." + name[len("model.norm."):]
    if name.startswith("lm_head."):
        return "output_layer." + name[len("lm_head."):]
    m = _RELEASE_EXPERT_RE.match(name)
    if m:
        return f"decoder.layers.{m.group(1)}.mlp.experts.local_experts.{m.group(2)}.{m.group(3)}"
    m = _RELEASE_LAYER_RE.match(name)
    if m:
        return f"decoder.layers.{m.group(1)}.{m.group(2)}"
    return name


def rename_to_release(name: str) -> str:
    """Trainer -> release name; exact inverse of rename_to_trainer."""
    if name.startswith("embedding.word_embeddings."):
        return "model.embed_tokens." + name[len("embedding.word_embeddings."):]
    if name.startswith("decoder.final_layernorm."):
        return "model.norm." + name[len("decoder.final_layernorm."):]
    if name.startswith("output_layer."):
        return "lm_head." + name[len("output_layer."):]
    m = _TRAINER_EXPERT_RE.match(name)
    if m:
        return f"model.layers.{m.group(1)}.mlp.experts.{m.group(2)}.{m.group(3)}"
    m = _TRAINER_LAYER_RE.match(name)
    if m:
        return f"model.layers.{m.group(1)}.{m.group(2)}"
    return name


# ── forward: shard ──────────────────────────────────────────────────────────

def shard(c: FlatCheckpoint, plan: LayoutPlan) -> ShardSet:
    """Cast to BF16, rename, and split into one checkpoint per rank.

    Raises ConfigMismatch when the checkpoint references layers or experts
    outside the plan's model, OrphanParam when a tensor has no owner.
    """
    # grouping validates layer density up front and fixes canonical order
    group_by_layers(c)

    owners: dict[RankId, list[TensorSpec]] = {r: [] for r in plan.ranks()}

    def place(t: TensorSpec) -> tuple[TensorSpec, set[RankId]]:
        p = parse_param_name(t.name)
        try:
            dest = assign_param(p, plan)
        except (UnknownLayer, UnknownExpert) as exc:
            raise ConfigMismatch(f"{t.name!r} does not fit the plan: {exc}") from exc
        cast = cast_tensor(t, Dtype.BF16)
        renamed = TensorSpec(
            name=rename_to_trainer(cast.name),
            dtype=cast.dtype,
            shape=cast.shape,
            data=cast.data,
        )
        return renamed, dest

    workers = max_workers()
    ordered = sorted(c.tensors, key=lambda t: t.name)
    if workers > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            placed = list(pool.map(place, ordered))
    else:
        placed = [place(t) for t in ordered]
    for renamed, dest in placed:
        for r in dest:
            owners[r].append(renamed)

    shards = {}
    for r, tensors in owners.items():
        meta = dict(c.metadata)
        meta[_META_STAGE] = str(r.stage)
        meta[_META_LOCAL] = str(r.local)
        shards[r] = FlatCheckpoint(tensors=tensors, metadata=meta).sorted()
    return ShardSet(plan=plan, shards=shards)


# ── reverse: merge ──────────────────────────────────────────────────────────

def merge(s: ShardSet, target_dtype: Dtype = Dtype.BF16) -> FlatCheckpoint:
    """Reassemble one flat release checkpoint from a shard set.

    Replicated parameters are taken from their lowest-coordinate owner after
    a mandatory byte-equality check across all replicas; divergence raises
    ReplicaMismatch naming the parameter and ranks.
    """
    expected = set(s.plan.ranks())
    missing = expected - set(s.shards)
    if missing:
        raise IncompleteShardSet(
            f"missing shards for ranks {[str(r) for r in sorted(missing)]}"
        )

    by_name: dict[str, list[tuple[RankId, TensorSpec]]] = {}
    for r in sorted(s.shards):
        for t in s.shards[r].tensors:
            by_name.setdefault(t.name, []).append((r, t))

    tensors = []
    for name in sorted(by_name):
        replicas = by_name[name]
        first_rank, first = replicas[0]
        for other_rank, other in replicas[1:]:
            if (
                other.data != first.data
                or other.dtype is not first.dtype
                or other.shape != first.shape
            ):
                raise ReplicaMismatch(
                    f"parameter {name!r} diverges between ranks "
                    f"{first_rank} and {other_rank}"
                )
        released = TensorSpec(
            name=rename_to_release(name),
            dtype=first.dtype,
            shape=first.shape,
            data=first.data,
        )
        tensors.append(cast_tensor(released, target_dtype))

    lowest = s.shards[min(s.shards)]
    metadata = {
        k: v for k, v in lowest.metadata.items() if k not in (_META_STAGE, _META_LOCAL)
    }
    return FlatCheckpoint(tensors=tensors, metadata=metadata).sorted()


# ── shard-set file I/O ──────────────────────────────────────────────────────

def write_shard_set(s: ShardSet, directory: str | os.PathLike) -> Path:
    """Write shard files plus manifest.json into a directory; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def write_one(rank: RankId) -> None:
        write_checkpoint(s.shards[rank], directory / shard_file_name(rank))

    ranks = sorted(s.shards)
    workers = max_workers()
    if workers > 1 and len(ranks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(write_one, ranks))
    else:
        for r in ranks:
            write_one(r)

    manifest_path = directory / "manifest.json"
    tmp = manifest_path.with_suffix(".json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(s.manifest(), f, indent=2)
        f.write("\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def read_shard_set(manifest_path: str | os.PathLike) -> ShardSet:
    """Load a shard set from its manifest; shard files resolve relative to it."""
    from .layout import plan_from_json

    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except ValueError as exc:
            raise InvalidValue(f"{manifest_path}: not valid JSON: {exc}") from exc
    try:
        plan = plan_from_json(doc["plan"])
        entries = doc["shards"]
    except (KeyError, TypeError) as exc:
        raise InvalidValue(f"{manifest_path}: malformed manifest: {exc}") from exc

    base = manifest_path.parent
    shards: dict[RankId, FlatCheckpoint] = {}
    for e in entries:
        rank = RankId(int(e["stage"]), int(e["local"]))
        file = base / e["file"]
        if not file.exists():
            raise IncompleteShardSet(f"shard file missing for rank {rank}: {file}")
        shards[rank] = read_checkpoint(file)
    return ShardSet(plan=plan, shards=shards)
