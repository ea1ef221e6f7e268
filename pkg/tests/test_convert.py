"""Converter tests: layer grouping, renaming bijection, shard ownership,
and the shard -> merge round trip (in memory and through files)."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import make_checkpoint, model_param_names, random_model_and_plan, random_tensor
from moeforge.convert import (
    group_by_layers,
    max_workers,
    merge,
    read_shard_set,
    rename_to_release,
    rename_to_trainer,
    shard,
    shard_file_name,
    write_shard_set,
)
from moeforge.errors import (
    ConfigMismatch,
    IncompleteShardSet,
    MissingLayer,
    OrphanParam,
    ReplicaMismatch,
)
from moeforge.layout import ModelConfig, ParallelConfig, RankId, plan_layout
from moeforge.tensor_store import (
    Dtype,
    FlatCheckpoint,
    ParamKind,
    TensorSpec,
    cast_tensor,
    parse_param_name,
)


def _cast_all(c: FlatCheckpoint, dtype: Dtype) -> FlatCheckpoint:
    return FlatCheckpoint(
        tensors=[cast_tensor(t, dtype) for t in c.tensors], metadata=dict(c.metadata)
    ).sorted()


# ── group_by_layers ─────────────────────────────────────────────────────────

def test_group_two_full_layers():
    model = ModelConfig(num_layers=2, num_dense_layers=2, num_routed_experts=1)
    c = make_checkpoint(model, seed=1)
    grouped = group_by_layers(c)
    assert grouped.num_layers == 2
    assert [t.name for t in grouped.pre_layers] == ["model.embed_tokens.weight"]
    assert {t.name for t in grouped.post_layers} == {"model.norm.weight", "lm_head.weight"}
    for bucket in grouped.layers:
        names = [t.name for t in bucket]
        assert names == sorted(names)


def test_group_gap_raises_missing_layer():
    rng = np.random.default_rng(2)
    c = FlatCheckpoint(
        tensors=[random_tensor("model.layers.3.self_attn.q_proj.weight", Dtype.BF16, rng)],
        metadata={},
    )
    with pytest.raises(MissingLayer) as err:
        group_by_layers(c)
    assert "0" in str(err.value)


def test_group_paper_scale_synthetic():
    model = ModelConfig(num_layers=61, num_dense_layers=3, num_routed_experts=4)
    grouped = group_by_layers(make_checkpoint(model, seed=3))
    assert grouped.num_layers == 61
    assert len(grouped.pre_layers) == 1
    assert len(grouped.post_layers) == 2


# ── renaming ────────────────────────────────────────────────────────────────

def test_rename_bijection_on_generable_names():
    model = ModelConfig(num_layers=5, num_dense_layers=2, num_routed_experts=6)
    for name in model_param_names(model):
        trainer = rename_to_trainer(name)
        assert trainer != name  # every release name gets the trainer prefix
        assert rename_to_release(trainer) == name


def test_rename_known_prefixes():
    assert rename_to_trainer("model.embed_tokens.weight") == "embedding.word_embeddings.weight"
    assert rename_to_trainer("model.norm.weight") == "decoder.final_layernorm.weight"
    assert rename_to_trainer("lm_head.weight") == "output_layer.weight"
    assert (
        rename_to_trainer("model.layers.4.mlp.experts.3.up_proj.weight")
        == "decoder.layers.4.mlp.experts.local_experts.3.up_proj.weight"
    )
    assert (
        rename_to_trainer("model.layers.4.self_attn.q_proj.weight")
        == "decoder.layers.4.self_attn.q_proj.weight"
    )


# ── shard ───────────────────────────────────────────────────────────────────

def test_shard_paper_moe_ownership(paper_plan):
    # one MoE layer's worth of names on the paper plan, small expert count
    # per rank checked against the contiguous split
    model = paper_plan.model
    c = make_checkpoint(
        ModelConfig(num_layers=61, num_dense_layers=3, num_routed_experts=256),
        seed=4,
        dims=(1,),
    )
    shard_set = shard(c, paper_plan)
    assert len(shard_set.shards) == 248
    stage5 = paper_plan.stage_of_layer(5)
    shard57 = shard_set.shards[RankId(stage5, 7)]
    experts_seen = {
        parse_param_name(rename_to_release(t.name)).expert
        for t in shard57.tensors
        if parse_param_name(rename_to_release(t.name)).kind is ParamKind.ROUTED_EXPERT
    }
    assert experts_seen == set(range(224, 256))
    for shard_ckpt in shard_set.shards.values():
        assert all(t.dtype is Dtype.BF16 for t in shard_ckpt.tensors)


def test_shard_single_rank_covers_everything():
    model = ModelConfig(num_layers=3, num_dense_layers=1, num_routed_experts=4)
    plan = plan_layout(model, ParallelConfig(pp=1, width=1))
    c = make_checkpoint(model, seed=5)
    shard_set = shard(c, plan)
    only = shard_set.shards[RankId(0, 0)]
    assert len(only) == len(c)
    assert merge(shard_set, Dtype.BF16) == _cast_all(c, Dtype.BF16)


def test_shard_orphan_param():
    model = ModelConfig(num_layers=2, num_dense_layers=2, num_routed_experts=2)
    plan = plan_layout(model, ParallelConfig(pp=1, width=1))
    rng = np.random.default_rng(6)
    c = FlatCheckpoint(
        tensors=[random_tensor("rotary.inv_freq", Dtype.FP32, rng)], metadata={}
    )
    with pytest.raises(OrphanParam):
        shard(c, plan)


def test_shard_config_mismatch_layer_out_of_range():
    model = ModelConfig(num_layers=2, num_dense_layers=0, num_routed_experts=2)
    plan = plan_layout(model, ParallelConfig(pp=1, width=1))
    bigger = ModelConfig(num_layers=4, num_dense_layers=0, num_routed_experts=2)
    c = make_checkpoint(bigger, seed=7)
    with pytest.raises(ConfigMismatch):
        shard(c, plan)


def test_shard_config_mismatch_expert_out_of_range():
    model = ModelConfig(num_layers=2, num_dense_layers=0, num_routed_experts=2)
    plan = plan_layout(model, ParallelConfig(pp=1, width=2))
    wider = ModelConfig(num_layers=2, num_dense_layers=0, num_routed_experts=8)
    c = make_checkpoint(wider, seed=8)
    with pytest.raises(ConfigMismatch):
        shard(c, plan)


def test_shard_ownership_partition():
    rng = np.random.default_rng(9)
    for _ in range(10):
        model, plan = random_model_and_plan(rng, max_layers=6, max_experts=8)
        c = make_checkpoint(model, seed=int(rng.integers(1 << 30)))
        shard_set = shard(c, plan)
        width = plan.parallel.width
        count: dict[str, int] = {}
        for shard_ckpt in shard_set.shards.values():
            for t in shard_ckpt.tensors:
                count[t.name] = count.get(t.name, 0) + 1
        for name, copies in count.items():
            kind = parse_param_name(rename_to_release(name)).kind
            assert copies == (1 if kind is ParamKind.ROUTED_EXPERT else width), name
        merged_names = {rename_to_release(n) for n in count}
        assert merged_names == set(c.names())


# ── merge ───────────────────────────────────────────────────────────────────

def test_merge_round_trip_randomized():
    rng = np.random.default_rng(10)
    for _ in range(25):
        model, plan = random_model_and_plan(rng, max_layers=6, max_experts=8)
        dtype = [Dtype.FP8_E4M3, Dtype.BF16, Dtype.FP32][int(rng.integers(0, 3))]
        c = make_checkpoint(model, dtype=dtype, seed=int(rng.integers(1 << 30)))
        assert merge(shard(c, plan), Dtype.BF16) == _cast_all(c, Dtype.BF16)


def test_merge_fp8_source_back_to_fp8():
    model = ModelConfig(num_layers=4, num_dense_layers=1, num_routed_experts=4)
    plan = plan_layout(model, ParallelConfig(pp=2, width=2))
    c = make_checkpoint(model, dtype=Dtype.FP8_E4M3, seed=11)
    assert merge(shard(c, plan), Dtype.FP8_E4M3) == c.sorted()


def test_merge_detects_replica_divergence():
    model = ModelConfig(num_layers=2, num_dense_layers=0, num_routed_experts=2)
    plan = plan_layout(model, ParallelConfig(pp=1, width=2))
    shard_set = shard(make_checkpoint(model, seed=12), plan)
    victim_rank = RankId(0, 1)
    victim = shard_set.shards[victim_rank]
    target = next(
        t for t in victim.tensors
        if parse_param_name(rename_to_release(t.name)).kind is ParamKind.ATTENTION
    )
    flipped = bytes([target.data[0] ^ 0xFF]) + target.data[1:]
    tensors = [
        TensorSpec(t.name, t.dtype, t.shape, flipped if t.name == target.name else t.data)
        for t in victim.tensors
    ]
    shard_set.shards[victim_rank] = FlatCheckpoint(tensors, dict(victim.metadata))
    with pytest.raises(ReplicaMismatch) as err:
        merge(shard_set, Dtype.BF16)
    assert target.name in str(err.value)


def test_merge_missing_shard():
    model = ModelConfig(num_layers=2, num_dense_layers=0, num_routed_experts=2)
    plan = plan_layout(model, ParallelConfig(pp=2, width=1))
    shard_set = shard(make_checkpoint(model, seed=13), plan)
    del shard_set.shards[RankId(1, 0)]
    with pytest.raises(IncompleteShardSet):
        merge(shard_set, Dtype.BF16)


def test_merge_strips_coordinate_metadata():
    model = ModelConfig(num_layers=2, num_dense_layers=1, num_routed_experts=2)
    plan = plan_layout(model, ParallelConfig(pp=2, width=1))
    c = make_checkpoint(model, seed=14, metadata={"origin": "unit", "step": "7"})
    merged = merge(shard(c, plan), Dtype.BF16)
    assert merged.metadata == {"origin": "unit", "step": "7"}


# ── shard-set files ─────────────────────────────────────────────────────────

def test_shard_set_file_round_trip(tmp_path):
    model = ModelConfig(num_layers=4, num_dense_layers=1, num_routed_experts=4)
    plan = plan_layout(model, ParallelConfig(pp=2, width=2))
    c = make_checkpoint(model, seed=15)
    shard_set = shard(c, plan)
    manifest_path = write_shard_set(shard_set, tmp_path / "shards")
    assert manifest_path.name == "manifest.json"
    loaded = read_shard_set(manifest_path)
    assert merge(loaded, Dtype.BF16) == _cast_all(c, Dtype.BF16)


def test_manifest_lists_every_rank(tmp_path):
    model = ModelConfig(num_layers=2, num_dense_layers=0, num_routed_experts=2)
    plan = plan_layout(model, ParallelConfig(pp=2, width=1))
    shard_set = shard(make_checkpoint(model, seed=16), plan)
    doc = shard_set.manifest()
    assert {(e["stage"], e["local"]) for e in doc["shards"]} == {(0, 0), (1, 0)}
    for e in doc["shards"]:
        assert e["file"] == shard_file_name(RankId(e["stage"], e["local"]))
        assert e["params"] == sorted(e["params"])


def test_read_shard_set_missing_file(tmp_path):
    model = ModelConfig(num_layers=2, num_dense_layers=0, num_routed_experts=2)
    plan = plan_layout(model, ParallelConfig(pp=2, width=1))
    shard_set = shard(make_checkpoint(model, seed=17), plan)
    manifest_path = write_shard_set(shard_set, tmp_path / "shards")
    (tmp_path / "shards" / shard_file_name(RankId(1, 0))).unlink()
    with pytest.raises(IncompleteShardSet):
        read_shard_set(manifest_path)


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("MOEFORGE_THREADS", "3")
    assert max_workers() == 3
    monkeypatch.setenv("MOEFORGE_THREADS", "0")
    assert max_workers() >= 1
    monkeypatch.delenv("MOEFORGE_THREADS")
    assert max_workers() >= 1


def test_shard_results_identical_across_thread_caps(monkeypatch):
    model = ModelConfig(num_layers=4, num_dense_layers=1, num_routed_experts=4)
    plan = plan_layout(model, ParallelConfig(pp=2, width=2))
    c = make_checkpoint(model, seed=18)
    monkeypatch.setenv("MOEFORGE_THREADS", "1")
    sequential = shard(c, plan)
    monkeypatch.setenv("MOEFORGE_THREADS", "4")
    threaded = shard(c, plan)
    assert sequential.shards == threaded.shards
