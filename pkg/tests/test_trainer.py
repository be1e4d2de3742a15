"""Schedules, optimizer determinism, checkpoint format, curriculum plumbing."""

import dataclasses
import json

import numpy as np
import pytest

from meanflow.container import ContainerError
from meanflow.data import DatasetSpec, make_dataset
from meanflow.net import FlowNetConfig, init_params
from meanflow.objective import GuidanceConfig, TimestepConfig
from meanflow.trainer import (
    Checkpoint,
    CurriculumConfig,
    StageConfig,
    TrainingDiverged,
    load_checkpoint,
    lr_at,
    run_curriculum,
    save_checkpoint,
    stage_unstable,
    train_stage,
)
from meanflow.rng import derive_rng, get_state

from conftest import tiny_config


def small_stage(**overrides):
    base = dict(
        objective="flow_matching", dataset_id="d", steps=30, batch_size=16,
        peak_lr=1e-3, warmup_steps=5, log_interval=5,
        timestep=TimestepConfig(), guidance=GuidanceConfig(drop_prob=0.1),
    )
    base.update(overrides)
    return StageConfig(**base)


def point_dataset(n=64):
    return make_dataset(
        DatasetSpec(kind="point_mass", point=(1.0, -1.0), samples_per_label=n, seed=0)
    )


class TestLrSchedule:
    def test_warmup_endpoints(self):
        cfg = small_stage(steps=10_000, warmup_steps=1000, peak_lr=1e-4)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(1000, cfg) == pytest.approx(1e-4)

    def test_milestone_decay_is_cumulative(self):
        cfg = small_stage(steps=10_000, warmup_steps=1000, peak_lr=1e-4,
                          decay_milestones=(0.8, 0.9), decay_factor=0.1)
        assert lr_at(8100, cfg) == pytest.approx(1e-5)
        assert lr_at(9100, cfg) == pytest.approx(1e-6)

    def test_non_increasing_after_warmup(self):
        cfg = small_stage(steps=2000, warmup_steps=100, peak_lr=3e-3,
                          decay_milestones=(0.5, 0.75, 0.9), decay_factor=0.3)
        values = [lr_at(s, cfg) for s in range(100, 2000)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_warmup_ramp_area(self):
        cfg = small_stage(steps=10_000, warmup_steps=1000, peak_lr=1e-4)
        area = sum(lr_at(s, cfg) for s in range(1000))
        # discrete sum of a linear ramp: peak * (warmup - 1) / 2
        assert area == pytest.approx(1e-4 * 999 / 2, rel=1e-9)

    def test_milestones_must_increase(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            small_stage(decay_milestones=(0.9, 0.8))


class TestTrainStage:
    def test_zero_steps_keeps_initialization(self, tmp_path):
        cfg = tiny_config()
        res = train_stage(cfg, small_stage(steps=0), point_dataset(), 0, tmp_path, "s")
        fresh = init_params(cfg, 0, dtype=np.float32)
        for name in fresh.names():
            assert np.array_equal(res.params[name].numpy(), fresh[name].numpy())

    def test_identical_seeds_bitwise_identical(self, tmp_path):
        cfg = tiny_config()
        r1 = train_stage(cfg, small_stage(), point_dataset(), 7, tmp_path / "a", "s")
        r2 = train_stage(cfg, small_stage(), point_dataset(), 7, tmp_path / "b", "s")
        for name in r1.params.names():
            assert np.array_equal(r1.params[name].numpy(), r2.params[name].numpy())
        assert (tmp_path / "a" / "s.ckpt").read_bytes() == (tmp_path / "b" / "s.ckpt").read_bytes()

    def test_loss_drops_on_point_mass(self, tmp_path):
        cfg = tiny_config()
        res = train_stage(cfg, small_stage(steps=400, batch_size=32, peak_lr=3e-3),
                          point_dataset(), 0, tmp_path, "s")
        losses = [h["loss"] for h in res.history]
        assert np.mean(losses[-4:]) < 0.1 * np.mean(losses[:2])

    def test_metrics_log_schema(self, tmp_path):
        cfg = tiny_config()
        train_stage(cfg, small_stage(steps=12, log_interval=5), point_dataset(), 0, tmp_path, "s")
        rows = [json.loads(l) for l in (tmp_path / "s_metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 5, 10, 11]
        for row in rows:
            assert set(row) == {"step", "loss", "lr", "wall_ms"}

    def test_divergence_aborts_with_snapshot(self, tmp_path):
        cfg = tiny_config()
        stage = small_stage(steps=50, peak_lr=1e6, warmup_steps=0)  # guaranteed blow-up
        with pytest.raises(TrainingDiverged) as err:
            train_stage(cfg, stage, point_dataset(), 0, tmp_path, "boom")
        assert err.value.snapshot_path.exists()
        snap = load_checkpoint(err.value.snapshot_path)
        assert snap.step == err.value.step


class TestCheckpointFormat:
    def _roundtrip_ckpt(self, tmp_path):
        cfg = tiny_config()
        res = train_stage(cfg, small_stage(steps=6), point_dataset(), 3, tmp_path, "s")
        return cfg, res.checkpoint_path

    def test_save_load_save_byte_identical(self, tmp_path):
        _, path = self._roundtrip_ckpt(tmp_path)
        ckpt = load_checkpoint(path)
        save_checkpoint(tmp_path / "again.ckpt", ckpt)
        assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_magic_guard(self, tmp_path):
        _, path = self._roundtrip_ckpt(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(ContainerError, match="magic"):
            load_checkpoint(bad)

    def test_tampered_offset_rejected(self, tmp_path):
        _, path = self._roundtrip_ckpt(tmp_path)
        raw = path.read_bytes()
        header_len = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16 : 16 + header_len])
        header["tensors"][1]["byte_offset"] += 4
        import struct

        new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        bad = tmp_path / "tampered.ckpt"
        bad.write_bytes(raw[:8] + struct.pack("<Q", len(new_header)) + new_header + raw[16 + header_len:])
        with pytest.raises(ContainerError, match="corrupt tensor table"):
            load_checkpoint(bad)

    def test_cross_config_shape_mismatch_names_parameter(self, tmp_path):
        cfg, path = self._roundtrip_ckpt(tmp_path)
        ckpt = load_checkpoint(path)
        wrong = dict(ckpt.config)
        wrong_model = dict(wrong["model"])
        wrong_model["hidden_dim"] = 32
        wrong["model"] = wrong_model
        bad = Checkpoint(ckpt.params, ckpt.adam_m, ckpt.adam_v, ckpt.adam_count,
                         ckpt.step, wrong, ckpt.rng_state)
        save_checkpoint(tmp_path / "cross.ckpt", bad)
        with pytest.raises(ValueError, match="shape mismatch for parameter"):
            load_checkpoint(tmp_path / "cross.ckpt")


class TestContinuation:
    def test_split_run_is_bit_exact(self, tmp_path):
        cfg = tiny_config()
        ds = point_dataset()
        full = train_stage(cfg, small_stage(steps=20), ds, 5, tmp_path / "full", "s")

        part = train_stage(cfg, small_stage(steps=10), ds, 5, tmp_path / "part", "s")
        resumed = train_stage(
            cfg, small_stage(steps=20), ds, 5, tmp_path / "part", "s",
            resume=load_checkpoint(part.checkpoint_path),
        )
        for name in full.params.names():
            assert np.array_equal(full.params[name].numpy(), resumed.params[name].numpy())


class TestCurriculum:
    def _configs(self):
        model = tiny_config()
        datasets = {
            "broad": make_dataset(DatasetSpec(kind="point_mass", point=(1.0, -1.0),
                                              samples_per_label=64, seed=0)),
            "target": make_dataset(DatasetSpec(kind="point_mass", point=(1.0, -1.0),
                                               samples_per_label=64, seed=1)),
        }
        cur = CurriculumConfig(
            stage1=small_stage(dataset_id="broad", steps=20),
            stage2=small_stage(objective="mixed_flows", dataset_id="target", steps=15,
                               init="from_stage1"),
            seed=4,
        )
        return model, cur, datasets

    def test_two_stages_and_manifest(self, tmp_path):
        model, cur, datasets = self._configs()
        ckpt_path, manifest = run_curriculum(model, cur, datasets, tmp_path)
        assert ckpt_path.name == "stage2.ckpt"
        stages = manifest["deterministic"]["stages"]
        assert [s["name"] for s in stages] == ["stage1", "stage2"]
        assert (tmp_path / "manifest.json").exists()
        assert (tmp_path / "stage1.ckpt").exists()

    def test_zero_stage2_steps_keeps_stage1_model(self, tmp_path):
        model, cur, datasets = self._configs()
        cur = dataclasses.replace(cur, stage2=dataclasses.replace(cur.stage2, steps=0))
        ckpt_path, _ = run_curriculum(model, cur, datasets, tmp_path)
        final = load_checkpoint(ckpt_path)
        stage1 = load_checkpoint(tmp_path / "stage1.ckpt")
        for name in final.params.names():
            assert np.array_equal(final.params[name].numpy(), stage1.params[name].numpy())

    def test_manifest_hash_reproducible(self, tmp_path):
        model, cur, datasets = self._configs()
        _, m1 = run_curriculum(model, cur, datasets, tmp_path / "a")
        _, m2 = run_curriculum(model, cur, datasets, tmp_path / "b")
        assert m1["manifest_hash"] == m2["manifest_hash"]

    def test_unknown_dataset_id_rejected(self, tmp_path):
        model, cur, datasets = self._configs()
        cur = dataclasses.replace(cur, stage1=dataclasses.replace(cur.stage1, dataset_id="nope"))
        with pytest.raises(ValueError, match="unknown dataset"):
            run_curriculum(model, cur, datasets, tmp_path)


def test_stage_unstable_rules():
    flat = [{"step": s, "loss": 1.0} for s in range(0, 1000, 50)]
    assert stage_unstable(flat, 1000)  # no improvement
    improving = [{"step": s, "loss": 1.0 / (1 + s)} for s in range(0, 1000, 50)]
    assert not stage_unstable(improving, 1000)
    assert stage_unstable([], 100)


def test_checkpoint_rng_state_roundtrip(tmp_path):
    cfg = tiny_config()
    rng = derive_rng(1, 2)
    rng.normal(size=10)
    params = init_params(cfg, 0, dtype=np.float32)
    ckpt = Checkpoint(params, {n: np.zeros(t.shape, t.dtype) for n, t in params.items()},
                      {n: np.zeros(t.shape, t.dtype) for n, t in params.items()},
                      0, 0, {"model": dataclasses.asdict(cfg), "dtype": "float32"},
                      get_state(rng))
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "c.ckpt")
    assert loaded.rng_state == get_state(rng)
