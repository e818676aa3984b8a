import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genelm import kernels as K
from genelm import tokenizer as T
from genelm import trainer as TR
from genelm import genome_io as G
from genelm.errors import (CheckpointFormatError, DataConfigError, ShapeError,
                           TrainingDivergedError)
from genelm.model import LanguageModel, ModelConfig

SMALL = ModelConfig(vocab_size=6, hidden=16, n_layers=2, n_heads=2,
                    ffn_dim=24, max_seq_len=32)


def small_shard(rng, n=64, width=32):
    return rng.integers(2, 6, size=(n, width)).astype(np.uint8)


class TestLrSchedule:
    BASE_PLAN = TR.TrainConfig(lr_peak=4.8e-4, lr_min=4.8e-5,
                             warmup_iters=1000, total_iters=19000)

    def test_anchor_points(self):
        assert TR.lr_at(0, self.BASE_PLAN) == 0.0
        assert TR.lr_at(1000, self.BASE_PLAN) == 4.8e-4
        assert TR.lr_at(19000, self.BASE_PLAN) == 4.8e-5

    def test_extension_anchor_points(self):
        ext = TR.TrainConfig(lr_peak=1e-4, lr_min=4e-5,
                             warmup_iters=50, total_iters=1000)
        assert TR.lr_at(0, ext) == 0.0
        assert TR.lr_at(50, ext) == 1e-4
        assert TR.lr_at(1000, ext) == 4e-5

    def test_linear_midpoint(self):
        assert TR.lr_at(500, self.BASE_PLAN) == pytest.approx(4.8e-4 / 2, rel=1e-12)

    def test_cosine_midpoint(self):
        mid = TR.lr_at(10000, self.BASE_PLAN)
        assert mid == pytest.approx((4.8e-4 + 4.8e-5) / 2, rel=1e-12)

    def test_continuous_at_warmup(self):
        before = TR.lr_at(999, self.BASE_PLAN)
        at = TR.lr_at(1000, self.BASE_PLAN)
        after = TR.lr_at(1001, self.BASE_PLAN)
        assert before < at and after < at
        assert at - before < 1e-6 and at - after < 1e-8

    def test_linear_decay_schedule(self):
        cfg = TR.TrainConfig(lr_peak=1e-4, lr_min=0.0, warmup_iters=10,
                             total_iters=110, schedule="linear")
        assert TR.lr_at(60, cfg) == pytest.approx(5e-5, rel=1e-12)
        assert TR.lr_at(110, cfg) == 0.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            TR.lr_at(-1, self.BASE_PLAN)
        with pytest.raises(ValueError):
            TR.lr_at(19001, self.BASE_PLAN)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            TR.TrainConfig(warmup_iters=10, total_iters=5)
        with pytest.raises(ValueError):
            TR.TrainConfig(beta1=1.0)


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = {"w": K.Tensor(np.array([1.0, -2.0], dtype=np.float32))}
        cfg = TR.TrainConfig(weight_decay=0.0)
        state = TR.AdamState(p)
        before = p["w"].data.copy()
        TR.adamw_step(p, {"w": np.zeros(2, dtype=np.float32)}, state, 1, 1e-3, cfg)
        assert np.array_equal(p["w"].data, before)

    def test_first_step_closed_form(self):
        # step 1: m_hat = g, v_hat = g^2, update = lr*g/(|g| + eps)
        g = 0.37
        lr = 1e-2
        cfg = TR.TrainConfig(weight_decay=0.0, eps=1e-8)
        p = {"w": K.Tensor(np.array([2.0], dtype=np.float32))}
        state = TR.AdamState(p)
        TR.adamw_step(p, {"w": np.array([g], dtype=np.float32)}, state, 1, lr, cfg)
        expected = 2.0 - lr * g / (abs(g) + cfg.eps)
        assert abs(float(p["w"].data[0]) - expected) < 1e-7
        assert abs(float(p["w"].data[0]) - (2.0 - lr)) < 1e-6

    def test_quadratic_convergence(self):
        # minimize 0.5*(theta - 3)^2 by handing the optimizer its gradient
        cfg = TR.TrainConfig(weight_decay=0.0, beta2=0.999)
        p = {"w": K.Tensor(np.array([0.0], dtype=np.float32))}
        state = TR.AdamState(p)
        for step in range(1, 501):
            g = p["w"].data - 3.0
            TR.adamw_step(p, {"w": g}, state, step, 0.1, cfg)
        assert abs(float(p["w"].data[0]) - 3.0) < 1e-3

    def test_weight_decay_contraction_exact(self):
        lr, wd = 0.01, 0.1
        cfg = TR.TrainConfig(weight_decay=wd)
        p = {"w": K.Tensor(np.array([4.0, -8.0], dtype=np.float32))}
        state = TR.AdamState(p)
        expected = p["w"].data * np.float32(1.0 - lr * wd)
        TR.adamw_step(p, {"w": np.zeros(2, dtype=np.float32)}, state, 1, lr, cfg)
        assert np.array_equal(p["w"].data, expected)

    def test_nan_gradient_diverges(self):
        cfg = TR.TrainConfig()
        p = {"w": K.Tensor(np.array([1.0], dtype=np.float32))}
        state = TR.AdamState(p)
        with pytest.raises(TrainingDivergedError) as exc:
            TR.adamw_step(p, {"w": np.array([np.nan], dtype=np.float32)},
                          state, 7, 1e-3, cfg)
        assert exc.value.step == 7


class TestClip:
    def test_under_cap_unchanged(self):
        g = {"a": np.array([0.3, 0.4], dtype=np.float32)}
        before = g["a"].copy()
        assert TR.clip_global_norm(g, 1.0) == 1.0
        assert np.array_equal(g["a"], before)

    def test_over_cap_scaled(self):
        g = {"a": np.array([4.0, 0.0], dtype=np.float32),
             "b": np.zeros(3, dtype=np.float32)}
        factor = TR.clip_global_norm(g, 1.0)
        assert factor == pytest.approx(0.25, rel=1e-9)
        assert abs(TR.grad_global_norm(g) - 1.0) < 1e-6

    def test_all_zero_unchanged(self):
        g = {"a": np.zeros(4, dtype=np.float32)}
        assert TR.clip_global_norm(g, 1.0) == 1.0

    @given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=20),
           st.floats(0.01, 10))
    @settings(max_examples=100)
    def test_post_clip_norm_bounded(self, values, max_norm):
        g = {"a": np.array(values, dtype=np.float32)}
        TR.clip_global_norm(g, max_norm)
        assert TR.grad_global_norm(g) <= max_norm + 1e-6


class TestCheckpoint:
    def make(self, rng, step=17):
        model = LanguageModel.init(SMALL, seed=1)
        params = {n: p.data.copy() for n, p in model.named_params().items()}
        moments = ({n: rng.standard_normal(a.shape).astype(np.float32)
                    for n, a in params.items()},
                   {n: np.abs(rng.standard_normal(a.shape)).astype(np.float32)
                    for n, a in params.items()})
        return TR.Checkpoint(SMALL, TR.TrainConfig(), params, moments,
                             step=step, stage=2, data_seed=9)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        ckpt = self.make(rng)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        TR.save_checkpoint(ckpt, p1)
        loaded = TR.load_checkpoint(p1)
        assert loaded.step == 17 and loaded.stage == 2 and loaded.data_seed == 9
        assert loaded.model_config == SMALL
        for n in ckpt.params:
            assert np.array_equal(loaded.params[n], ckpt.params[n])
            assert np.array_equal(loaded.moments[0][n], ckpt.moments[0][n])
            assert np.array_equal(loaded.moments[1][n], ckpt.moments[1][n])
        TR.save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_payload_byte_rejected(self, tmp_path, rng):
        path = tmp_path / "c.bin"
        TR.save_checkpoint(self.make(rng), path)
        data = bytearray(path.read_bytes())
        data[-100] ^= 0x40
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError, match="checksum"):
            TR.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path, rng):
        path = tmp_path / "t.bin"
        TR.save_checkpoint(self.make(rng), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointFormatError):
            TR.load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"NOT A CHECKPOINT\n{}\n")
        with pytest.raises(CheckpointFormatError):
            TR.load_checkpoint(path)

    def test_mismatched_config_names_tensor(self, tmp_path, rng):
        path = tmp_path / "s.bin"
        TR.save_checkpoint(self.make(rng), path)
        other = dataclasses.replace(SMALL, hidden=32, ffn_dim=48)
        with pytest.raises(ShapeError, match="token_embedding"):
            TR.load_checkpoint(path, expected_config=other)


class TestTrainStage:
    def test_initial_loss_near_log_vocab(self, rng):
        data = small_shard(rng)
        cfg = TR.TrainConfig(batch_size=4, total_iters=1, warmup_iters=0,
                             lr_peak=1e-4, lr_min=1e-5)
        _, rows = TR.train_stage(SMALL, cfg, data, init_seed=0)
        assert abs(rows[0]["loss"] - math.log(6)) < 0.05

    def test_loss_decreases(self, rng):
        data = small_shard(rng, n=16)
        cfg = TR.TrainConfig(batch_size=4, total_iters=60, warmup_iters=10,
                             lr_peak=3e-3, lr_min=3e-4, weight_decay=0.0)
        _, rows = TR.train_stage(SMALL, cfg, data, init_seed=0)
        assert rows[-1]["loss"] < rows[0]["loss"] - 0.1

    def test_resume_bit_identical(self, rng):
        data = small_shard(rng)
        full_cfg = TR.TrainConfig(batch_size=4, total_iters=40, warmup_iters=5,
                                  lr_peak=1e-3, lr_min=1e-4)
        ckpt_full, rows_full = TR.train_stage(SMALL, full_cfg, data,
                                              data_seed=3, init_seed=1)
        ckpt_half, rows_half = TR.train_stage(SMALL, full_cfg, data,
                                              data_seed=3, init_seed=1,
                                              stop_at_step=20)
        assert ckpt_half.step == 20
        ckpt_resumed, rows_resumed = TR.train_stage(
            SMALL, full_cfg, data, start=ckpt_half)
        assert [r["loss"] for r in rows_half + rows_resumed] == \
               [r["loss"] for r in rows_full]
        for n in ckpt_full.params:
            assert np.array_equal(ckpt_full.params[n], ckpt_resumed.params[n])
            assert np.array_equal(ckpt_full.moments[0][n], ckpt_resumed.moments[0][n])

    def test_fixed_seeds_reproduce_loss_curve(self, rng):
        data = small_shard(rng)
        cfg = TR.TrainConfig(batch_size=4, total_iters=15, warmup_iters=2,
                             lr_peak=1e-3, lr_min=1e-4)
        _, rows_a = TR.train_stage(SMALL, cfg, data, data_seed=5, init_seed=5)
        _, rows_b = TR.train_stage(SMALL, cfg, data, data_seed=5, init_seed=5)
        assert [r["loss"] for r in rows_a] == [r["loss"] for r in rows_b]

    def test_windows_shorter_than_context_rejected(self, rng):
        data = small_shard(rng, width=16)
        cfg = TR.TrainConfig(batch_size=2, total_iters=2, warmup_iters=0)
        with pytest.raises(DataConfigError):
            TR.train_stage(SMALL, cfg, data)

    def test_metrics_log_written(self, tmp_path, rng):
        import json
        data = small_shard(rng)
        cfg = TR.TrainConfig(batch_size=2, total_iters=3, warmup_iters=1,
                             lr_peak=1e-3, lr_min=1e-4)
        log = tmp_path / "metrics.jsonl"
        _, rows = TR.train_stage(SMALL, cfg, data, log_path=log)
        lines = [json.loads(x) for x in log.read_text().splitlines()]
        assert len(lines) == 3
        for want, got in zip(rows, lines):
            assert set(got) == {"step", "lr", "loss", "ppl", "grad_norm",
                                "tokens_seen", "wall_ms"}
            assert got["loss"] == want["loss"]


class TestExtension:
    def base_checkpoint(self, rng):
        data = small_shard(rng)
        cfg = TR.TrainConfig(batch_size=4, total_iters=10, warmup_iters=2,
                             lr_peak=1e-3, lr_min=1e-4)
        ckpt, _ = TR.train_stage(SMALL, cfg, data, init_seed=2)
        return ckpt

    def test_extension_changes_no_weights_before_step(self, rng):
        ckpt = self.base_checkpoint(rng)
        prep = TR.prepare_extension(ckpt, 64, 1.6e5)
        assert prep.model_config.max_seq_len == 64
        assert prep.model_config.rope_base == 1.6e5
        assert prep.step == 0 and prep.stage == ckpt.stage + 1
        for n in ckpt.params:
            assert np.array_equal(prep.params[n], ckpt.params[n])

    def test_default_rope_base_is_squared_ratio(self):
        assert TR.default_rope_base(1e4, 128, 512) == pytest.approx(1.6e5)

    def test_extension_requires_longer_context(self, rng):
        ckpt = self.base_checkpoint(rng)
        with pytest.raises(ValueError):
            TR.prepare_extension(ckpt, SMALL.max_seq_len)

    def test_staged_doubling_plan_smoke(self, rng):
        rec = G.generate_synthetic_genome(8, 40_000, 1, 2.0)
        cfg = TR.TrainConfig(batch_size=4, total_iters=6, warmup_iters=1,
                             lr_peak=1e-3, lr_min=1e-4)
        plan = TR.StagePlan([TR.Stage(32, cfg), TR.Stage(64, cfg),
                             TR.Stage(128, cfg)])
        shards = [T.encode_windows(G.extract_windows([rec], n).windows)
                  for n in (32, 64, 128)]
        final, logs = TR.run_plan(plan, SMALL, shards)
        assert final.model_config.max_seq_len == 128
        assert final.stage == 2
        for stage_rows in logs:
            assert all(math.isfinite(r["loss"]) for r in stage_rows)

    def test_plan_requires_increasing_lengths(self):
        cfg = TR.TrainConfig(total_iters=1, warmup_iters=0)
        with pytest.raises(ValueError):
            TR.StagePlan([TR.Stage(64, cfg), TR.Stage(64, cfg)])
