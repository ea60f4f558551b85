import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from protoseg.autodiff import Tensor, tsum
from protoseg.data import EpisodeSpec, generate_dataset, load_dataset
from protoseg.encoder import EncoderConfig
from protoseg.errors import ContractViolationError, TrainingError
from protoseg.losses import LossConfig
from protoseg.protohead import ProtoHeadConfig
from protoseg.trainer import (
    AdamW,
    Checkpoint,
    TrainConfig,
    _ensure_finite,
    clip_gradients,
    dump_log,
    evaluate,
    finetune_stage,
    lr_schedule,
    make_checkpoint,
    pretrain_stage,
    restore_model,
)

SMALL_ENCODER = EncoderConfig(stage_channels=(8, 16, 32, 64, 64), pyramid_channels=32)
TINY_SPEC = EpisodeSpec(n_ways=2, k_shots=1, n_query=1)


@pytest.fixture(scope="module")
def loaded(tmp_path_factory):
    root = tmp_path_factory.getbasetemp() / "tiny_ds"
    if not (root / "meta.json").exists():
        generate_dataset(root, num_images=192, image_size=32, seed=99)
    return load_dataset(root)


@pytest.fixture(scope="module")
def pretrained(loaded):
    config = TrainConfig(stage="pretrain", episodes=6, episode_spec=TINY_SPEC, seed=42)
    return pretrain_stage(loaded, config, encoder_config=SMALL_ENCODER)


class TestTrainConfig:
    def test_defaults_are_consistent(self):
        cfg = TrainConfig()
        assert cfg.episodes == cfg.schedule_T * cfg.schedule_stride == 1000
        assert (cfg.lr_init, cfg.lr_min, cfg.weight_decay) == (1e-3, 1e-6, 1e-5)
        assert cfg.clip_norm == 1.0 and cfg.seed == 42 and cfg.batch_episodes == 1

    def test_stage_specific_episode_defaults(self):
        pre = TrainConfig(stage="pretrain")
        fine = TrainConfig(stage="finetune")
        assert (pre.episode_spec.n_ways, pre.episode_spec.k_shots) == (8, 5)
        assert (fine.episode_spec.n_ways, fine.episode_spec.k_shots) == (2, 5)

    @pytest.mark.parametrize("kwargs", [
        dict(stage="train"), dict(attention_variant="full"), dict(clip_norm=0.0),
        dict(lr_init=1e-6, lr_min=1e-6), dict(episodes=0), dict(schedule_stride=0),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ContractViolationError):
            TrainConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = TrainConfig(stage="finetune", episodes=7, attention_variant="lsa",
                          episode_spec=EpisodeSpec(n_ways=3, k_shots=2))
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_digest_tracks_content(self):
        a = TrainConfig(seed=1)
        b = TrainConfig(seed=2)
        assert len(a.digest) == 12 and a.digest != b.digest
        assert a.digest == TrainConfig(seed=1).digest


class TestLrSchedule:
    CFG = TrainConfig()

    def test_start_is_exactly_lr_init(self):
        assert lr_schedule(0, self.CFG) == 1e-3

    def test_end_is_exactly_lr_min(self):
        assert lr_schedule(50, self.CFG) == 1e-6
        assert lr_schedule(80, self.CFG) == 1e-6

    def test_midpoint_is_mean_of_endpoints(self):
        assert lr_schedule(25, self.CFG) == pytest.approx((1e-3 + 1e-6) / 2, rel=1e-12)

    def test_monotonically_nonincreasing(self):
        values = [lr_schedule(t, self.CFG) for t in range(0, 51)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_negative_step_rejected(self):
        with pytest.raises(ContractViolationError):
            lr_schedule(-1, self.CFG)


class TestAdamW:
    def test_quadratic_bowl_step_decreases_loss(self):
        w = Tensor(np.array([2.0, -1.5]), requires_grad=True)
        opt = AdamW({"w": w}, lr=1e-2)
        before = float(tsum((w - 1.0) * (w - 1.0)).data)
        loss = tsum((w - 1.0) * (w - 1.0))
        loss.backward()
        opt.step()
        after = float(tsum((w - 1.0) * (w - 1.0)).data)
        assert after < before

    def test_decoupled_decay_shrinks_without_gradient_signal(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.5)
        w.grad = np.zeros(1)
        opt.step()
        assert w.data[0] == pytest.approx(0.95, abs=1e-12)

    def test_first_step_is_signed_unit_step(self):
        w = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        opt = AdamW({"w": w}, lr=1e-3)
        w.grad = np.array([0.4, -0.2])
        opt.step()
        np.testing.assert_allclose(w.data, [-1e-3, 1e-3], rtol=1e-6)

    def test_none_gradients_are_skipped(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.5)
        opt.step()
        assert w.data[0] == 3.0

    def test_state_round_trip(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = AdamW({"w": w}, lr=1e-2)
        w.grad = np.array([0.3, -0.7])
        opt.step()
        state = {k: v.copy() for k, v in opt.state_arrays().items()}
        other = AdamW({"w": w}, lr=1e-2)
        other.load_state_arrays(state, step_count=opt.step_count)
        np.testing.assert_array_equal(other.m["w"], opt.m["w"])
        np.testing.assert_array_equal(other.v["w"], opt.v["w"])
        assert other.step_count == 1


class TestClipGradients:
    def test_small_gradients_untouched(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.array([0.3, 0.0, 0.4])
        norm = clip_gradients({"p": p}, 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(p.grad, [0.3, 0.0, 0.4])

    def test_large_gradients_scaled_to_max_norm(self, rng):
        tensors = {}
        for i in range(3):
            t = Tensor(np.zeros(4), requires_grad=True)
            t.grad = rng.normal(size=4) * 10
            tensors[f"t{i}"] = t
        pre = clip_gradients(tensors, 1.0)
        assert pre > 1.0
        post = math.sqrt(sum(float((t.grad ** 2).sum()) for t in tensors.values()))
        assert post <= 1.0 + 1e-6
        assert post == pytest.approx(1.0, rel=1e-6)

    def test_no_gradients_gives_zero_norm(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        assert clip_gradients({"p": p}, 1.0) == 0.0


class TestPretrainStage:
    def test_smoke_run_logs_every_episode(self, pretrained):
        ckpt, log = pretrained
        assert len(log) == 6
        for record in log:
            assert {"stage", "episode", "loss", "ce", "dice", "focal",
                    "lr", "grad_norm", "classes"} <= set(record)
            assert record["stage"] == "pretrain"
        assert [r["episode"] for r in log] == list(range(6))

    def test_early_lr_equals_init(self, pretrained):
        _, log = pretrained
        assert all(r["lr"] == mkcfg().lr_init for r in log)

    def test_loss_trends_down_over_fifty_episodes(self, loaded):
        # default desk-preset encoder and 8-way 5-shot episodes: the task is
        # near-stationary, so 50 episodes at lr_init already show the trend
        config = TrainConfig(stage="pretrain", episodes=50, seed=7)
        _, log = pretrain_stage(loaded, config)
        first = np.mean([r["loss"] for r in log[:10]])
        last = np.mean([r["loss"] for r in log[-10:]])
        assert last < first

    def test_deterministic_given_seed(self, loaded, pretrained):
        ckpt_a, log_a = pretrained
        config = TrainConfig(stage="pretrain", episodes=6, episode_spec=TINY_SPEC, seed=42)
        ckpt_b, log_b = pretrain_stage(loaded, config, encoder_config=SMALL_ENCODER)
        assert [r["loss"] for r in log_a] == [r["loss"] for r in log_b]
        for key in ckpt_a.arrays:
            np.testing.assert_array_equal(ckpt_a.arrays[key], ckpt_b.arrays[key])

    def test_head_is_frozen(self, loaded):
        proto = ProtoHeadConfig(temperature_learnable=True)
        config = TrainConfig(stage="pretrain", episodes=3, episode_spec=TINY_SPEC, seed=1)
        ckpt, _ = pretrain_stage(loaded, config, encoder_config=SMALL_ENCODER,
                                 proto_config=proto)
        assert float(ckpt.arrays["head/temperature"]) == 20.0

    def test_wrong_stage_rejected(self, loaded):
        with pytest.raises(ContractViolationError, match="pretrain"):
            pretrain_stage(loaded, TrainConfig(stage="finetune"))

    def test_batch_accumulation_shares_grad_norm(self, loaded):
        config = TrainConfig(stage="pretrain", episodes=4, batch_episodes=2,
                             episode_spec=TINY_SPEC, seed=3)
        _, log = pretrain_stage(loaded, config, encoder_config=SMALL_ENCODER)
        assert len(log) == 4
        assert log[0]["grad_norm"] == log[1]["grad_norm"]
        assert log[2]["grad_norm"] == log[3]["grad_norm"]

    def test_checkpoint_header_fields(self, pretrained):
        ckpt, _ = pretrained
        h = ckpt.header
        assert h["version"] == 1 and h["stage"] == "pretrain"
        assert h["episodes_trained"] == 6
        assert h["attention_variant"] == "none"
        assert h["config_digest"] == TrainConfig.from_dict(h["config"]).digest
        assert "rng_state" in h and "encoder_config" in h

    def test_non_finite_loss_aborts_with_dump(self):
        episode = SimpleNamespace(support_ids=(1, 2), query_ids=(3,),
                                  episode_classes=(4, 5))
        with pytest.raises(TrainingError, match="episode 9") as exc:
            _ensure_finite(float("nan"), 9, episode, {"loss": float("nan")})
        assert exc.value.dump["support_ids"] == [1, 2]


def mkcfg(**kwargs):
    base = dict(stage="pretrain", episodes=6, episode_spec=TINY_SPEC, seed=42)
    base.update(kwargs)
    return TrainConfig(**base)


class TestFinetuneStage:
    def test_smoke_and_log_fields(self, loaded, pretrained):
        config = mkcfg(stage="finetune", episodes=4, seed=5)
        ckpt, log = finetune_stage(pretrained[0], loaded, config)
        assert len(log) == 4
        for record in log:
            assert {"stage", "episode", "loss", "query", "support", "proto",
                    "reg", "lr", "grad_norm"} <= set(record)
            assert record["support"] > 0.0  # bidirectional by default
        assert ckpt.header["stage"] == "finetune"

    def test_unidirectional_logs_zero_support(self, loaded, pretrained):
        config = mkcfg(stage="finetune", episodes=3, seed=5,
                       loss_config=LossConfig(bidirectional=False))
        _, log = finetune_stage(pretrained[0], loaded, config)
        assert all(r["support"] == 0.0 for r in log)

    def test_neutral_attention_first_episode_matches_baseline(self, loaded, pretrained):
        base_cfg = mkcfg(stage="finetune", episodes=1, seed=11)
        sa_cfg = mkcfg(stage="finetune", episodes=1, seed=11, attention_variant="sa")
        _, base_log = finetune_stage(pretrained[0], loaded, base_cfg)
        _, sa_log = finetune_stage(pretrained[0], loaded, sa_cfg)
        assert sa_log[0]["proto"] == base_log[0]["proto"]
        assert sa_log[0]["query"] == base_log[0]["query"]
        assert sa_log[0]["support"] == base_log[0]["support"]
        assert sa_log[0]["reg"] > 0.0 and base_log[0]["reg"] == 0.0

    def test_attention_head_receives_updates(self, loaded, pretrained):
        config = mkcfg(stage="finetune", episodes=3, seed=6, attention_variant="sa")
        ckpt, _ = finetune_stage(pretrained[0], loaded, config)
        assert ckpt.header["attention_variant"] == "sa"
        assert np.any(ckpt.arrays["attention/w_o"] != 0.0)

    def test_encoder_moves_from_pretrain_state(self, loaded, pretrained):
        config = mkcfg(stage="finetune", episodes=3, seed=6)
        ckpt, _ = finetune_stage(pretrained[0], loaded, config)
        moved = [k for k in ckpt.arrays
                 if k.startswith("encoder/") and "running" not in k
                 and not np.array_equal(ckpt.arrays[k], pretrained[0].arrays[k])]
        assert moved

    def test_wrong_stage_rejected(self, loaded, pretrained):
        with pytest.raises(ContractViolationError, match="finetune"):
            finetune_stage(pretrained[0], loaded, mkcfg(stage="pretrain"))


class TestEvaluate:
    def test_deterministic_given_seed(self, loaded, pretrained):
        a, _ = evaluate(pretrained[0], loaded, TINY_SPEC, episodes=4, seed=9)
        b, _ = evaluate(pretrained[0], loaded, TINY_SPEC, episodes=4, seed=9)
        assert a.mean.values() == b.mean.values()
        assert a.std.values() == b.std.values()

    def test_different_seed_draws_different_episodes(self, loaded, pretrained):
        a, _ = evaluate(pretrained[0], loaded, TINY_SPEC, episodes=4, seed=1)
        b, _ = evaluate(pretrained[0], loaded, TINY_SPEC, episodes=4, seed=2)
        assert a.mean.values() != b.mean.values()

    def test_report_sanity(self, loaded, pretrained):
        agg, reports = evaluate(pretrained[0], loaded, TINY_SPEC, episodes=5, seed=3)
        assert agg.episodes == len(reports) == 5
        assert 0.0 <= agg.mean.miou_with_bg <= 1.0
        assert 0.0 <= agg.mean.f1_with_bg <= 1.0
        assert all(s >= 0.0 for s in agg.std.values())

    def test_no_parameter_updates(self, loaded, pretrained):
        before = {k: v.copy() for k, v in pretrained[0].arrays.items()}
        evaluate(pretrained[0], loaded, TINY_SPEC, episodes=2, seed=4)
        for key, value in before.items():
            np.testing.assert_array_equal(value, pretrained[0].arrays[key])

    def test_respects_split_argument(self, loaded, pretrained):
        agg, _ = evaluate(pretrained[0], loaded, TINY_SPEC, episodes=2, seed=5,
                          split="val")
        assert agg.episodes == 2

    def test_default_spec_comes_from_checkpoint(self, loaded, pretrained):
        agg, _ = evaluate(pretrained[0], loaded, episodes=2, seed=6)
        assert agg.episodes == 2


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path, pretrained):
        path = pretrained[0].save(tmp_path / "ck.npz")
        again = Checkpoint.load(path)
        assert again.header == pretrained[0].header
        assert set(again.arrays) == set(pretrained[0].arrays)
        for key in again.arrays:
            np.testing.assert_array_equal(again.arrays[key], pretrained[0].arrays[key])

    def test_evaluate_identical_after_round_trip(self, tmp_path, loaded, pretrained):
        before, _ = evaluate(pretrained[0], loaded, TINY_SPEC, episodes=3, seed=8)
        path = pretrained[0].save(tmp_path / "ck.npz")
        after, _ = evaluate(Checkpoint.load(path), loaded, TINY_SPEC, episodes=3, seed=8)
        assert before.mean.values() == after.mean.values()

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ContractViolationError, match="no checkpoint"):
            Checkpoint.load(tmp_path / "absent.npz")

    def test_version_mismatch_rejected(self, tmp_path, pretrained):
        stale = Checkpoint(header={**pretrained[0].header, "version": 99},
                           arrays=pretrained[0].arrays)
        path = stale.save(tmp_path / "old.npz")
        with pytest.raises(ContractViolationError, match="version"):
            Checkpoint.load(path)

    def test_restore_model_rebuilds_attention(self, loaded, pretrained):
        config = mkcfg(stage="finetune", episodes=2, seed=12, attention_variant="lsa")
        ckpt, _ = finetune_stage(pretrained[0], loaded, config)
        model = restore_model(ckpt)
        assert model.attention is not None and model.attention.variant == "lsa"
        np.testing.assert_array_equal(model.attention.w_o.data,
                                      ckpt.arrays["attention/w_o"])


class TestLogDump:
    def test_writes_json_lines(self, tmp_path, pretrained):
        path = dump_log(pretrained[1], tmp_path / "log.jsonl")
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 6
        parsed = [json.loads(line) for line in lines]
        assert parsed[0]["episode"] == 0 and "grad_norm" in parsed[0]
