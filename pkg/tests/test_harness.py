import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentflow.config import desk_config
from latentflow.errors import ConfigError, FormatError, TrainingError, UndefinedMetricError
from latentflow.harness.checkpoint import LoadReport, load_checkpoint, load_into, save_checkpoint, save_model
from latentflow.harness.dataset import read_dataset, write_dataset
from latentflow.harness.flo import read_flo, write_flo
from latentflow.harness.images import load_png, save_png
from latentflow.harness.losses import sequence_loss, sequence_weights
from latentflow.harness.metrics import aepe, endpoint_error, f1_all
from latentflow.harness.optim import Adam, OptimConfig
from latentflow.harness.runconfig import (apply_overrides, load_run_config, model_config, pretrain_config,
                                          train_config)
from latentflow.harness.synthetic import bilinear, make_flow, synth_dataset, synth_pair
from latentflow.harness.train import PretrainConfig, TrainConfig, TrainLog, evaluate, pretrain, train_supervised
from latentflow.mcva import ReconstructionHead, pretrained_state
from latentflow.model import FlowModel
from latentflow.ndtensor import Parameter, Tensor, backward


class TestSynthetic:
    def test_constant_translation(self):
        s = synth_pair(32, 32, np.random.default_rng(0), "constant", translation=(3, 4))
        assert np.all(s.flow[0] == 3) and np.all(s.flow[1] == 4)

    def test_zero_motion_bitwise_copy(self):
        s = synth_pair(32, 32, np.random.default_rng(0), "constant", translation=(0, 0))
        assert np.array_equal(s.image1, s.image2)

    @pytest.mark.parametrize("kind", ["constant", "affine", "smooth"])
    def test_warp_consistency(self, kind):
        s = synth_pair(64, 64, np.random.default_rng(1), kind, 6.0)
        ys, xs = np.mgrid[0:64, 0:64].astype(np.float64)
        back = bilinear(s.image2.astype(np.float64), xs + s.flow[0], ys + s.flow[1])
        interior = s.valid.copy()
        interior[:8], interior[-8:], interior[:, :8], interior[:, -8:] = False, False, False, False
        assert np.max(np.abs(back - s.image1)[:, interior]) < 2e-2

    @pytest.mark.parametrize("kind", ["affine", "smooth"])
    def test_peak_magnitude(self, kind):
        f = make_flow(48, 48, np.random.default_rng(2), kind, 8.0)
        assert np.sqrt((f ** 2).sum(0)).max() == pytest.approx(8.0)

    def test_valid_marks_in_frame_targets(self):
        s = synth_pair(32, 32, np.random.default_rng(0), "constant", translation=(5, -2))
        assert not s.valid[:, -5:].any() and not s.valid[:2].any() and s.valid[2:, :-5].all()

    def test_shapes_dtypes_range(self):
        s = synth_pair(24, 40, np.random.default_rng(3), "smooth")
        assert s.image1.shape == (3, 24, 40) and s.flow.shape == (2, 24, 40)
        assert s.image1.dtype == np.float32 and 0 <= s.image1.min() and s.image1.max() <= 1

    def test_texture_is_dense(self):
        s = synth_pair(64, 64, np.random.default_rng(4), "smooth")
        gy, gx = np.gradient(s.image1[0])
        assert np.mean(np.hypot(gx, gy) > 1e-3) > 0.9

    def test_dataset_order_independent(self):
        a = synth_dataset(3, 16, 16, seed=5)
        b = synth_dataset(2, 16, 16, seed=5)
        assert np.array_equal(a[1].image1, b[1].image1)

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            synth_pair(30, 32, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            make_flow(8, 8, np.random.default_rng(0), "spiral")

    def test_noise_mode(self):
        s = synth_pair(16, 16, np.random.default_rng(0), "constant", noise=0.05, translation=(0, 0))
        assert not np.array_equal(s.image1, s.image2)


class TestMetrics:
    def test_identity(self, rng):
        f = rng.standard_normal((2, 8, 8))
        assert aepe(f, f) == 0.0 and f1_all(f, f) == 0.0

    def test_345(self):
        gt = np.zeros((2, 5, 7))
        pred = gt.copy()
        pred[0] += 3
        pred[1] += 4
        assert aepe(pred, gt) == 5.0

    def test_aepe_loop_oracle(self, rng):
        p, g = rng.standard_normal((2, 9, 11)), rng.standard_normal((2, 9, 11))
        valid = rng.random((9, 11)) > 0.3
        errs = [np.hypot(p[0, y, x] - g[0, y, x], p[1, y, x] - g[1, y, x])
                for y in range(9) for x in range(11) if valid[y, x]]
        assert abs(aepe(p, g, valid) - sum(errs) / len(errs)) < 1e-6

    def test_f1_examples(self):
        gt, pred = np.zeros((2, 1, 2)), np.zeros((2, 1, 2))
        gt[0] = [10, 100]
        pred[0] = [14, 102]
        assert f1_all(pred, gt, combine_mode="or") == 50.0
        assert f1_all(pred, gt, combine_mode="and") == 50.0
        gt2, pred2 = np.zeros((2, 1, 1)), np.zeros((2, 1, 1))
        gt2[0], pred2[0] = 100, 102
        assert f1_all(pred2, gt2, combine_mode="or") == 0.0 and f1_all(pred2, gt2, combine_mode="and") == 0.0

    def test_or_and_differ(self):
        gt, pred = np.zeros((2, 1, 1)), np.zeros((2, 1, 1))
        gt[0], pred[0] = 1.0, 1.5   # error 0.5: below 3 px, above 5% of 1
        assert f1_all(pred, gt, combine_mode="or") == 100.0
        assert f1_all(pred, gt, combine_mode="and") == 0.0

    def test_half_outliers(self):
        gt = np.zeros((2, 2, 2))
        pred = gt.copy()
        pred[0, 0] = 10
        assert f1_all(pred, gt) == 50.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_f1_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.standard_normal((2, 6, 7)) * 20
        pred = gt + rng.standard_normal((2, 6, 7)) * 3
        valid = rng.random((6, 7)) > 0.2
        if not valid.any():
            return
        for mode in ("or", "and"):
            bad = 0
            for y in range(6):
                for x in range(7):
                    if not valid[y, x]:
                        continue
                    e = float(np.hypot(*(pred[:, y, x] - gt[:, y, x])))
                    m = float(np.hypot(*gt[:, y, x]))
                    a, r = e > 3, e > 0.05 * m
                    bad += (a or r) if mode == "or" else (a and r)
            assert f1_all(pred, gt, valid, mode) == pytest.approx(100 * bad / valid.sum(), abs=1e-9)

    def test_empty_valid(self):
        z = np.zeros((2, 3, 3))
        with pytest.raises(UndefinedMetricError):
            aepe(z, z, np.zeros((3, 3), bool))
        with pytest.raises(UndefinedMetricError):
            f1_all(z, z, np.zeros((3, 3), bool))

    def test_bad_mode_and_shape(self):
        with pytest.raises(ValueError):
            f1_all(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), combine_mode="xor")
        with pytest.raises(ValueError):
            aepe(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_endpoint_error(self):
        assert endpoint_error(np.array([[[3.0]], [[4.0]]]), np.zeros((2, 1, 1)))[0, 0] == 5.0


class TestSequenceLoss:
    def test_weights(self):
        assert np.allclose(sequence_weights(4, 0.8), [0.512, 0.64, 0.8, 1.0], rtol=0, atol=1e-15)

    def test_single_is_masked_l1(self, rng):
        p, g = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
        v = rng.random((4, 4)) > 0.5
        expect = np.abs(p - g).sum(0)[v].mean()
        assert sequence_loss([Tensor(p, dtype=np.float64)], g, v).item() == pytest.approx(expect, rel=1e-12)

    def test_weighted_sum(self, rng):
        g = rng.standard_normal((2, 3, 3))
        preds = [rng.standard_normal((2, 3, 3)) for _ in range(4)]
        expect = sum(w * np.abs(p - g).sum(0).mean() for w, p in zip(sequence_weights(4), preds))
        got = sequence_loss([Tensor(p, dtype=np.float64) for p in preds], g).item()
        assert got == pytest.approx(expect, rel=1e-12)

    def test_perfect(self, rng):
        g = rng.standard_normal((2, 3, 3)).astype(np.float32)
        assert sequence_loss([Tensor(g)] * 3, g).item() == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            sequence_loss([], np.zeros((2, 2, 2)))


class TestOptim:
    def test_frozen_and_gradless_params_untouched(self):
        a, b, c = Parameter(np.ones(3)), Parameter(np.ones(3)), Parameter(np.ones(3))
        c.requires_grad = False
        opt = Adam([a, b, c], OptimConfig(lr=0.1, warmup=0))
        backward((a * 2.0).sum())
        opt.step()
        assert np.all(a.data < 1) and np.array_equal(b.data, np.ones(3)) and np.array_equal(c.data, np.ones(3))

    def test_warmup(self):
        opt = Adam([Parameter(np.ones(1))], OptimConfig(lr=1.0, warmup=4))
        assert opt.current_lr() == 0.25

    def test_clipping(self):
        a = Parameter(np.zeros(2))
        opt = Adam([a], OptimConfig(lr=1.0, warmup=0, clip=1.0))
        a.grad = np.array([30.0, 40.0], dtype=np.float32)
        opt.step()
        assert opt.last_grad_norm == pytest.approx(50.0)
        assert np.allclose(a.data, [-1.0, -1.0], atol=1e-4)

    def test_adam_first_step_is_lr_sign(self):
        a = Parameter(np.array([0.0, 0.0]))
        opt = Adam([a], OptimConfig(lr=0.01, warmup=0, clip=0))
        a.grad = np.array([1e-3, -5.0], dtype=np.float32)
        opt.step()
        assert np.allclose(a.data, [-0.01, 0.01], atol=1e-6)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            OptimConfig(lr=0)


class TestFlo:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        f = rng.standard_normal((2, 7, 5)).astype(np.float32)
        write_flo(tmp_path / "a.flo", f)
        assert np.array_equal(read_flo(tmp_path / "a.flo"), f)

    def test_2x1_is_28_bytes(self, tmp_path):
        f = np.array([[[1.0, 3.0]], [[2.0, 4.0]]], dtype=np.float32)   # [(1,2), (3,4)]
        write_flo(tmp_path / "b.flo", f)
        raw = (tmp_path / "b.flo").read_bytes()
        assert len(raw) == 28
        assert raw[:4] == b"PIEH"
        assert struct.unpack("<ii", raw[4:12]) == (2, 1)
        assert struct.unpack("<4f", raw[12:]) == (1.0, 2.0, 3.0, 4.0)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "c.flo"
        p.write_bytes(struct.pack("<fii", 0.0, 1, 1) + b"\0" * 8)
        with pytest.raises(FormatError, match="byte offset 0"):
            read_flo(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "d.flo"
        write_flo(p, np.zeros((2, 3, 3), np.float32))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError, match="byte offset 80"):
            read_flo(p)
        p.write_bytes(b"PIEH")
        with pytest.raises(FormatError):
            read_flo(p)

    def test_bad_shape(self, tmp_path):
        with pytest.raises(FormatError):
            write_flo(tmp_path / "e.flo", np.zeros((3, 2, 2)))


class TestCheckpoint:
    def test_model_roundtrip_bitwise(self, tmp_path):
        m = FlowModel(desk_config(seed=3))
        save_model(tmp_path / "m.ckpt", m)
        ck = load_checkpoint(tmp_path / "m.ckpt")
        m2 = FlowModel(desk_config(seed=4))
        rep = load_into(m2, ck)
        assert rep.missing == [] and rep.unexpected == []
        for (k, a), (_, b) in zip(m.named_parameters(), m2.named_parameters()):
            assert np.array_equal(a.data, b.data), k
        assert ck.config == m.cfg.to_dict()

    def test_pretrained_loads_with_only_head_unmatched(self, tmp_path):
        m = FlowModel(desk_config())
        head = ReconstructionHead(32, np.random.default_rng(0))
        save_checkpoint(tmp_path / "p.ckpt", pretrained_state(m, head), m.cfg.to_dict(), kind="pretrain")
        ck = load_checkpoint(tmp_path / "p.ckpt")
        rep = load_into(FlowModel(desk_config(seed=9)), ck)
        assert ck.kind == "pretrain" and rep.missing == []
        assert rep.unmatched_layers == ["head.mlp.layers.0", "head.mlp.layers.1", "head.mlp.layers.2"]

    def test_manifest_layout(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {"a": np.arange(3, dtype=np.float32)}, {"k": 1})
        raw = (tmp_path / "x.ckpt").read_bytes()
        magic, version, mlen = struct.unpack_from("<4sIQ", raw)
        assert magic == b"LFCK" and version == 1
        import json
        man = json.loads(raw[16:16 + mlen])
        assert man["tensors"][0] == {"name": "a", "shape": [3], "dtype": "<f4", "offset": 0, "nbytes": 12}
        assert np.frombuffer(raw[16 + mlen:], "<f4").tolist() == [0.0, 1.0, 2.0]

    def test_corrupted_magic(self, tmp_path):
        p = tmp_path / "y.ckpt"
        save_checkpoint(p, {"a": np.zeros(2)})
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "z.ckpt"
        save_checkpoint(p, {"a": np.zeros(8)})
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError, match="byte offset"):
            load_checkpoint(p)

    def test_report(self):
        assert LoadReport([], ["head.x.weight", "head.x.bias"]).unmatched_layers == ["head.x"]


class TestImagesAndDataset:
    def test_png_roundtrip_quantized(self, tmp_path, rng):
        img = rng.random((3, 8, 16)).astype(np.float32)
        save_png(tmp_path / "i.png", img)
        back = load_png(tmp_path / "i.png")
        assert back.shape == img.shape and np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-6

    def test_dataset_roundtrip(self, tmp_path):
        samples = synth_dataset(2, 16, 16, seed=1, motion_kind="constant")
        write_dataset(tmp_path, samples)
        back = read_dataset(tmp_path)
        assert len(back) == 2
        assert np.array_equal(back[1].flow, samples[1].flow)
        assert np.array_equal(back[1].valid, samples[1].valid)


class TestRunConfig:
    def test_defaults_and_overrides(self):
        cfg = load_run_config(None, ["model.num_iters=2", "optim.lr=0.001", "data.size=[32,32]"], seed=7)
        assert cfg["seed"] == 7
        mc = model_config(cfg)
        assert mc.num_iters == 2 and mc.seed == 7
        assert train_config(cfg).optim.lr == 0.001
        assert cfg["data"]["size"] == [32, 32]

    def test_file_merge(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"train": {"steps": 5}, "mcva": {"ratio": 0.25, "block_range": [2, 3]}}')
        cfg = load_run_config(str(p))
        assert cfg["train"]["steps"] == 5 and cfg["train"]["gamma"] == 0.8
        pc = pretrain_config(cfg)
        assert pc.mcva.ratio == 0.25 and pc.mcva.block_range == (2, 3)

    def test_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "missing.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        with pytest.raises(ConfigError):
            load_run_config(str(bad))
        with pytest.raises(ConfigError):
            load_run_config(None, ["bogus.key=1"])
        with pytest.raises(ConfigError):
            apply_overrides({}, ["novalue"])
        with pytest.raises(ConfigError):
            model_config(load_run_config(None, ["model.not_a_field=3"]))
        with pytest.raises(ConfigError):
            model_config(load_run_config(None, ["preset=\"huge\""]))

    def test_full_preset(self):
        mc = model_config(load_run_config(None, ['preset="full"']))
        assert (mc.feature_dim, mc.patch_dim, mc.num_tokens, mc.token_dim, mc.num_agt_layers) == (256, 64, 8, 128, 3)


class TestTraining:
    def test_deterministic_replay(self):
        data = synth_dataset(2, 32, 32, seed=0)
        logs = []
        for _ in range(2):
            m = FlowModel(desk_config(num_iters=2))
            logs.append(train_supervised(m, data, TrainConfig(steps=3)).to_csv())
        assert logs[0] == logs[1]
        assert logs[0].splitlines()[0] == "step,loss,aepe,f1_all"

    def test_loss_finite_and_logged(self):
        m = FlowModel(desk_config(num_iters=2))
        log = train_supervised(m, synth_dataset(1, 32, 32, seed=1), TrainConfig(steps=3))
        assert len(log.rows) == 3 and np.all(np.isfinite(log.column("loss")))

    def test_nan_loss_aborts_with_step(self):
        m = FlowModel(desk_config(num_iters=1))
        s = synth_dataset(1, 32, 32, seed=1)[0]
        calls = {"n": 0}

        def source(step):
            calls["n"] += 1
            if step == 2:
                bad = np.array(s.flow)
                bad[0, 0, 0] = np.nan
                return type(s)(s.image1, s.image2, bad, s.valid)
            return s

        with pytest.raises(TrainingError, match="step 2"):
            train_supervised(m, source, TrainConfig(steps=5))

    def test_callback_stops(self):
        m = FlowModel(desk_config(num_iters=1))
        log = train_supervised(m, synth_dataset(1, 32, 32, seed=1), TrainConfig(steps=10),
                               callback=lambda step, row: step >= 1)
        assert len(log.rows) == 2

    def test_evaluate(self):
        m = FlowModel(desk_config(num_iters=1))
        res = evaluate(m, synth_dataset(2, 32, 32, seed=2))
        assert set(res) == {"aepe", "f1_all"} and np.isfinite(res["aepe"])

    def test_pretrain_loop_freezes_encoders(self):
        m = FlowModel(desk_config(freeze_image_encoder=True))
        before = m.state_dict()
        log, head = pretrain(m, synth_dataset(2, 32, 32, seed=3), PretrainConfig(steps=3))
        after = m.state_dict()
        assert len(log.rows) == 3 and np.all(np.isfinite(log.column("loss")))
        assert all(np.array_equal(before[k], after[k]) for k in before if "_encoder." in k and "cost" not in k)
        assert isinstance(head, ReconstructionHead)

    def test_pretrain_refuses_unfrozen_encoder(self):
        with pytest.raises(ConfigError):
            pretrain(FlowModel(desk_config()), synth_dataset(1, 32, 32, seed=3), PretrainConfig(steps=1))

    def test_csv_repr_floats(self):
        log = TrainLog()
        log.append(0, 0.1 + 0.2, 1.0, 0.0)
        assert log.to_csv().splitlines()[1] == "0,0.30000000000000004,1.0,0.0"
