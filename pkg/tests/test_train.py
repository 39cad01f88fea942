import csv
import itertools

import numpy as np
import pytest

from mkpn.data import ProceduralCorpus, burst_stream, generate_testset
from mkpn.model import Checkpoint, ModelConfig, init_weights
from mkpn.tensor import NonFiniteError
from mkpn.train import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    crop_border,
    evaluate,
    train,
)


def tiny_train_config(**kw):
    defaults = dict(
        model=ModelConfig(n_frames=2, sizes=(3,), depth=2, widths=(4, 6)),
        steps=3, batch_size=2, patch_size=16, precision="float64",
        checkpoint_every=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_train_config(steps=-1)
        with pytest.raises(ValueError):
            tiny_train_config(batch_size=0)
        with pytest.raises(ValueError):
            tiny_train_config(lr=0.0)
        with pytest.raises(ValueError):
            tiny_train_config(patch_size=18)  # not divisible by 2^depth
        with pytest.raises(ValueError):
            tiny_train_config(precision="float16")


class TestAdamStep:
    def test_zero_gradient_no_motion(self):
        w = np.array([1.0, -2.0])
        state = {"t": 0, "m": [np.zeros(2)], "v": [np.zeros(2)]}
        adam_step([w], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(w, [1.0, -2.0])
        assert state["t"] == 1

    def test_quadratic_descent(self):
        w = np.array([1.0])
        state = {"t": 0, "m": [np.zeros(1)], "v": [np.zeros(1)]}
        traj = [w[0]]
        for _ in range(100):
            adam_step([w], [2.0 * w], state, lr=0.1)
            traj.append(w[0])
        # monotone decrease until the iterate nears the optimum, then a
        # damped oscillation that settles near zero
        prefix = list(itertools.takewhile(lambda t: t > 0.1, traj))
        assert len(prefix) >= 8
        assert all(a > b for a, b in zip(prefix, prefix[1:]))
        assert abs(traj[-1]) < 0.05
        assert max(abs(t) for t in traj[-20:]) < 0.1

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        grads = [rng.standard_normal((3, 3)) for _ in range(5)]

        def run():
            w = np.ones((3, 3))
            state = {"t": 0, "m": [np.zeros((3, 3))], "v": [np.zeros((3, 3))]}
            for g in grads:
                adam_step([w], [g], state, lr=0.01)
            return w

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_gradient_aborts_cleanly(self):
        w = np.array([1.0])
        state = {"t": 0, "m": [np.full(1, 0.5)], "v": [np.full(1, 0.25)]}
        with pytest.raises(NonFiniteError):
            adam_step([w], [np.array([np.nan])], state, lr=0.1)
        assert w[0] == 1.0 and state["t"] == 0
        assert state["m"][0][0] == 0.5 and state["v"][0][0] == 0.25


class TestAdamWrapper:
    def test_state_round_trip(self):
        ckpt = init_weights(ModelConfig(n_frames=2, sizes=(3,), depth=1, widths=(4,)), seed=0)
        opt = Adam(ckpt.parameters(), lr=1e-3)
        for p in ckpt.parameters():
            p.grad[...] = 0.01
        opt.step()
        names = ckpt.param_names()
        stored = opt.state_tensors(names)
        opt2 = Adam(ckpt.parameters(), lr=1e-3)
        opt2.load_state_tensors(names, stored)
        assert opt2.state["t"] == 1
        for a, b in zip(opt.state["m"], opt2.state["m"]):
            np.testing.assert_array_equal(a, b)


class TestTrain:
    def test_zero_steps_is_init(self):
        cfg = tiny_train_config(steps=0)
        ckpt, rows = train(cfg)
        ref = init_weights(cfg.model, cfg.seed, dtype=np.float64)
        assert rows == []
        for name in ckpt.param_names():
            np.testing.assert_array_equal(ckpt.params[name].data, ref.params[name].data)

    def test_deterministic_trajectory(self):
        cfg = tiny_train_config()
        a, _ = train(cfg)
        b, _ = train(cfg)
        for name in a.param_names():
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_loss_log_contents(self):
        cfg = tiny_train_config(steps=3)
        _, rows = train(cfg)
        assert [r["step"] for r in rows] == [0, 1, 2]
        assert rows[0]["anneal_weight"] == 100.0
        assert all(np.isfinite(r["total_loss"]) and np.isfinite(r["basic_loss"])
                   for r in rows)
        assert rows[0]["basic_loss"] < rows[0]["total_loss"]

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg5 = tiny_train_config(steps=5)
        straight, _ = train(cfg5)

        cfg3 = tiny_train_config(steps=3)
        train(cfg3, out_dir=tmp_path)
        resumed, _ = train(cfg5, resume_from=tmp_path / "checkpoint.mkpn")
        assert resumed.step == 5
        for name in straight.param_names():
            np.testing.assert_array_equal(resumed.params[name].data,
                                          straight.params[name].data)

    def test_resume_config_mismatch(self, tmp_path):
        train(tiny_train_config(), out_dir=tmp_path)
        other = tiny_train_config(model=ModelConfig(n_frames=2, sizes=(5,), depth=2, widths=(4, 6)))
        with pytest.raises(ValueError):
            train(other, resume_from=tmp_path / "checkpoint.mkpn")

    def test_checkpoint_and_log_files(self, tmp_path):
        cfg = tiny_train_config(steps=4, checkpoint_every=2)
        train(cfg, out_dir=tmp_path)
        assert (tmp_path / "checkpoint.mkpn").is_file()
        loaded, opt_state = Checkpoint.load(tmp_path / "checkpoint.mkpn")
        assert loaded.step == 4
        assert opt_state["t"][0] == 4
        with open(tmp_path / "loss_log.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert list(rows[0]) == ["step", "total_loss", "basic_loss", "anneal_weight"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_diagnostic(self):
        cfg = tiny_train_config(precision="float32")

        def bad_stream():
            corpus = ProceduralCorpus(seed=0)
            for s in burst_stream(corpus, 2, 0, patch_size=16):
                s.frames = s.frames + 1e25  # forces float32 overflow downstream
                yield s

        with pytest.raises(TrainingDiverged, match="step 0"):
            train(cfg, data=bad_stream())

    def test_descent_on_smoothed_loss(self):
        cfg = TrainConfig(
            model=ModelConfig(n_frames=2, sizes=(3,), depth=2, widths=(8, 16)),
            steps=200, batch_size=4, patch_size=32, precision="float32",
            checkpoint_every=0, seed=1,
        )
        _, rows = train(cfg)
        losses = [r["total_loss"] for r in rows]
        early = np.mean(losses[:10])
        late = np.mean(losses[-20:])
        assert late < early


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    generate_testset(root / "g4", gain=4, count=3, seed=5, n_frames=2,
                     patch_size=32)
    cfg = ModelConfig(n_frames=2, sizes=(1, 3), depth=2, widths=(4, 6))
    ckpt = init_weights(cfg, seed=2)
    return root, ckpt


class TestEvaluate:
    def test_report_structure(self, setup):
        root, ckpt = setup
        report = evaluate(ckpt, root / "g4", mode="fused")
        assert report.model_id == "mkpn-1-3"
        assert report.mode == "fused_path"
        assert report.gain == 4
        assert len(report.rows) == 3
        assert len(report.manifest_sha256) == 64
        assert report.mean_psnr == pytest.approx(np.mean([r["psnr"] for r in report.rows]))

    def test_mode_agreement(self, setup):
        root, ckpt = setup
        naive = evaluate(ckpt, root / "g4", mode="naive")
        fused = evaluate(ckpt, root / "g4", mode="fused")
        for a, b in zip(naive.rows, fused.rows):
            assert abs(a["psnr"] - b["psnr"]) < 1e-6
            assert abs(a["ssim"] - b["ssim"]) < 1e-9

    def test_unknown_mode(self, setup):
        root, ckpt = setup
        with pytest.raises(ValueError):
            evaluate(ckpt, root / "g4", mode="other")

    def test_burst_length_mismatch(self, setup, tmp_path):
        root, _ = setup
        cfg = ModelConfig(n_frames=3, sizes=(1, 3), depth=2, widths=(4, 6))
        with pytest.raises(ValueError):
            evaluate(init_weights(cfg, seed=0), root / "g4")

    def test_csv_and_summary(self, setup, tmp_path):
        root, ckpt = setup
        report = evaluate(ckpt, root / "g4")
        report.write_csv(tmp_path / "report.csv")
        with open(tmp_path / "report.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 3
        text = report.summary()
        assert "mkpn-1-3" in text and "Gain 4" in text and "reference" in text

    def test_crop_border(self):
        img = np.arange(36.0).reshape(6, 6)
        np.testing.assert_array_equal(crop_border(img, 0), img)
        np.testing.assert_array_equal(crop_border(img, 2), img[2:4, 2:4])
