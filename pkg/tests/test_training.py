import dataclasses

import numpy as np
import pytest

from pvvlm.dataio import DatasetSplit
from pvvlm.fusion import build_model, forward
from pvvlm.numerics import Tensor, grad_check
from pvvlm.training import (
    AdamState,
    Checkpoint,
    CheckpointError,
    EarlyStopper,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    clip_global_norm,
    load_checkpoint,
    lr_at_epoch,
    mse_loss,
    run_early_stopping,
    save_checkpoint,
    train,
)
from conftest import tiny_dims


class TestMseLoss:
    def test_identity_zero(self):
        pred = Tensor(np.array([1.0, 2.0], dtype=np.float32))
        assert mse_loss(pred, np.array([1.0, 2.0])).item() == 0.0

    def test_arithmetic(self):
        pred = Tensor(np.array([1.0, 1.0], dtype=np.float32))
        assert mse_loss(pred, np.array([0.0, 0.0])).item() == pytest.approx(1.0)

    def test_gradient_formula(self):
        target = np.array([1.0, 3.0, 2.0], dtype=np.float32)
        probe = Tensor(np.array([2.0, 1.0, 2.0], dtype=np.float32), requires_grad=True)
        mse_loss(probe, target).backward()
        np.testing.assert_allclose(probe.grad, 2 * (probe.data - target) / 3, rtol=1e-6)
        report = grad_check(lambda t: mse_loss(t, target), Tensor(probe.data.copy()),
                            eps=1e-4, op_name="mse")
        assert report.passed and report.max_rel_error < 1e-5

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            mse_loss(Tensor(np.zeros(3, dtype=np.float32)), np.zeros(4))


class TestLrSchedule:
    CFG = TrainConfig(seed=0)

    def test_table_values(self):
        assert lr_at_epoch(0, self.CFG) == pytest.approx(0.001)
        assert lr_at_epoch(3, self.CFG) == pytest.approx(0.0001)
        assert lr_at_epoch(7, self.CFG) == pytest.approx(0.00001)

    def test_non_increasing_piecewise_constant(self):
        values = [lr_at_epoch(t, self.CFG) for t in range(20)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        for start in range(0, 18, 3):
            block = values[start : start + 3]
            assert len(set(block)) == 1

    def test_negative_epoch(self):
        with pytest.raises(ValueError, match=">= 0"):
            lr_at_epoch(-1, self.CFG)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        w = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        params = {"w": w}
        before = w.data.copy()
        adam_step(params, {"w": np.zeros(2, dtype=np.float32)}, AdamState(), lr=0.1)
        assert np.array_equal(w.data, before)

    def test_first_step_identity(self):
        w = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        adam_step({"w": w}, {"w": np.array([1.0], dtype=np.float32)}, AdamState(), lr=0.1)
        assert w.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_name_mismatch(self):
        w = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="mismatch"):
            adam_step({"w": w}, {"v": np.zeros(1, dtype=np.float32)}, AdamState(), lr=0.1)

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0], dtype=np.float32), "b": np.array([4.0], dtype=np.float32)}
        norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        clipped = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
        assert clipped == pytest.approx(1.0, rel=1e-6)

    def test_clip_handles_aliased_buffers(self):
        shared = np.array([3.0, 4.0], dtype=np.float32)
        grads = {"a": shared, "b": shared}
        clip_global_norm(grads, 1.0)
        total = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
        assert total == pytest.approx(1.0, rel=1e-6)


class TestEarlyStopping:
    def test_injected_sequence(self):
        losses = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95]
        last, best = run_early_stopping(losses, patience=5)
        assert last == 6 and best == 1

    def test_strictly_decreasing_never_stops(self):
        losses = [1.0 / (t + 1) for t in range(50)]
        last, best = run_early_stopping(losses, patience=5)
        assert last == 49 and best == 49

    def test_equal_loss_is_not_improvement(self):
        last, best = run_early_stopping([1.0, 1.0, 1.0], patience=2)
        assert last == 2 and best == 0

    def test_stopper_counts_consecutive(self):
        stopper = EarlyStopper(patience=2)
        stopper.update(0, 1.0)
        stopper.update(1, 2.0)
        stopper.update(2, 0.5)  # improvement resets the counter
        assert not stopper.should_stop
        stopper.update(3, 0.6)
        stopper.update(4, 0.7)
        assert stopper.should_stop


def small_split(samples):
    n = len(samples)
    return DatasetSplit(train=samples[: n - 6], val=samples[n - 6 : n - 3], test=samples[n - 3 :])


@pytest.fixture(scope="module")
def trained(tiny_samples):
    model = build_model(tiny_dims(), seed=3)
    cfg = TrainConfig(batch_size=8, max_epochs=2, patience=2, seed=3)
    split = small_split(tiny_samples[:30])
    ckpt, history = train(split, model, cfg)
    return model, ckpt, history, split


class TestTrainLoop:
    def test_history_and_best(self, trained):
        _, ckpt, history, _ = trained
        assert len(history) == 2
        assert ckpt.best_val_loss == pytest.approx(min(h["val_mse"] for h in history))
        assert ckpt.epoch == int(np.argmin([h["val_mse"] for h in history]))

    def test_deterministic_checkpoints(self, tiny_samples, tmp_path):
        split = small_split(tiny_samples[:25])
        blobs = []
        for run in range(2):
            model = build_model(tiny_dims(), seed=7)
            cfg = TrainConfig(batch_size=8, max_epochs=2, patience=2, seed=7)
            ckpt, _ = train(split, model, cfg)
            path = tmp_path / f"run{run}.pvvlm"
            save_checkpoint(ckpt, path)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_soft_prompt_learns_and_frozen_stays(self, tiny_samples):
        model = build_model(tiny_dims(), seed=1)
        soft_before = model.trainable["pam.soft"].data.copy()
        frozen_before = {n: t.data.copy() for n, t in model.frozen.items()}
        cfg = TrainConfig(batch_size=8, max_epochs=1, patience=1, seed=1)
        train(small_split(tiny_samples[:20]), model, cfg)
        assert not np.array_equal(soft_before, model.trainable["pam.soft"].data)
        for name, before in frozen_before.items():
            assert np.array_equal(before, model.frozen[name].data), name

    def test_divergence_aborts_with_context(self, tiny_samples):
        model = build_model(tiny_dims(), seed=2)
        model.trainable["out.b"].data[:] = np.nan
        cfg = TrainConfig(batch_size=8, max_epochs=1, patience=1, seed=2)
        with pytest.raises(TrainingDiverged, match="epoch 0"):
            train(small_split(tiny_samples[:20]), model, cfg)

    def test_empty_split_rejected(self, tiny_samples):
        model = build_model(tiny_dims(), seed=0)
        with pytest.raises(ValueError, match="nonempty"):
            train(DatasetSplit(train=[], val=[], test=[]), model, TrainConfig(seed=0))


class TestCheckpointFormat:
    def test_roundtrip_bit_exact(self, trained, tmp_path):
        model, ckpt, _, split = trained
        path = tmp_path / "ckpt.pvvlm"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.seed == ckpt.seed and loaded.epoch == ckpt.epoch
        assert loaded.best_val_loss == ckpt.best_val_loss
        assert set(loaded.tensors) == set(ckpt.tensors)
        for name, arr in ckpt.tensors.items():
            assert np.array_equal(arr, loaded.tensors[name]), name
        probe = split.test[0]
        np.testing.assert_array_equal(forward(probe, model), forward(probe, loaded.to_model()))

    def test_bad_magic(self, trained, tmp_path):
        _, ckpt, _, _ = trained
        path = tmp_path / "ckpt.pvvlm"
        save_checkpoint(ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, trained, tmp_path):
        _, ckpt, _, _ = trained
        path = tmp_path / "ckpt.pvvlm"
        save_checkpoint(ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[6] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_tensor(self, trained, tmp_path):
        _, ckpt, _, _ = trained
        path = tmp_path / "ckpt.pvvlm"
        save_checkpoint(ckpt, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_manifest_mismatch_names_field(self, trained, tmp_path):
        _, ckpt, _, _ = trained
        path = tmp_path / "ckpt.pvvlm"
        save_checkpoint(ckpt, path)
        other = dataclasses.replace(ckpt.dims, horizon_steps=30)
        with pytest.raises(CheckpointError, match="manifest mismatch on 'horizon_steps'"):
            load_checkpoint(path, expect_dims=other)

    def test_checkpoint_name_set_guard(self, trained, tmp_path):
        _, ckpt, _, _ = trained
        broken = Checkpoint(dims=ckpt.dims, seed=ckpt.seed, epoch=ckpt.epoch,
                            best_val_loss=ckpt.best_val_loss,
                            tensors={k: v for k, v in list(ckpt.tensors.items())[:-1]})
        with pytest.raises(ValueError, match="name set"):
            broken.to_model()


def test_train_config_validation():
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="patience"):
        TrainConfig(patience=10, max_epochs=5)
