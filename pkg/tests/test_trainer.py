import json
import os

import numpy as np
import pytest

from mmga.data import Dataset, PKBatchSpec, synth_generate
from mmga.losses import LossWeights
from mmga.network import Model, load_checkpoint, toy_config
from mmga.tensor import Tensor
from mmga.trainer import (
    OptimConfig,
    TrainerError,
    lr_at,
    sgd_step,
    train,
)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_corpus")
    manifest = synth_generate(num_ids=4, per_id=5, out_dir=str(out), seed=5)
    return Dataset(manifest)


class TestSchedule:
    def test_initial_rates(self):
        cfg = OptimConfig()
        assert lr_at(0, cfg, "backbone") == 0.05
        assert lr_at(0, cfg, "other") == 0.1

    def test_one_decay(self):
        assert lr_at(90, OptimConfig(), "other") == 0.05

    def test_two_decays(self):
        assert lr_at(180, OptimConfig(), "backbone") == pytest.approx(0.0125)

    def test_piecewise_constant_non_increasing(self):
        cfg = OptimConfig(decay_every=3, total_epochs=12)
        rates = [lr_at(e, cfg, "other") for e in range(12)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert rates[0] == rates[2] and rates[2] > rates[3]

    def test_unknown_group(self):
        with pytest.raises(ValueError, match="group"):
            lr_at(0, OptimConfig(), "heads")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimConfig(base_lr_backbone=0.0)
        with pytest.raises(ValueError):
            OptimConfig(decay_every=0)


class TestSgdStep:
    def test_plain_gradient_step(self):
        w = Tensor(np.array(0.0), requires_grad=True)
        w.grad = np.array(1.0)
        sgd_step([w], rate=0.1, weight_decay=0.0)
        assert float(w.data) == pytest.approx(-0.1)
        assert w.grad is None

    def test_pure_decay(self):
        w = Tensor(np.array(1.0), requires_grad=True)
        w.grad = np.array(0.0)
        sgd_step([w], rate=0.1, weight_decay=5e-4)
        assert float(w.data) == pytest.approx(0.99995)

    def test_missing_gradient(self):
        w = Tensor(np.array(1.0), requires_grad=True)
        with pytest.raises(TrainerError, match="no gradient"):
            sgd_step([w], rate=0.1, weight_decay=0.0)

    def test_accumulated_gradients_sum(self):
        import mmga.tensor as T

        w = Tensor(np.array(2.0), requires_grad=True)
        T.mul(w, Tensor(np.array(3.0))).backward()
        T.mul(w, Tensor(np.array(4.0))).backward()
        assert float(w.grad) == pytest.approx(7.0)
        sgd_step([w], rate=0.5, weight_decay=0.0)
        assert float(w.data) == pytest.approx(2.0 - 0.5 * 7.0)

    def test_preserves_dtype(self):
        w = Tensor(np.ones((3,), dtype=np.float32), requires_grad=True)
        w.grad = np.ones(3, dtype=np.float32)
        sgd_step([w], rate=0.01, weight_decay=5e-4)
        assert w.data.dtype == np.float32

    def test_decreases_convex_quadratic(self):
        # loss = (a-3)^2 + (b+1)^2 must drop after one small step
        import mmga.tensor as T

        a = Tensor(np.array(0.0), requires_grad=True)
        b = Tensor(np.array(0.0), requires_grad=True)

        def loss():
            da = T.sub(a, Tensor(np.array(3.0)))
            db = T.add(b, Tensor(np.array(1.0)))
            return T.add(T.mul(da, da), T.mul(db, db))

        before = float(loss().data)
        out = loss()
        out.backward()
        sgd_step([a, b], rate=0.1, weight_decay=0.0)
        assert float(loss().data) < before


def run_short_training(dataset, tmp_path, name, epochs=1, seed=9, variant="mmga"):
    model = Model(toy_config(variant=variant, num_identities=dataset.num_train_identities), seed=1)
    optim = OptimConfig(
        base_lr_backbone=0.01,
        base_lr_other=0.02,
        decay_every=90,
        total_epochs=epochs,
    )
    out = tmp_path / name
    records = train(
        model,
        dataset,
        LossWeights(),
        optim,
        seed=seed,
        batch_spec=PKBatchSpec(p=4, k=2),
        out_dir=str(out),
    )
    return model, records, out


class TestTrainingLoop:
    def test_zero_epochs_initial_checkpoint_only(self, tiny_dataset, tmp_path):
        _, records, out = run_short_training(tiny_dataset, tmp_path, "zero", epochs=0)
        assert records == []
        assert os.listdir(out / "checkpoints") == ["final"]
        model, epoch = load_checkpoint(out / "checkpoints" / "final")
        assert epoch == 0
        fresh = Model(model.config, seed=model.seed)
        for (_, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_log_has_every_component_and_rates(self, tiny_dataset, tmp_path):
        _, records, out = run_short_training(tiny_dataset, tmp_path, "one")
        assert len(records) == 1  # 4 ids / P=4 -> one step per epoch
        rec = records[0]
        for key in (
            "epoch",
            "step",
            "l1w",
            "l2w",
            "l2u",
            "l2b",
            "softmax_w",
            "softmax_l",
            "triplet",
            "attention",
            "total",
            "lr_backbone",
            "lr_other",
        ):
            assert key in rec
        assert rec["lr_backbone"] == 0.01 and rec["lr_other"] == 0.02
        lines = (out / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(line) for line in lines] == records

    def test_two_epoch_repeat_runs_bit_identical(self, tiny_dataset, tmp_path):
        _, _, out_a = run_short_training(tiny_dataset, tmp_path, "a", epochs=2)
        _, _, out_b = run_short_training(tiny_dataset, tmp_path, "b", epochs=2)
        log_a = (out_a / "train_log.jsonl").read_bytes()
        log_b = (out_b / "train_log.jsonl").read_bytes()
        assert log_a == log_b
        ckpt_a = out_a / "checkpoints" / "final"
        ckpt_b = out_b / "checkpoints" / "final"
        for name in sorted(os.listdir(ckpt_a)):
            assert (ckpt_a / name).read_bytes() == (ckpt_b / name).read_bytes()

    def test_training_updates_parameters(self, tiny_dataset, tmp_path):
        model, _, _ = run_short_training(tiny_dataset, tmp_path, "upd")
        fresh = Model(model.config, seed=model.seed)
        unchanged = []
        for (name, a), (_, b) in zip(
            model.named_parameters(), fresh.named_parameters()
        ):
            if np.array_equal(a.data, b.data):
                unchanged.append((name, b))
        # after one step the only tensors allowed to sit still are zero biases
        # upstream of the zero-initialized final attention layers: no gradient
        # passes a zero layer, and weight decay on zero is zero
        for name, b in unchanged:
            assert name.endswith("_b") and not b.data.any(), name
        total = sum(1 for _ in model.named_parameters())
        assert total - len(unchanged) >= total - 12

    def test_baseline_variant_trains_without_masks(self, tiny_dataset, tmp_path):
        _, records, _ = run_short_training(
            tiny_dataset, tmp_path, "base", variant="baseline"
        )
        rec = records[0]
        assert rec["attention"] == 0.0 and rec["l1w"] == 0.0
        assert rec["softmax_l"] == 0.0
        assert rec["total"] > 0

    def test_periodic_checkpoints(self, tiny_dataset, tmp_path):
        model = Model(toy_config(variant="wmga", num_identities=4), seed=2)
        optim = OptimConfig(
            base_lr_backbone=0.01, base_lr_other=0.02, total_epochs=2
        )
        out = tmp_path / "cadence"
        train(
            model,
            tiny_dataset,
            LossWeights(),
            optim,
            seed=3,
            batch_spec=PKBatchSpec(p=4, k=2),
            out_dir=str(out),
            checkpoint_every=1,
        )
        names = sorted(os.listdir(out / "checkpoints"))
        assert names == ["epoch_0001", "epoch_0002", "final"]

    def test_divergence_guard(self, tiny_dataset, tmp_path):
        model = Model(toy_config(variant="baseline", num_identities=4), seed=2)
        # poison a classifier weight so logits go non-finite immediately
        model.classifier_w.w.data[0, 0] = np.inf
        optim = OptimConfig(total_epochs=1)
        with pytest.raises(TrainerError, match="non-finite"), np.errstate(
            invalid="ignore"
        ):
            train(
                model,
                tiny_dataset,
                LossWeights(),
                optim,
                seed=0,
                batch_spec=PKBatchSpec(p=4, k=2),
            )
