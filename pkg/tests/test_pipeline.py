"""Tests for the composite forward pass and the training loops."""

import csv

import numpy as np
import pytest

from revmux import tensor as T
from revmux.adapters import RevMuxAdapters
from revmux.backbone import ConfigError, EncoderConfig, EncoderModel
from revmux.data import ArrayDataset, synth_task, task_vocab, tokenize_dataset
from revmux.objectives import combined_loss
from revmux.pipeline import (
    CompositeBatch,
    PretrainConfig,
    TrainConfig,
    TrainingDiverged,
    build_composite_batch,
    batch_accuracy,
    form_groups,
    plain_accuracy,
    quick_eval,
    revmux_forward,
    teacher_forward,
    train_adapters,
    train_backbone,
    write_log,
)
from revmux.tensor import Tensor

from conftest import check_grads

TINY = EncoderConfig(
    vocab_size=16, d_model=8, n_heads=2, n_layers=2, ffn_dim=12,
    max_seq_len=4, n_classes=2, dropout_rate=0.0,
)


def random_batch(rng, cfg, n, groups, l):
    tokens = rng.integers(0, cfg.vocab_size, size=(n, groups, cfg.max_seq_len)).astype(np.int32)
    masks = np.ones((n, groups, cfg.max_seq_len), dtype=np.float32)
    for k in range(n):
        for g in range(groups):
            keep = int(rng.integers(2, cfg.max_seq_len + 1))
            masks[k, g, keep:] = 0.0
    labels = rng.integers(0, cfg.n_classes, size=(n, groups))
    indices = np.arange(n * groups).reshape(n, groups)
    return CompositeBatch(tokens, masks, labels, indices, prefill_layers=l)


def keyword_dataset(n_train, n_eval, seed=0, max_len=16):
    train_ex, eval_ex = synth_task("keyword", n_train, n_eval, seed)
    vocab = task_vocab("keyword")
    return tokenize_dataset(train_ex, vocab, max_len), tokenize_dataset(eval_ex, vocab, max_len)


class TestGroupFormation:
    def test_deterministic_and_disjoint(self):
        a = form_groups(20, 4, np.random.default_rng(3))
        b = form_groups(20, 4, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (5, 4)
        assert sorted(a.ravel().tolist()) == list(range(20))

    def test_remainder_dropped(self):
        rows = form_groups(23, 4, np.random.default_rng(0))
        assert rows.shape == (5, 4)
        assert len(set(rows.ravel().tolist())) == 20

    def test_too_few_examples(self):
        with pytest.raises(ConfigError):
            form_groups(3, 4, np.random.default_rng(0))

    def test_build_composite_batch_layout(self):
        data = ArrayDataset(
            tokens=np.arange(12, dtype=np.int32).reshape(6, 2),
            masks=np.ones((6, 2), dtype=np.float32),
            labels=np.arange(6, dtype=np.int64),
            )
        rows = np.array([[0, 3], [1, 4]])
        batch = build_composite_batch(data, rows, prefill_layers=1)
        assert batch.n == 2 and batch.groups == 2
        np.testing.assert_array_equal(batch.tokens[0], data.tokens[[0, 1]])
        np.testing.assert_array_equal(batch.tokens[1], data.tokens[[3, 4]])
        np.testing.assert_array_equal(batch.labels[1], [3, 4])
        np.testing.assert_array_equal(batch.indices[1], [3, 4])


class TestRevmuxForward:
    def test_single_slot_reproduces_plain_inference_bit_exactly(self):
        rng = np.random.default_rng(0)
        model = EncoderModel(EncoderConfig(), seed=1)
        batch = random_batch(rng, model.cfg, n=1, groups=5, l=2)
        logits, pooled = revmux_forward(batch, model, None)
        h = model.forward_full(batch.tokens[0], batch.masks[0])
        expect_pooled = model.pool(h, batch.masks[0])
        expect_logits = model.classify(expect_pooled)
        np.testing.assert_array_equal(logits[0].data, expect_logits.data)
        np.testing.assert_array_equal(pooled[0].data, expect_pooled.data)

    def test_zero_coupling_full_prefill_matches_manual_composition(self):
        # At l = L the shared stage is the final layernorm only, so the whole
        # pipeline can be rebuilt from backbone and projection calls directly.
        rng = np.random.default_rng(1)
        model = EncoderModel(EncoderConfig(), seed=2)
        adapters = RevMuxAdapters(64, 2, seed=3)
        l = model.cfg.n_layers
        batch = random_batch(rng, model.cfg, n=2, groups=3, l=l)
        logits, pooled = revmux_forward(batch, model, adapters)

        down = [
            adapters.down_project(model.forward_prefix(batch.tokens[k], batch.masks[k], l)).data
            for k in range(2)
        ]
        mixed = model.final_ln(Tensor(np.concatenate(down, axis=-1))).data
        for k in range(2):
            slot = Tensor(mixed[..., k * 32 : (k + 1) * 32])
            expect = model.pool(adapters.up_project(slot), batch.masks[k])
            np.testing.assert_allclose(pooled[k].data, expect.data, atol=1e-6)
            np.testing.assert_allclose(logits[k].data, model.classify(expect).data, atol=1e-6)

    def test_zero_coupling_slot_swap_swaps_outputs(self):
        rng = np.random.default_rng(2)
        model = EncoderModel(EncoderConfig(), seed=4)
        adapters = RevMuxAdapters(64, 2, seed=5)
        l = model.cfg.n_layers
        batch = random_batch(rng, model.cfg, n=2, groups=3, l=l)
        swapped = CompositeBatch(
            tokens=batch.tokens[::-1].copy(),
            masks=batch.masks[::-1].copy(),
            labels=batch.labels[::-1].copy(),
            indices=batch.indices[::-1].copy(),
            prefill_layers=l,
        )
        logits, _ = revmux_forward(batch, model, adapters)
        logits_sw, _ = revmux_forward(swapped, model, adapters)
        np.testing.assert_allclose(logits[0].data, logits_sw[1].data, atol=1e-6)
        np.testing.assert_allclose(logits[1].data, logits_sw[0].data, atol=1e-6)

    def test_slot_count_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        model = EncoderModel(EncoderConfig(), seed=0)
        adapters = RevMuxAdapters(64, 4, seed=0)
        batch = random_batch(rng, model.cfg, n=2, groups=2, l=1)
        with pytest.raises(ConfigError):
            revmux_forward(batch, model, adapters)
        with pytest.raises(ConfigError):
            revmux_forward(batch, model, None)

    def test_prefill_depth_out_of_range(self):
        rng = np.random.default_rng(4)
        model = EncoderModel(EncoderConfig(), seed=0)
        adapters = RevMuxAdapters(64, 2, seed=0)
        batch = random_batch(rng, model.cfg, n=2, groups=2, l=model.cfg.n_layers + 1)
        with pytest.raises(ConfigError):
            revmux_forward(batch, model, adapters)

    @pytest.mark.parametrize("l", [0, 2, 4])
    def test_shapes_at_all_depths(self, l):
        rng = np.random.default_rng(5)
        model = EncoderModel(EncoderConfig(), seed=6)
        adapters = RevMuxAdapters(64, 2, seed=7, coupling_init="random")
        batch = random_batch(rng, model.cfg, n=2, groups=4, l=l)
        logits, pooled = revmux_forward(batch, model, adapters)
        assert [lg.shape for lg in logits] == [(4, 2), (4, 2)]
        assert [p.shape for p in pooled] == [(4, 64), (4, 64)]


class TestTeacherForward:
    def test_matches_plain_pooled_forward(self):
        rng = np.random.default_rng(6)
        model = EncoderModel(EncoderConfig(), seed=8)
        batch = random_batch(rng, model.cfg, n=1, groups=4, l=0)
        teacher = teacher_forward(batch.tokens[0], batch.masks[0], model)
        expect = model.pool(model.forward_full(batch.tokens[0], batch.masks[0]), batch.masks[0])
        np.testing.assert_array_equal(teacher.data, expect.data)
        assert not teacher.requires_grad

    def test_deterministic_and_dropout_free_in_training_mode(self):
        rng = np.random.default_rng(7)
        model = EncoderModel(EncoderConfig(), seed=9)
        model.train_mode(True)
        batch = random_batch(rng, model.cfg, n=1, groups=3, l=0)
        a = teacher_forward(batch.tokens[0], batch.masks[0], model)
        b = teacher_forward(batch.tokens[0], batch.masks[0], model)
        np.testing.assert_array_equal(a.data, b.data)
        assert model.training  # restored

    def test_unaffected_by_adapter_parameters(self):
        rng = np.random.default_rng(8)
        model = EncoderModel(EncoderConfig(), seed=10)
        batch = random_batch(rng, model.cfg, n=1, groups=3, l=0)
        before = teacher_forward(batch.tokens[0], batch.masks[0], model)
        adapters = RevMuxAdapters(64, 2, coupling_init="random", seed=11)
        adapters.f_down.weight.data += 1.0
        after = teacher_forward(batch.tokens[0], batch.masks[0], model)
        np.testing.assert_array_equal(before.data, after.data)


class TestTinyPipelineGradients:
    def test_full_pipeline_gradcheck(self):
        rng = np.random.default_rng(9)
        model = EncoderModel(TINY, seed=12, dtype=np.float64)
        model.set_frozen(False)
        model.eval_mode()
        adapters = RevMuxAdapters(8, 2, dtype=np.float64, coupling_init="random", seed=13)
        batch = random_batch(rng, TINY, n=2, groups=2, l=1)
        teacher_slots = [teacher_forward(batch.tokens[k], batch.masks[k], model) for k in range(2)]
        teacher = Tensor(np.stack([t.data for t in teacher_slots], axis=1))
        labels = [batch.labels[k] for k in range(2)]

        def build_loss():
            logits, pooled = revmux_forward(batch, model, adapters)
            student = T.reshape(T.concat_last_dim(pooled), (2, 2, 8))
            return combined_loss(logits, labels, student, teacher, weight=0.5).total

        params = list(adapters.trainable_parameters().values())
        named = model.named_parameters()
        params += [named["head.weight"], named["block0.attn.wq.weight"],
                   named["block1.ffn_in.weight"], named["token_emb"]]
        check_grads(build_loss, params, rng, tol=1e-3, max_samples=4)


class TestQuickEval:
    def test_bounds_and_determinism(self):
        model = EncoderModel(EncoderConfig(), seed=14)
        adapters = RevMuxAdapters(64, 2, coupling_init="random", seed=15)
        _, eval_ds = keyword_dataset(8, 32)
        a = quick_eval(model, adapters, eval_ds, n=2, prefill_layers=2, seed=1)
        b = quick_eval(model, adapters, eval_ds, n=2, prefill_layers=2, seed=1)
        assert a == b
        assert 0.0 <= a <= 1.0

    def test_single_slot_matches_plain_accuracy_metric(self):
        model = EncoderModel(EncoderConfig(), seed=16)
        _, eval_ds = keyword_dataset(8, 16)
        acc = quick_eval(model, None, eval_ds, n=1, prefill_layers=0, seed=0)
        assert acc == pytest.approx(plain_accuracy(model, eval_ds))


class TestTrainAdapters:
    def _setup(self, n_train=64, n_eval=16, seed=0):
        train_ds, eval_ds = keyword_dataset(n_train, n_eval, seed=seed)
        model = EncoderModel(EncoderConfig(), seed=seed)
        adapters = RevMuxAdapters(64, 2, seed=seed)
        return model, adapters, train_ds, eval_ds

    def test_fe_mode_leaves_backbone_bit_exact(self, tmp_path):
        model, adapters, train_ds, eval_ds = self._setup()
        before = {n: p.data.copy() for n, p in model.named_parameters().items()}
        cfg = TrainConfig(n_inputs=2, prefill_layers=2, epochs=2, seed=0)
        log_path = str(tmp_path / "log.csv")
        result = train_adapters(model, adapters, train_ds, eval_ds, cfg, log_path=log_path)
        for name, p in model.named_parameters().items():
            np.testing.assert_array_equal(p.data, before[name], err_msg=name)
        assert result.epochs_run == 2
        with open(log_path) as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0].keys()) == ["step", "epoch", "ce", "infonce", "total", "acc"]
        assert all(np.isfinite(float(r["total"])) for r in rows)

    def test_adapter_parameters_change(self):
        model, adapters, train_ds, eval_ds = self._setup()
        before = {n: p.data.copy() for n, p in adapters.trainable_parameters().items()}
        cfg = TrainConfig(n_inputs=2, prefill_layers=2, epochs=1, seed=0)
        train_adapters(model, adapters, train_ds, None, cfg)
        changed = [
            n for n, p in adapters.trainable_parameters().items()
            if not np.array_equal(p.data, before[n])
        ]
        assert changed

    def test_ft_mode_updates_backbone(self):
        model, adapters, train_ds, _ = self._setup(n_train=16, n_eval=8)
        before = {n: p.data.copy() for n, p in model.named_parameters().items()}
        cfg = TrainConfig(n_inputs=2, prefill_layers=2, epochs=1, mode="ft", seed=0)
        train_adapters(model, adapters, train_ds, None, cfg)
        changed = [
            n for n, p in model.named_parameters().items()
            if not np.array_equal(p.data, before[n])
        ]
        assert changed

    def test_zero_weight_logs_zero_infonce_column_effect(self):
        model, adapters, train_ds, _ = self._setup(n_train=16, n_eval=8)
        cfg = TrainConfig(n_inputs=2, prefill_layers=2, epochs=1, infonce_weight=0.0, seed=0)
        result = train_adapters(model, adapters, train_ds, None, cfg)
        for row in result.rows:
            assert row["total"] == pytest.approx(row["ce"], abs=1e-9)

    def test_divergence_aborts_with_diagnostics(self):
        model, adapters, train_ds, _ = self._setup(n_train=16, n_eval=8)
        adapters.f_up.weight.data[:] = np.nan
        cfg = TrainConfig(n_inputs=2, prefill_layers=2, epochs=1, seed=0)
        with pytest.raises(TrainingDiverged, match=r"step 1.*lr=.*grad_norm="):
            train_adapters(model, adapters, train_ds, None, cfg)

    def test_loss_decreases_over_first_epochs_on_most_seeds(self):
        wins = 0
        for seed in range(5):
            model, adapters, train_ds, _ = self._setup(n_train=128, seed=seed)
            cfg = TrainConfig(n_inputs=2, prefill_layers=2, epochs=3, seed=seed,
                              groups_per_batch=16)
            result = train_adapters(model, adapters, train_ds, None, cfg)
            means = [
                np.mean([r["total"] for r in result.rows if r["epoch"] == e])
                for e in range(3)
            ]
            if means[0] > means[1] > means[2]:
                wins += 1
        assert wins >= 4

    def test_early_stopping_respects_patience(self):
        model, adapters, train_ds, _ = self._setup(n_train=16)
        cfg = TrainConfig(n_inputs=2, prefill_layers=2, epochs=30, patience=2, seed=0)
        calls = []

        def flat_eval(m, a):
            calls.append(1)
            return 0.5  # never improves after the first epoch

        result = train_adapters(model, adapters, train_ds, None, cfg, eval_fn=flat_eval)
        assert result.stopped_early
        assert result.epochs_run == 3  # best at epoch 0, then patience 2
        assert result.best_epoch == 0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="frozen")
        with pytest.raises(ConfigError):
            TrainConfig(n_inputs=0)
        with pytest.raises(ConfigError):
            TrainConfig(infonce_weight=-1.0)
        model, adapters, train_ds, _ = self._setup(n_train=8)
        with pytest.raises(ConfigError):
            train_adapters(model, adapters, train_ds, None, TrainConfig(n_inputs=4, prefill_layers=0))


class TestTrainBackbone:
    def test_pretraining_improves_accuracy(self, tmp_path):
        train_ds, eval_ds = keyword_dataset(256, 64, seed=3)
        model = EncoderModel(EncoderConfig(dropout_rate=0.0), seed=3)
        before = plain_accuracy(model, eval_ds)
        log_path = str(tmp_path / "pretrain.csv")
        result = train_backbone(model, train_ds, eval_ds, PretrainConfig(epochs=3, seed=3), log_path)
        after = plain_accuracy(model, eval_ds)
        assert after > before
        assert result.best_accuracy == pytest.approx(after)
        with open(log_path) as fh:
            header = fh.readline().strip()
        assert header == "step,epoch,ce,infonce,total,acc"

    def test_divergence_aborts(self):
        train_ds, _ = keyword_dataset(32, 8, seed=4)
        model = EncoderModel(EncoderConfig(), seed=4)
        model.token_emb.data[:] = np.nan
        with pytest.raises(TrainingDiverged):
            train_backbone(model, train_ds, None, PretrainConfig(epochs=1, seed=4))


class TestHelpers:
    def test_batch_accuracy(self):
        logits = [Tensor(np.array([[2.0, 1.0], [0.0, 3.0]])), Tensor(np.array([[1.0, 2.0], [5.0, 0.0]]))]
        labels = np.array([[0, 1], [1, 1]])
        assert batch_accuracy(logits, labels) == pytest.approx(0.75)

    def test_write_log_is_atomic_and_readable(self, tmp_path):
        path = str(tmp_path / "log.csv")
        write_log([{"step": 1, "epoch": 0, "ce": 0.5, "infonce": 0.1, "total": 0.55, "acc": 1.0}], path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["total"] == "0.55"
