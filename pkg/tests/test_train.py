import json

import numpy as np
import pytest

from capgen.checkpoint import load_checkpoint, save_checkpoint
from capgen.data import load_captions, synth_dataset
from capgen.errors import IntegrityError
from capgen.model import (
    ModelConfig,
    SequenceInput,
    forward_with_cache,
    init_params,
    softmax_cross_entropy,
)
from capgen.train import (
    TrainConfig,
    backward,
    clip_gradients,
    default_vocab_path,
    grad_check,
    gradcheck_probe,
    sgd_step,
    train,
    write_training_report,
)

TINY = ModelConfig(d_img=5, vocab_size=12, d_embed=6, hidden=4, n=4, bidirectional=True)


def params_bytes(params):
    return b"".join(arr.tobytes() for _, arr in params.named_tensors())


class TestBackward:
    def test_loss_matches_forward_loss(self):
        params, sample = gradcheck_probe(TINY, 2)
        seq_input, target = sample
        loss, _ = backward(params, sample)
        logits, _ = forward_with_cache(params, seq_input)
        expected, _ = softmax_cross_entropy(logits, target)
        assert loss == pytest.approx(expected, abs=1e-15)

    def test_readout_gradient_closed_form(self):
        params, sample = gradcheck_probe(TINY, 4)
        seq_input, target = sample
        _, grads = backward(params, sample)
        logits, cache = forward_with_cache(params, seq_input)
        _, probs = softmax_cross_entropy(logits, target)
        for j in range(TINY.vocab_size):
            coeff = probs[j] - 1.0 if j == target else probs[j]
            assert np.allclose(grads["W_out"][j], coeff * cache.h_last, atol=1e-12)
            assert grads["b_out"][j] == pytest.approx(coeff, abs=1e-12)

    def test_untouched_embedding_rows_zero(self):
        params = init_params(TINY, 8)
        seq_input = SequenceInput(np.linspace(-1, 1, 5), (3, 1, 4, 2))  # no pads, no row 0
        _, grads = backward(params, (seq_input, 5))
        touched = {3, 1, 4, 2}
        for row in range(TINY.vocab_size):
            if row in touched:
                assert np.any(grads["E"][row] != 0.0)
            else:
                assert np.all(grads["E"][row] == 0.0)

    def test_repeated_ids_accumulate(self):
        params = init_params(TINY, 8)
        single = backward(params, (SequenceInput(np.ones(5), (3, 1, 2, 4)), 0))[1]
        doubled = backward(params, (SequenceInput(np.ones(5), (3, 3, 3, 3)), 0))[1]
        assert np.any(doubled["E"][3] != 0.0)
        assert np.all(doubled["E"][1] == 0.0)
        assert set(np.flatnonzero(np.any(single["E"] != 0.0, axis=1))) == {1, 2, 3, 4}

    def test_gradients_finite(self):
        params, sample = gradcheck_probe(TINY, 6)
        _, grads = backward(params, sample)
        for name, g in grads.items():
            assert np.all(np.isfinite(g)), name


class TestGradCheck:
    def test_tiny_reference_model(self):
        params, sample = gradcheck_probe(TINY, 0)
        result = grad_check(params, sample, eps=1e-5)
        assert result.checked == result.total == 984
        assert result.max_rel_error < 1e-4

    def test_unidirectional_model(self):
        config = ModelConfig(d_img=4, vocab_size=8, d_embed=5, hidden=3, n=3, bidirectional=False)
        params, sample = gradcheck_probe(config, 1)
        assert grad_check(params, sample, eps=1e-5).max_rel_error < 1e-4

    def test_zero_learning_rate_training_changes_nothing(self):
        params, sample = gradcheck_probe(TINY, 3)
        before = grad_check(params, sample, eps=1e-5)
        zero_grads = {name: np.zeros_like(arr) for name, arr in params.named_tensors()}
        sgd_step(params, zero_grads, 0.1)
        after = grad_check(params, sample, eps=1e-5)
        assert before == after

    def test_eps_zero_rejected(self):
        params, sample = gradcheck_probe(TINY, 0)
        with pytest.raises(ValueError):
            grad_check(params, sample, eps=0.0)

    def test_requires_64_bit(self):
        config = ModelConfig(d_img=3, vocab_size=5, d_embed=4, hidden=2, n=2, precision=32)
        params = init_params(config, 0)
        sample = (SequenceInput(np.zeros(3, dtype=np.float32), (0, 0)), 1)
        with pytest.raises(ValueError, match="64"):
            grad_check(params, sample)

    def test_subset_sampling_is_deterministic(self):
        params, sample = gradcheck_probe(TINY, 5)
        a = grad_check(params, sample, max_components=100, subset_seed=1)
        b = grad_check(params, sample, max_components=100, subset_seed=1)
        assert a.checked == b.checked == 100
        assert a == b

    def test_tamper_is_detected(self):
        params, sample = gradcheck_probe(TINY, 0)
        result = grad_check(params, sample, tamper=1.0)
        assert result.max_rel_error > 1e-2


class TestSgdStep:
    def test_zero_learning_rate(self):
        params = init_params(TINY, 1)
        before = params_bytes(params)
        grads = {name: np.ones_like(arr) for name, arr in params.named_tensors()}
        sgd_step(params, grads, 0.0)
        assert params_bytes(params) == before

    def test_scalar_arithmetic(self):
        params = init_params(TINY, 1)
        params.b_out[0] = 1.0
        grads = {name: np.zeros_like(arr) for name, arr in params.named_tensors()}
        grads["b_out"][0] = 2.0
        sgd_step(params, grads, 0.1)
        assert params.b_out[0] == pytest.approx(0.8, abs=1e-15)

    def test_zero_gradient_batch_is_identity(self):
        params = init_params(TINY, 2)
        before = params_bytes(params)
        grads = {name: np.zeros_like(arr) for name, arr in params.named_tensors()}
        sgd_step(params, grads, 0.5)
        assert params_bytes(params) == before

    def test_descends_convex_quadratic(self):
        # L(theta) = 0.5 * sum(theta^2) has gradient theta; any lr in (0, 2)
        # must shrink it
        params = init_params(TINY, 3)
        loss_before = sum(float(np.sum(a * a)) for _, a in params.named_tensors())
        grads = {name: arr.copy() for name, arr in params.named_tensors()}
        sgd_step(params, grads, 0.1)
        loss_after = sum(float(np.sum(a * a)) for _, a in params.named_tensors())
        assert loss_after < loss_before

    def test_clip_gradients(self):
        grads = {"a": np.array([3.0, 4.0])}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.allclose(grads["a"], [0.6, 0.8])
        grads = {"a": np.array([0.3, 0.4])}
        clip_gradients(grads, 1.0)
        assert np.allclose(grads["a"], [0.3, 0.4])  # under the cap: untouched


@pytest.fixture
def small_dataset(tmp_path):
    return synth_dataset(tmp_path / "data", 6, 8, 12, 6, seed=4)


SMALL_MODEL = ModelConfig(d_embed=10, hidden=6, n=6)
SMALL_TRAIN = TrainConfig(learning_rate=0.1, epochs=3, batch_size=4, shuffle_seed=1, log_every=0)


class TestTrain:
    def test_zero_epochs_checkpoint_is_initial(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        ckpt = tmp_path / "model.cckp"
        config = TrainConfig(learning_rate=0.1, epochs=0, batch_size=4, shuffle_seed=9, log_every=0)
        report = train(cap_path, emb_path, SMALL_MODEL, config, ckpt)
        assert report.records == ()
        loaded = load_checkpoint(ckpt)
        init_seq, _ = np.random.SeedSequence(9).spawn(2)
        expected = init_params(loaded.config, init_seq)
        for (name, got), (_, want) in zip(loaded.named_tensors(), expected.named_tensors()):
            assert got.astype(np.float32).tobytes() == want.astype(np.float32).tobytes(), name

    def test_reports_samples_per_epoch(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        config = TrainConfig(learning_rate=0.1, epochs=1, batch_size=4, shuffle_seed=1, log_every=0)
        report = train(cap_path, emb_path, SMALL_MODEL, config, tmp_path / "m.cckp")
        assert report.samples_per_epoch == 6 * SMALL_MODEL.n
        assert report.records[0].samples == 6 * SMALL_MODEL.n

    def test_large_expansion_count_without_epochs(self, tmp_path):
        emb_path, cap_path = synth_dataset(tmp_path / "big", 1570, 4, 10, 6, seed=0)
        config = TrainConfig(learning_rate=0.1, epochs=0, batch_size=16, shuffle_seed=0, log_every=0)
        model = ModelConfig(d_embed=4, hidden=2, n=10)
        report = train(cap_path, emb_path, model, config, tmp_path / "m.cckp")
        assert report.samples_per_epoch == 15700

    def test_bit_reproducible(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        first = tmp_path / "a.cckp"
        second = tmp_path / "b.cckp"
        train(cap_path, emb_path, SMALL_MODEL, SMALL_TRAIN, first)
        train(cap_path, emb_path, SMALL_MODEL, SMALL_TRAIN, second)
        assert first.read_bytes() == second.read_bytes()

    def test_different_seed_changes_checkpoint(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        first = tmp_path / "a.cckp"
        second = tmp_path / "b.cckp"
        train(cap_path, emb_path, SMALL_MODEL, SMALL_TRAIN, first)
        other = TrainConfig(learning_rate=0.1, epochs=3, batch_size=4, shuffle_seed=2, log_every=0)
        train(cap_path, emb_path, SMALL_MODEL, other, second)
        assert first.read_bytes() != second.read_bytes()

    def test_missing_embedding_is_integrity_error(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        broken = tmp_path / "broken.tsv"
        broken.write_text(cap_path.read_text(encoding="utf-8") + "ghost\tsome caption\n", encoding="utf-8")
        with pytest.raises(IntegrityError, match="ghost"):
            train(broken, emb_path, SMALL_MODEL, SMALL_TRAIN, tmp_path / "m.cckp")

    def test_writes_vocab_sidecar(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        ckpt = tmp_path / "model.cckp"
        train(cap_path, emb_path, SMALL_MODEL, SMALL_TRAIN, ckpt)
        sidecar = default_vocab_path(ckpt)
        assert sidecar.exists()
        assert sidecar.read_text(encoding="utf-8").splitlines()[0] == "<unk>"

    def test_vocab_size_mismatch_rejected(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        wrong = ModelConfig(vocab_size=999, d_embed=10, hidden=6, n=6)
        with pytest.raises(IntegrityError, match="vocab_size"):
            train(cap_path, emb_path, wrong, SMALL_TRAIN, tmp_path / "m.cckp")

    def test_d_img_mismatch_rejected(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        wrong = ModelConfig(d_img=99, d_embed=10, hidden=6, n=6)
        with pytest.raises(IntegrityError, match="d_img"):
            train(cap_path, emb_path, wrong, SMALL_TRAIN, tmp_path / "m.cckp")

    def test_float32_mode_trains_and_reloads(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        model = ModelConfig(d_embed=8, hidden=4, n=6, precision=32)
        config = TrainConfig(learning_rate=0.1, epochs=1, batch_size=4, shuffle_seed=0, log_every=0)
        ckpt = tmp_path / "m32.cckp"
        report = train(cap_path, emb_path, model, config, ckpt)
        assert report.records[0].mean_loss > 0.0
        loaded = load_checkpoint(ckpt)
        assert loaded.config.precision == 32
        assert loaded.E.dtype == np.float32


class TestTrainingReport:
    def test_jsonl_format(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        report = train(cap_path, emb_path, SMALL_MODEL, SMALL_TRAIN, tmp_path / "m.cckp")
        out = tmp_path / "report.jsonl"
        write_training_report(report, out)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 3
        for k, line in enumerate(lines, start=1):
            record = json.loads(line)
            assert list(record) == ["epoch", "mean_loss", "samples", "seconds"]
            assert record["epoch"] == k
            assert record["samples"] == report.samples_per_epoch
            assert record["mean_loss"] > 0.0
            assert record["seconds"] >= 0.0

    def test_empty_history_for_zero_epochs(self, small_dataset, tmp_path):
        emb_path, cap_path = small_dataset
        config = TrainConfig(learning_rate=0.1, epochs=0, batch_size=4, shuffle_seed=0, log_every=0)
        report = train(cap_path, emb_path, SMALL_MODEL, config, tmp_path / "m.cckp")
        out = tmp_path / "report.jsonl"
        write_training_report(report, out)
        assert out.read_text(encoding="utf-8") == ""
        assert report.final_mean_loss is None


class TestOverfit:
    def test_final_loss_below_bar(self, overfit_run):
        assert overfit_run["records"][-1]["mean_loss"] < 0.1

    def test_loss_non_increasing_over_50_epoch_windows(self, overfit_run):
        losses = [r["mean_loss"] for r in overfit_run["records"]]
        windows = [np.mean(losses[i : i + 50]) for i in range(0, len(losses), 50)]
        assert all(later <= earlier for earlier, later in zip(windows, windows[1:]))


class TestTrainConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValueError):
            TrainConfig(clip_norm=0.0)
