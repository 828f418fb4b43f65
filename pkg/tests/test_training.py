import math

import numpy as np
import pytest

from modnet import autodiff as ad
from modnet.autodiff import NumericalError, Tape, precision
from modnet.checkpoint import (CheckpointError, checkpoint_bytes,
                               load_checkpoint, save_checkpoint,
                               store_from_checkpoint)
from modnet.dataset import GenConfig, MICRO_OVERRIDES, generate_dataset
from modnet.encoders import conv_features
from modnet.imageio import read_pgm
from modnet.layout import layout_from_query
from modnet.params import ParameterStore
from modnet.query import parse_query
from modnet.training import (ModelError, TrainConfig, TrainExample, adadelta_step,
                             build_context, dump_attention, evaluate_model,
                             examples_from_manifest, fit_examples, load_model,
                             save_model, train_on_dataset)


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_micro")
    config = GenConfig(**MICRO_OVERRIDES)
    manifest = generate_dataset(config, out)
    return out, manifest


@pytest.fixture(scope="module")
def micro_fit(micro):
    out, manifest = micro
    config = TrainConfig(model="nmn", epochs=3, batch_size=16, seed=4)
    result = train_on_dataset(out, manifest, config)
    return out, manifest, result


class TestAdadelta:
    def test_first_step_closed_form(self):
        with precision("float64"):
            store = ParameterStore(seed=0)
            p = store.bias("measure.is.fc.bias", (1,))
            p.grad = np.ones(1)
            adadelta_step(store, ["measure.is.fc.bias"], rho=0.95, eps=1e-6)
        expected = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
        assert abs(float(p.data[0]) - expected) <= 1e-9

    def test_zero_gradient_decays_state_only(self):
        with precision("float64"):
            store = ParameterStore(seed=0)
            p = store.bias("measure.is.fc.bias", (2,))
            p.grad = np.ones(2)
            adadelta_step(store, ["measure.is.fc.bias"])
            value = p.data.copy()
            eg2_before = store.opt_state("measure.is.fc.bias")[0].copy()
            p.grad = np.zeros(2)
            adadelta_step(store, ["measure.is.fc.bias"])
        assert np.array_equal(p.data, value)
        assert np.allclose(store.opt_state("measure.is.fc.bias")[0],
                           0.95 * eg2_before)

    def test_untouched_parameter_bit_identical(self):
        store = ParameterStore(seed=0)
        touched = store.weight("find.red.conv.weight", (4,))
        idle = store.weight("find.blue.conv.weight", (4,))
        idle_bytes = idle.data.tobytes()
        idle_state = store.opt_state("find.blue.conv.weight")[0].tobytes()
        touched.grad = np.ones(4, dtype=np.float32)
        adadelta_step(store, ["find.red.conv.weight"])
        assert idle.data.tobytes() == idle_bytes
        assert store.opt_state("find.blue.conv.weight")[0].tobytes() == idle_state

    def test_nan_gradient_aborts(self):
        store = ParameterStore(seed=0)
        p = store.bias("measure.is.fc.bias", (1,))
        p.grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(NumericalError, match="measure.is.fc.bias"):
            adadelta_step(store, ["measure.is.fc.bias"])


class TestCheckpoint:
    def build_store(self):
        store = ParameterStore(seed=3)
        store.weight("find.red.conv.weight", (1, 1, 4, 1))
        store.bias("find.red.conv.bias", (1,))
        store.weight("measure.is.fc.weight", (9, 2))
        g = np.full((9, 2), 0.5, dtype=np.float32)
        store.get("measure.is.fc.weight").grad = g
        adadelta_step(store, ["measure.is.fc.weight"])
        return store

    def test_round_trip_bit_exact(self, tmp_path):
        store = self.build_store()
        path = tmp_path / "m.ckpt"
        save_checkpoint(store, path)
        values, state = load_checkpoint(path)
        for name in store.names():
            assert values[name].tobytes() == store.get(name).data.tobytes()
            eg2, edx2 = store.opt_state(name)
            assert state[name][0].tobytes() == eg2.tobytes()
            assert state[name][1].tobytes() == edx2.tobytes()

    def test_restored_store_serializes_identically(self, tmp_path):
        store = self.build_store()
        blob = checkpoint_bytes(store)
        again = checkpoint_bytes(store_from_checkpoint(blob))
        assert blob == again

    def test_magic_checked(self):
        store = self.build_store()
        blob = bytearray(checkpoint_bytes(store))
        blob[:8] = b"NOTMAGIC"
        with pytest.raises(CheckpointError):
            load_checkpoint(bytes(blob))

    def test_corruption_rejected_by_crc(self):
        blob = bytearray(checkpoint_bytes(self.build_store()))
        blob[20] ^= 0xFF
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(bytes(blob))

    def test_truncation_rejected(self):
        blob = checkpoint_bytes(self.build_store())
        with pytest.raises(CheckpointError):
            load_checkpoint(blob[:-3])


class TestBatchingEquivalence:
    def _examples(self, rng, n):
        texts = ["is(red, above(circle))", "is(green, below(square))",
                 "is(blue, left_of(triangle))"]
        out = []
        for i in range(n):
            image = rng.integers(0, 256, size=(30, 30, 3), dtype=np.uint8)
            query = texts[i % len(texts)]
            out.append(TrainExample(image=image, question="q", query=query,
                                    answer="yes" if i % 2 else "no",
                                    layout_size=5))
        return out

    def test_batched_matches_sequential(self):
        rng = np.random.default_rng(0)
        examples = self._examples(rng, 4)
        config = TrainConfig(model="nmn", epochs=1, seed=5)
        context = build_context(config, ("no", "yes"),
                                [e.question for e in examples])
        label_index = {"no": 0, "yes": 1}

        def forward(example):
            feats = conv_features(example.image, context.store, context.stack,
                                  context.module_config)
            rep = context.network_for(context.layout_for(example.query))(feats)
            return ad.nll_loss(ad.softmax(rep), label_index[example.answer])

        context.store.zero_grads()
        with Tape() as tape:
            total = None
            outputs = []
            for example in examples:
                loss = forward(example)
                outputs.append(float(loss.data))
                total = loss if total is None else ad.add(total, loss)
            mean_loss = ad.scale(total, 1.0 / len(examples))
        touched = tape.backward(mean_loss)
        batched = {name: context.store.get(name).grad.copy()
                   for name in touched}

        context.store.zero_grads()
        sequential_outputs = []
        for example in examples:
            with Tape() as tape:
                loss = forward(example)
                scaled = ad.scale(loss, 1.0 / len(examples))
            sequential_outputs.append(float(loss.data))
            tape.backward(scaled)
        assert np.allclose(outputs, sequential_outputs, rtol=1e-6)
        for name, g in batched.items():
            seq = context.store.get(name).grad
            scale = max(float(np.abs(g).max()), 1e-12)
            assert float(np.abs(g - seq).max()) / scale <= 1e-5, name

    def test_tied_gradient_is_sum_over_occurrences(self):
        rng = np.random.default_rng(1)
        image = rng.integers(0, 256, size=(30, 30, 3), dtype=np.uint8)
        shared = TrainExample(image=image, question="q",
                              query="is(red, blue)", answer="no", layout_size=4)
        other = TrainExample(image=image, question="q",
                             query="is(red, green)", answer="no", layout_size=4)
        config = TrainConfig(model="nmn", epochs=1, seed=6)
        context = build_context(config, ("no", "yes"), ["q"])

        def loss_of(example):
            feats = conv_features(example.image, context.store, context.stack,
                                  context.module_config)
            rep = context.network_for(context.layout_for(example.query))(feats)
            return ad.nll_loss(ad.softmax(rep), 0)

        name = "find.red.conv.weight"
        context.store.zero_grads()
        with Tape() as tape:
            both = ad.add(loss_of(shared), loss_of(other))
        tape.backward(both)
        joint = context.store.get(name).grad.copy()

        grads = []
        for example in (shared, other):
            context.store.zero_grads()
            with Tape() as tape:
                loss = loss_of(example)
            tape.backward(loss)
            grads.append(context.store.get(name).grad.copy())
        assert np.allclose(joint, grads[0] + grads[1], rtol=1e-5, atol=1e-8)


class TestFitLoop:
    def test_initial_loss_near_ln2(self, micro):
        out, manifest = micro
        examples = examples_from_manifest(out, manifest, "train")
        config = TrainConfig(model="nmn", epochs=1, batch_size=len(examples),
                             seed=0, val_fraction=0.02)
        result = fit_examples(examples, config)
        first_loss = float(result.metrics_rows[0][2])
        assert abs(first_loss - math.log(2.0)) <= 0.15

    @pytest.mark.slow
    def test_loss_decreases_over_epochs(self, fast_dataset):
        out, _, manifest = fast_dataset
        config = TrainConfig(model="nmn", epochs=5, batch_size=16, seed=1)
        result = train_on_dataset(out, manifest, config)
        losses = [float(r[2]) for r in result.metrics_rows if r[1] == "train"]
        assert losses[4] < losses[0]

    def test_determinism_bit_identical(self, micro):
        out, manifest = micro
        blobs = []
        metrics = []
        for _ in range(2):
            config = TrainConfig(model="nmn", epochs=2, batch_size=16, seed=9)
            result = train_on_dataset(out, manifest, config)
            blobs.append(checkpoint_bytes(result.context.store))
            metrics.append(result.metrics_csv())
        assert blobs[0] == blobs[1]
        assert metrics[0] == metrics[1]

    def test_conv_stack_trains_jointly(self, micro):
        out, manifest = micro
        examples = examples_from_manifest(out, manifest, "train")
        config = TrainConfig(model="nmn", epochs=1, batch_size=16, seed=2)
        before_store = build_context(config, ("no", "yes"), ["q"]).store
        w_init = before_store.weight(
            "lenet.features.conv1.weight", (5, 5, 3, 16)).data.copy()
        result = fit_examples(examples, config)
        w_after = result.context.store.get("lenet.features.conv1.weight").data
        assert not np.array_equal(w_init, w_after)

    def test_exclude_size_filters_training(self, micro):
        out, manifest = micro
        examples = examples_from_manifest(out, manifest, "train")
        sizes = {e.layout_size for e in examples}
        assert 6 in sizes
        config = TrainConfig(model="nmn", epochs=1, batch_size=16, seed=3,
                             exclude_size=6)
        result = fit_examples(examples, config)
        assert result.best_val_accuracy >= 0.0

    def test_majority_model(self, micro):
        out, manifest = micro
        examples = examples_from_manifest(out, manifest, "train")
        config = TrainConfig(model="majority", seed=0)
        result = fit_examples(examples, config)
        test = examples_from_manifest(out, manifest, "test")
        report = evaluate_model(result.context, test,
                                [e.answer for e in examples])
        assert report.overall == report.majority_accuracy

    def test_unknown_model_rejected(self):
        with pytest.raises(ModelError):
            TrainConfig(model="transformer")


class TestEvaluate:
    def test_oracle_predictions_score_one(self, micro):
        out, manifest = micro

        class Oracle:
            def predict(self, example):
                return example.answer

        test = examples_from_manifest(out, manifest, "test")
        report = evaluate_model(Oracle(), test, ["no", "no", "yes"])
        assert report.overall == 1.0

    def test_overall_is_pair_weighted_mean_of_sizes(self, micro_fit):
        out, manifest, result = micro_fit
        test = examples_from_manifest(out, manifest, "test")
        report = evaluate_model(result.context, test,
                                [r.answer for r in manifest.split_records("train")])
        weighted = sum(g for g, _ in report.by_size.values())
        total = sum(t for _, t in report.by_size.values())
        assert report.n_pairs == total
        assert report.overall == pytest.approx(weighted / total)

    def test_report_csv_shape(self, micro_fit):
        out, manifest, result = micro_fit
        test = examples_from_manifest(out, manifest, "test")
        report = evaluate_model(result.context, test,
                                [r.answer for r in manifest.split_records("train")])
        lines = report.to_csv().strip().split("\n")
        assert lines[0] == "scope,key,pairs,accuracy"
        scopes = {line.split(",")[0] for line in lines[1:]}
        assert {"overall", "size", "majority", "question"} <= scopes


class TestPersistence:
    def test_save_load_predicts_identically(self, micro_fit, tmp_path):
        out, manifest, result = micro_fit
        path = tmp_path / "model.ckpt"
        save_model(result.context, path)
        loaded = load_model(path)
        test = examples_from_manifest(out, manifest, "test")
        for example in test[:10]:
            a = result.context.distribution(example).data
            b = loaded.distribution(example).data
            assert np.array_equal(a, b)

    def test_missing_meta_rejected(self, micro_fit, tmp_path):
        _, _, result = micro_fit
        path = tmp_path / "naked.ckpt"
        save_checkpoint(result.context.store, path)
        with pytest.raises(ModelError, match="metadata"):
            load_model(path)

    def test_lstm_model_round_trip(self, micro, tmp_path):
        out, manifest = micro
        examples = examples_from_manifest(out, manifest, "train")
        config = TrainConfig(model="nmn+lstm", epochs=1, batch_size=16, seed=0)
        result = fit_examples(examples, config)
        path = tmp_path / "fused.ckpt"
        save_model(result.context, path)
        assert path.with_name("fused.ckpt.vocab.tsv").exists()
        loaded = load_model(path)
        example = examples[0]
        assert np.array_equal(loaded.distribution(example).data,
                              result.context.distribution(example).data)

    def test_vocabulary_mismatch_detected(self, micro, tmp_path):
        out, manifest = micro
        examples = examples_from_manifest(out, manifest, "train")
        config = TrainConfig(model="nmn+lstm", epochs=1, batch_size=16, seed=0)
        result = fit_examples(examples, config)
        path = tmp_path / "fused.ckpt"
        save_model(result.context, path)
        vocab_path = path.with_name("fused.ckpt.vocab.tsv")
        vocab_path.write_text(vocab_path.read_text() + "zebra\t999\n")
        with pytest.raises(ModelError, match="vocabulary mismatch"):
            load_model(path)


class TestAttentionDump:
    def test_relation_layout_emits_four_heatmaps(self, micro_fit, tmp_path):
        out_dir = tmp_path / "attn"
        _, _, result = micro_fit
        layout = layout_from_query(parse_query("is(red, above(circle))"),
                                   "shapes")
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, size=(30, 30, 3), dtype=np.uint8)
        paths, dist = dump_attention(result.context, image, layout, out_dir)
        assert len(paths) == 4
        for path in paths:
            heat = read_pgm(path)
            assert heat.shape == (9, 9)
        sidecar = (out_dir / "layout.txt").read_text()
        assert "measure[is]" in sidecar and "answer" in sidecar
        assert abs(dist.sum() - 1.0) <= 1e-6

    def test_requires_plain_model(self, micro, tmp_path):
        out, manifest = micro
        examples = examples_from_manifest(out, manifest, "train")
        config = TrainConfig(model="nmn+lstm", epochs=1, batch_size=32, seed=0)
        result = fit_examples(examples, config)
        layout = layout_from_query(parse_query("is(red)"), "shapes")
        with pytest.raises(ModelError):
            dump_attention(result.context, examples[0].image, layout, tmp_path)
