import numpy as np
import pytest

from modnet.autodiff import ShapeError, Tensor
from modnet.modules import (ModuleConfig, ModuleKey, combine_forward,
                            describe_forward, find_forward, measure_forward,
                            transform_forward)
from modnet.params import ParameterStore


@pytest.fixture
def config():
    return ModuleConfig(feature_channels=6, attention_height=4,
                        attention_width=5, transform_hidden=8,
                        labels=("no", "yes"))


@pytest.fixture
def store():
    return ParameterStore(seed=0)


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


class TestModuleKey:
    def test_render(self):
        assert ModuleKey("find", "red").render() == "find[red]"
        assert str(ModuleKey("transform", "next-to")) == "transform[next-to]"

    def test_bad_type(self):
        with pytest.raises(ValueError):
            ModuleKey("locate", "red")

    def test_bad_instance(self):
        with pytest.raises(ValueError):
            ModuleKey("find", "Red")
        with pytest.raises(ValueError):
            ModuleKey("find", "")


class TestFind:
    def test_zero_features_give_bias_map(self, config, store):
        find_forward(store, "red", Tensor(np.zeros((4, 5, 6))), config)
        store.get("find.red.conv.bias").data[:] = 0.25
        out = find_forward(store, "red", Tensor(np.zeros((4, 5, 6))), config)
        assert out.dims == (4, 5)
        assert np.allclose(out.data, 0.25)

    def test_weight_tying_across_calls(self, config, store):
        feats = rand((4, 5, 6))
        find_forward(store, "red", feats, config)
        weight = store.get("find.red.conv.weight")
        find_forward(store, "red", feats, config)
        assert store.get("find.red.conv.weight") is weight

    def test_channel_mismatch(self, config, store):
        with pytest.raises(ShapeError, match="find"):
            find_forward(store, "red", Tensor(np.zeros((4, 5, 3))), config)


class TestTransform:
    def test_output_dims_match_input(self, config, store):
        out = transform_forward(store, "above", rand((4, 5)), config)
        assert out.dims == (4, 5)

    def test_zero_parameters_give_zero_map(self, config, store):
        transform_forward(store, "above", rand((4, 5)), config)
        for name in store.names():
            if name.startswith("transform.above"):
                store.get(name).data[:] = 0.0
        out = transform_forward(store, "above", rand((4, 5)), config)
        assert np.allclose(out.data, 0.0)


class TestCombine:
    def test_unit_weights_sum_nonnegative_maps(self, config, store):
        combine_forward(store, "and", rand((4, 5)), rand((4, 5)), config)
        store.get("combine.and.conv.weight").data[:] = 1.0
        store.get("combine.and.conv.bias").data[:] = 0.0
        a = Tensor(np.abs(np.random.default_rng(1).normal(size=(4, 5))))
        b = Tensor(np.abs(np.random.default_rng(2).normal(size=(4, 5))))
        out = combine_forward(store, "and", a, b, config)
        assert np.allclose(out.data, a.data + b.data, rtol=1e-6)

    def test_deterministic(self, config, store):
        a, b = rand((4, 5), 3), rand((4, 5), 4)
        first = combine_forward(store, "and", a, b, config)
        second = combine_forward(store, "and", a, b, config)
        assert np.array_equal(first.data, second.data)


class TestDescribe:
    def test_output_length(self, config, store):
        out = describe_forward(store, "color", rand((4, 5, 6)), rand((4, 5)),
                               config)
        assert out.dims == (2,)

    def test_zero_weights_pass_bias(self, config, store):
        describe_forward(store, "color", rand((4, 5, 6)), rand((4, 5)), config)
        store.get("describe.color.fc.weight").data[:] = 0.0
        store.get("describe.color.fc.bias").data[:] = [1.5, -2.0]
        out = describe_forward(store, "color", rand((4, 5, 6), 9),
                               rand((4, 5), 10), config)
        assert np.allclose(out.data, [1.5, -2.0])

    def test_uniform_attention_reduces_to_mean_feature(self, config, store):
        feats = rand((4, 5, 6), 5)
        out = describe_forward(store, "color", feats, Tensor(np.zeros((4, 5))),
                               config)
        w = store.get("describe.color.fc.weight").data
        b = store.get("describe.color.fc.bias").data
        expected = feats.data.mean(axis=(0, 1)) @ w + b
        assert np.allclose(out.data, expected, rtol=1e-5)


class TestMeasure:
    def test_output_length(self, config, store):
        assert measure_forward(store, "is", rand((4, 5)), config).dims == (2,)

    def test_sensitive_to_magnitude(self, config, store):
        att = rand((4, 5), 6)
        one = measure_forward(store, "is", att, config)
        two = measure_forward(store, "is", Tensor(att.data * 2.0), config)
        assert not np.allclose(one.data, two.data)


class TestTypeLevelSharing:
    def test_shared_flag_collapses_instances(self):
        config = ModuleConfig(feature_channels=6, attention_height=4,
                              attention_width=5, share_by_type=True)
        store = ParameterStore(seed=0)
        feats = rand((4, 5, 6))
        find_forward(store, "red", feats, config)
        find_forward(store, "blue", feats, config)
        assert "find.shared.conv.weight" in store
        assert "find.red.conv.weight" not in store

    def test_default_keeps_instances_separate(self):
        config = ModuleConfig(feature_channels=6, attention_height=4,
                              attention_width=5)
        store = ParameterStore(seed=0)
        feats = rand((4, 5, 6))
        find_forward(store, "red", feats, config)
        find_forward(store, "blue", feats, config)
        assert "find.red.conv.weight" in store
        assert "find.blue.conv.weight" in store


def test_d_ans_tracks_labels_when_unset():
    config = ModuleConfig(labels=("a", "b", "c"))
    assert config.d_ans == 3
    fused = ModuleConfig(labels=("a", "b"), answer_rep_size=32)
    assert fused.d_ans == 32
