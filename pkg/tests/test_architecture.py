import numpy as np
import pytest

from teed import architecture
from teed.architecture import EdgeMapSet, ParamStore, build, count_params, forward, predict_maps
from teed.numerics import Tensor
from teed.utils.config import ModelConfig
from teed.utils import utils
from teed.utils.errors import ConfigError, ContractError
from teed.utils.layer_table import layer_frame, layer_table, param_names, reverse_search

from conftest import check_gradients

DEFAULT_PARAM_COUNT = 54650


@pytest.fixture(scope="module")
def params():
    return build(seed=0)

@pytest.fixture(scope="module")
def params64():
    return build(seed=3, dtype=np.float64)


class TestLayerTable:

    def test_pinned_count(self):
        assert count_params(build()) == DEFAULT_PARAM_COUNT
        assert 50_000 <= DEFAULT_PARAM_COUNT <= 62_000
        assert layer_frame()["params"].sum() == DEFAULT_PARAM_COUNT

    def test_layers_and_names(self):
        assert len(layer_table()) == 18
        names = param_names()
        assert len(names) == 36
        assert names[:2] == ["block1.conv1.weight", "block1.conv1.bias"]
        assert names[-1] == "dfuse.dwconv2.bias"

    def test_reverse_search(self):
        spec = reverse_search("usnet3.deconv1.weight")
        assert spec.kind == "deconv"
        assert spec.weight_shape == (8, 8, 2, 2)
        assert reverse_search("dfuse.dwconv1.bias").bias_shape == (24,)
        with pytest.raises(ContractError):
            reverse_search("block9.conv1.weight")

    def test_only_three_blocks(self):
        with pytest.raises(ConfigError):
            layer_table(ModelConfig(block_channels=(16, 32)))
        with pytest.raises(ConfigError):
            ModelConfig(activation="relu").validate()


class TestBuild:

    def test_deterministic(self):
        assert build(seed=5).equals(build(seed=5))
        assert not build(seed=5).equals(build(seed=6))

    def test_init_values(self, params):
        for spec in layer_table():
            fan_in, fan_out = spec.fans()
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = params[f"{spec.name}.weight"].data
            assert np.abs(w).max() <= bound * (1 + 1e-6)
            assert not np.any(params[f"{spec.name}.bias"].data)

    def test_dtype(self, params, params64):
        assert params.dtype == np.float32
        assert params64.dtype == np.float64
        assert params.astype(np.float64).dtype == np.float64


class TestParamStore:

    def test_rejects_missing_and_extra(self, params):
        tensors = dict(params.items())
        del tensors["skip1.proj.bias"]
        with pytest.raises(ContractError):
            ParamStore(tensors)
        with pytest.raises(ContractError):
            ParamStore({**dict(params.items()), "extra.weight": Tensor(np.zeros(1))})

    def test_rejects_bad_shape(self, params):
        with pytest.raises(ContractError):
            params.replace({"block1.conv1.bias": Tensor(np.zeros(3, dtype=np.float32))})

    def test_replace_is_new_store(self, params):
        zeros = Tensor(np.zeros(16, dtype=np.float32))
        changed = params.replace({"block1.conv1.bias": Tensor(np.ones(16, dtype=np.float32))})
        assert not changed.equals(params)
        assert params["block1.conv1.bias"].data.sum() == 0
        assert changed.replace({"block1.conv1.bias": zeros}).equals(params)

    def test_mixed_dtypes_rejected(self, params):
        with pytest.raises(ContractError):
            params.replace({"block1.conv1.bias": Tensor(np.zeros(16), dtype=np.float64)})


class TestForward:

    def test_shapes_and_range(self, params, rng):
        maps = forward(params, Tensor(rng.random((3, 32, 32)), dtype=np.float32))
        assert isinstance(maps, EdgeMapSet)
        for m in maps.maps:
            assert m.shape == (1, 32, 32)
            assert m.dtype == np.float32
            assert (m.data > 0).all() and (m.data < 1).all()
        assert (maps.height, maps.width) == (32, 32)
        assert maps.average().shape == (1, 32, 32)

    def test_odd_sizes_cropped_back(self, params, rng):
        maps = forward(params, Tensor(rng.random((3, 30, 35)), dtype=np.float32))
        assert all(m.shape == (1, 30, 35) for m in maps.maps)

    def test_batch_matches_single(self, params64, rng):
        images = rng.random((2, 3, 24, 20))
        batch = forward(params64, Tensor(images))
        assert batch.dfuse.shape == (2, 1, 24, 20)
        for i in range(2):
            single = forward(params64, Tensor(images[i]))
            for a, b in zip(batch.maps, single.maps):
                np.testing.assert_allclose(a.data[i], b.data, rtol=1e-10, atol=1e-12)

    def test_bad_inputs(self, params, rng):
        with pytest.raises(ContractError):
            forward(params, Tensor(rng.random((1, 32, 32))))
        with pytest.raises(ContractError):
            forward(params, Tensor(rng.random((3, 8, 32))))

    def test_teedup_resize_path(self, params, rng, monkeypatch):
        seen = []
        original = architecture.forward

        def recording_forward(p, image, tape=None):
            seen.append(image.shape)
            return original(p, image, tape=tape)

        monkeypatch.setattr(architecture, "forward", recording_forward)
        maps = predict_maps(params, rng.random((3, 100, 100)), input_scale=1.5)
        assert seen == [(3, 150, 150)]
        assert all(m.shape == (1, 100, 100) for m in maps.maps)

    def test_default_scale_is_identity(self, params, rng):
        image = rng.random((3, 20, 24))
        direct = forward(params, Tensor(image, dtype=np.float32))
        np.testing.assert_array_equal(predict_maps(params, image).dfuse.data, direct.dfuse.data)


def _model_gradient_check(seed):
    rng = np.random.default_rng(seed)
    params = build(seed=seed, dtype=np.float64)
    image = Tensor(rng.random((3, 32, 32)))

    def fn(values, tape):
        return forward(ParamStore(values, params.config), image, tape=tape).dfuse

    check_gradients(fn, dict(params.items()), rng, n_samples=2, rtol=1e-3)

def test_full_model_gradients():
    _model_gradient_check(0)

@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradients_many_seeds(seed):
    _model_gradient_check(seed)


class TestFusion:

    def test_every_map_reaches_dfuse(self, params64, rng):
        maps = forward(params64, Tensor(rng.random((1, 3, 24, 24)))).maps[:3]
        base = architecture.dfuse_head(params64, list(maps)).data
        for i in range(3):
            zeroed = list(maps)
            zeroed[i] = Tensor(np.zeros(maps[i].shape))
            assert np.abs(architecture.dfuse_head(params64, zeroed).data - base).max() > 1e-8

    @pytest.mark.parametrize("height,width", [(16, 16), (17, 31), (64, 48), (101, 128), (128, 128)])
    def test_any_resolution(self, params, rng, height, width):
        maps = forward(params, Tensor(rng.random((3, height, width)), dtype=np.float32))
        for m in maps.maps:
            assert m.shape == (1, height, width)
            assert (m.data > 0).all() and (m.data < 1).all()

    def test_forward_bit_identical(self, params, rng):
        utils.set_deterministic(True)
        image = Tensor(rng.random((3, 40, 36)), dtype=np.float32)
        first, second = forward(params, image), forward(params, image)
        for a, b in zip(first.maps, second.maps):
            np.testing.assert_array_equal(a.data, b.data)
