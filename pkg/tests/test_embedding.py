import numpy as np
import pytest

from conftest import (
    build_toy_backbone,
    onnx_attr_int,
    onnx_attr_ints,
    onnx_model_bytes,
    onnx_node,
    onnx_tensor,
    onnx_value_info,
)
from dermfuse.embedding import (
    LAYER_ORDER,
    DimensionMismatchError,
    FeatureVector,
    LayerId,
    MissingLayerError,
    NetworkId,
    SideMismatchError,
    extract_features,
    load_onnx_backend,
    mock_backend,
)
from dermfuse.errors import ValidationError
from dermfuse.onnx_exec import NumpyExecutor, UnsupportedOperatorError
from dermfuse.onnx_io import OnnxFormatError, read_model, read_model_bytes
from dermfuse.preprocess import IDENTITY_TAG, PreprocessedImage


def tensors(side, n=1, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(side, side, 3)) for _ in range(n)]


class TestLayerNetworkIds:
    def test_layer_dims(self):
        assert LayerId.FC6.dim == 4096
        assert LayerId.FC7.dim == 4096
        assert LayerId.FC8.dim == 1000

    def test_network_sides(self):
        assert NetworkId.ALEXNET.input_side == 227
        assert NetworkId.VGG16.input_side == 224


class TestFeatureVector:
    def test_dimension_enforced(self):
        with pytest.raises(ValidationError):
            FeatureVector(np.zeros(5), NetworkId.ALEXNET, LayerId.FC6, "x", IDENTITY_TAG)

    def test_finiteness_enforced(self):
        vals = np.zeros(1000)
        vals[3] = np.nan
        with pytest.raises(ValidationError):
            FeatureVector(vals, NetworkId.ALEXNET, LayerId.FC8, "x", IDENTITY_TAG)


class TestMockBackend:
    def test_deterministic_across_calls_and_instances(self):
        t = tensors(227)[0]
        b1 = mock_backend(NetworkId.ALEXNET, seed=1)
        b2 = mock_backend(NetworkId.ALEXNET, seed=1)
        e1 = b1.embed(t)
        e2 = b2.embed(t)
        for layer in LAYER_ORDER:
            assert np.array_equal(e1[layer], e2[layer])
            assert np.array_equal(e1[layer], b1.embed(t)[layer])

    def test_correct_dimensions(self):
        out = mock_backend(NetworkId.VGG16, seed=0).embed(tensors(224)[0])
        for layer in LAYER_ORDER:
            assert out[layer].shape == (layer.dim,)

    def test_single_pixel_change_moves_fc6(self):
        backend = mock_backend(NetworkId.ALEXNET, seed=2)
        t = tensors(227)[0]
        t2 = t.copy()
        t2[100, 100, 1] += 5.0
        assert not np.array_equal(backend.embed(t)[LayerId.FC6], backend.embed(t2)[LayerId.FC6])

    def test_zero_tensor_gives_bias_only_vector(self):
        backend = mock_backend(NetworkId.ALEXNET, seed=3)
        z = np.zeros((227, 227, 3))
        first = backend.embed(z)[LayerId.FC7]
        again = backend.embed(np.zeros((227, 227, 3)))[LayerId.FC7]
        assert np.array_equal(first, again)
        assert not np.allclose(first, 0.0)  # the bias term shows through

    def test_seed_sensitivity(self):
        t = tensors(227)[0]
        a = mock_backend(NetworkId.ALEXNET, seed=1).embed(t)[LayerId.FC6]
        b = mock_backend(NetworkId.ALEXNET, seed=2).embed(t)[LayerId.FC6]
        assert not np.array_equal(a, b)

    def test_networks_differ(self):
        a = mock_backend(NetworkId.ALEXNET, seed=1)
        v = mock_backend(NetworkId.VGG16, seed=1)
        assert a.input_side != v.input_side


class TestExtractFeatures:
    def images(self, side, n):
        return [
            PreprocessedImage(tensor=t, source_id=f"img{i}", variant=IDENTITY_TAG)
            for i, t in enumerate(tensors(side, n))
        ]

    def test_stable_order_image_major_layer_minor(self):
        backend = mock_backend(NetworkId.ALEXNET, seed=0)
        feats = extract_features(backend, self.images(227, 3), {LayerId.FC8, LayerId.FC6})
        assert len(feats) == 6
        assert [(f.source_id, f.layer) for f in feats] == [
            ("img0", LayerId.FC6), ("img0", LayerId.FC8),
            ("img1", LayerId.FC6), ("img1", LayerId.FC8),
            ("img2", LayerId.FC6), ("img2", LayerId.FC8),
        ]

    def test_side_mismatch_names_image(self):
        backend = mock_backend(NetworkId.ALEXNET, seed=0)
        with pytest.raises(SideMismatchError) as err:
            extract_features(backend, self.images(224, 1), {LayerId.FC6})
        assert "img0" in str(err.value)

    def test_repeat_run_bitwise_identical(self):
        backend = mock_backend(NetworkId.VGG16, seed=5)
        images = self.images(224, 4)
        a = extract_features(backend, images, set(LAYER_ORDER))
        b = extract_features(backend, images, set(LAYER_ORDER))
        assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))

    def test_permutation_equivariance(self):
        backend = mock_backend(NetworkId.VGG16, seed=6)
        images = self.images(224, 4)
        forward = extract_features(backend, images, {LayerId.FC8})
        backward = extract_features(backend, images[::-1], {LayerId.FC8})
        assert all(
            np.array_equal(f.values, b.values) for f, b in zip(forward, backward[::-1])
        )


class TestOnnxBackend:
    def write_model(self, tmp_path, **kwargs):
        path = tmp_path / "model.onnx"
        path.write_bytes(build_toy_backbone(side=227, **kwargs))
        return path

    def test_loads_and_reports_dims(self, tmp_path):
        backend = load_onnx_backend(self.write_model(tmp_path), NetworkId.ALEXNET)
        assert backend.layer_dims == {LayerId.FC6: 4096, LayerId.FC7: 4096, LayerId.FC8: 1000}

    def test_missing_fc7_output(self, tmp_path):
        path = self.write_model(tmp_path, declare_layers=("fc6", "fc8"))
        with pytest.raises(MissingLayerError) as err:
            load_onnx_backend(path, NetworkId.ALEXNET)
        assert err.value.layer_name == "fc7"

    def test_wrong_fc8_dimension(self, tmp_path):
        path = self.write_model(tmp_path, fc8_dim=999)
        with pytest.raises(DimensionMismatchError):
            load_onnx_backend(path, NetworkId.ALEXNET)

    def test_wrong_input_side_for_network(self, tmp_path):
        path = self.write_model(tmp_path)
        with pytest.raises(ValidationError):
            load_onnx_backend(path, NetworkId.VGG16)  # VGG16 wants 224, model is 227

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "junk.onnx"
        path.write_bytes(b"\xff\xff\xff\xff\xff")
        with pytest.raises(OnnxFormatError):
            load_onnx_backend(path, NetworkId.ALEXNET)

    def test_embed_matches_hand_computation(self, tmp_path):
        path = self.write_model(tmp_path, seed=11)
        backend = load_onnx_backend(path, NetworkId.ALEXNET)
        t = tensors(227, seed=12)[0]
        out = backend.embed(t)
        # the toy graph is global-average-pool then three dense heads
        model = read_model(path)
        w6 = model.graph.initializers["w6"]
        b6 = model.graph.initializers["b6"]
        pooled = t.transpose(2, 0, 1).astype(np.float32).reshape(3, -1).mean(axis=1)
        expected = (pooled[None, :].astype(np.float32) @ w6.T + b6)[0]
        assert np.max(np.abs(out[LayerId.FC6] - expected)) < 1e-4

    def test_embed_deterministic(self, tmp_path):
        backend = load_onnx_backend(self.write_model(tmp_path), NetworkId.ALEXNET)
        t = tensors(227, seed=13)[0]
        a = backend.embed(t)
        b = backend.embed(t.copy())
        for layer in LAYER_ORDER:
            assert np.array_equal(a[layer], b[layer])


class TestOnnxReader:
    def test_roundtrip_of_encoder_fields(self):
        model = read_model_bytes(build_toy_backbone(side=227, seed=1))
        assert model.opset == 13
        assert [o.name for o in model.graph.outputs] == ["fc6", "fc7", "fc8"]
        assert model.graph.outputs[0].shape == (1, 4096)
        assert model.graph.initializers["w6"].shape == (4096, 3)
        ops = [n.op_type for n in model.graph.nodes]
        assert ops == ["AveragePool", "Flatten", "Gemm", "Gemm", "Gemm"]
        assert model.graph.nodes[0].attrs["kernel_shape"] == [227, 227]


class TestNumpyExecutor:
    def run_single(self, node, inits, feeds, out_shape=None):
        inputs = [onnx_value_info(k, v.shape) for k, v in feeds.items()]
        outputs = [onnx_value_info("out", out_shape or (1,))]
        model = read_model_bytes(onnx_model_bytes([node], inputs, outputs, inits))
        return NumpyExecutor(model.graph).run(["out"], feeds)[0]

    def test_conv_matches_scipy(self):
        from scipy import signal

        rng = np.random.default_rng(20)
        x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        node = onnx_node(
            "Conv", ["x", "w", "b"], ["out"],
            [onnx_attr_ints("kernel_shape", [3, 3]), onnx_attr_ints("strides", [1, 1]),
             onnx_attr_ints("pads", [1, 1, 1, 1])],
        )
        got = self.run_single(node, [onnx_tensor("w", w), onnx_tensor("b", b)], {"x": x})
        xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)))
        expected = np.stack([
            sum(signal.correlate(xp[c], w[o, c], mode="valid") for c in range(2)) + b[o]
            for o in range(3)
        ])
        assert np.max(np.abs(got[0] - expected)) < 1e-4

    def test_conv_stride_2(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
        w = np.ones((1, 1, 2, 2), dtype=np.float32)
        node = onnx_node("Conv", ["x", "w"], ["out"],
                         [onnx_attr_ints("kernel_shape", [2, 2]), onnx_attr_ints("strides", [2, 2])])
        got = self.run_single(node, [onnx_tensor("w", w)], {"x": x})
        assert got.shape == (1, 1, 2, 2)
        assert got[0, 0, 0, 0] == pytest.approx(x[0, 0, :2, :2].sum(), abs=1e-5)

    def test_maxpool_matches_naive(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(1, 2, 7, 7)).astype(np.float32)
        node = onnx_node("MaxPool", ["x"], ["out"],
                         [onnx_attr_ints("kernel_shape", [3, 3]), onnx_attr_ints("strides", [2, 2])])
        got = self.run_single(node, [], {"x": x})
        assert got.shape == (1, 2, 3, 3)
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    block = x[0, c, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    assert got[0, c, i, j] == block.max()

    def test_gemm_trans_b(self):
        a = np.array([[1.0, 2.0]], dtype=np.float32)
        b = np.array([[3.0, 4.0], [5.0, 6.0]], dtype=np.float32)
        c = np.array([10.0, 20.0], dtype=np.float32)
        node = onnx_node("Gemm", ["a", "b", "c"], ["out"], [onnx_attr_int("transB", 1)])
        got = self.run_single(node, [onnx_tensor("b", b), onnx_tensor("c", c)], {"a": a})
        assert np.allclose(got, [[1 * 3 + 2 * 4 + 10, 1 * 5 + 2 * 6 + 20]])

    def test_unsupported_op_rejected(self):
        node = onnx_node("Softmax", ["x"], ["out"], [])
        with pytest.raises(UnsupportedOperatorError):
            self.run_single(node, [], {"x": np.zeros((1, 2), dtype=np.float32)})
