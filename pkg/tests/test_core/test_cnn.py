"""
CNN 推論エンジンのテスト

素朴なループ実装を基準に、畳み込み・プーリング・全結合の結果を比較します。
"""

import zipfile

import numpy as np
import pytest
from conftest import tiny_spec

from renoscan.core.cnn import (
    FeatureExtractor,
    NetworkSpec,
    WeightArchive,
    alexnet_spec,
    conv,
    conv2d,
    fc,
    forward,
    infer_shapes,
    load_weights,
    lrn_op,
    max_pool,
    pool,
    random_weights,
    relu,
    save_weights,
    validate_weights,
)
from renoscan.core.featuremaps import ChannelStack
from renoscan.core.feature_sets import FeatureSet
from renoscan.core.imaging import GrayImage
from renoscan.exceptions import ShapeMismatchError, ValidationError, WeightArchiveError
from renoscan.utils.parallel import ordered_map


def naive_conv(x, kernel, bias, stride=1, pad=0, groups=1):
    h, w, c = x.shape
    kh, kw, cg, out = kernel.shape
    og = out // groups
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    result = np.zeros((ho, wo, out))
    for o in range(out):
        g = o // og
        for r in range(ho):
            for q in range(wo):
                total = float(bias[o])
                for i in range(kh):
                    for j in range(kw):
                        yy = r * stride - pad + i
                        xx = q * stride - pad + j
                        if not (0 <= yy < h and 0 <= xx < w):
                            continue
                        for ci in range(cg):
                            total += float(x[yy, xx, g * cg + ci]) * float(kernel[i, j, ci, o])
                result[r, q, o] = total
    return result


def naive_pool(x, window, stride):
    ho = (x.shape[0] - window) // stride + 1
    wo = (x.shape[1] - window) // stride + 1
    out = np.zeros((ho, wo, x.shape[2]))
    for r in range(ho):
        for q in range(wo):
            patch = x[r * stride:r * stride + window, q * stride:q * stride + window]
            out[r, q] = patch.reshape(-1, x.shape[2]).max(axis=0)
    return out


def random_stack(rng, n0):
    planes = [GrayImage(rng.uniform(0, 255, (n0, n0))) for _ in range(3)]
    return ChannelStack(*planes)


class TestConv2d:
    def test_scalar(self):
        x = np.array([[[2.0]]], dtype=np.float32)
        out = conv2d(x, np.array([[[[3.0]]]], dtype=np.float32), np.array([1.0], dtype=np.float32))
        np.testing.assert_array_equal(out, [[[7.0]]])

    def test_alexnet_first_layer_size(self):
        x = np.zeros((227, 227, 3), dtype=np.float32)
        out = conv2d(x, np.zeros((11, 11, 3, 96), dtype=np.float32), np.zeros(96, dtype=np.float32),
                     stride=4)
        assert out.shape == (55, 55, 96)

    @pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 2)])
    def test_matches_naive(self, rng, stride, pad, groups):
        x = rng.standard_normal((8, 8, 2 * groups)).astype(np.float32)
        kernel = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
        bias = rng.standard_normal(4).astype(np.float32)
        out = conv2d(x, kernel, bias, stride=stride, pad=pad, groups=groups)
        expected = naive_conv(x, kernel, bias, stride, pad, groups)
        assert out.shape == expected.shape
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((6, 5, 4)).astype(np.float32)
        kernel = np.eye(4, dtype=np.float32).reshape(1, 1, 4, 4)
        out = conv2d(x, kernel, np.zeros(4, dtype=np.float32))
        np.testing.assert_array_equal(out, x)

    def test_incompatible_shapes_name_layer(self):
        with pytest.raises(ShapeMismatchError, match="conv_x"):
            conv2d(np.zeros((4, 4, 3), dtype=np.float32), np.zeros((3, 3, 2, 4), dtype=np.float32),
                   np.zeros(4, dtype=np.float32), layer="conv_x")


class TestLayers:
    def test_lrn_matches_definition(self, rng):
        x = rng.standard_normal((2, 3, 7)).astype(np.float32)
        out = lrn_op(x, depth=5, k=2.0, alpha=1e-2, beta=0.75)
        for c in range(7):
            lo, hi = max(0, c - 2), min(6, c + 2)
            denom = (2.0 + 1e-2 * (x[..., lo:hi + 1].astype(float) ** 2).sum(axis=-1)) ** 0.75
            np.testing.assert_allclose(out[..., c], x[..., c] / denom, rtol=1e-5)

    def test_max_pool(self, rng):
        x = rng.standard_normal((9, 9, 3)).astype(np.float32)
        out = max_pool(x, 3, 2)
        np.testing.assert_array_equal(out, naive_pool(x, 3, 2))
        assert np.all(out.max(axis=(0, 1)) <= x.max(axis=(0, 1)))


class TestNetworkSpec:
    def test_alexnet_shapes(self):
        spec = alexnet_spec()
        shapes = infer_shapes(spec)
        by_name = {layer.name: shape for layer, shape in zip(spec.layers, shapes)}
        assert by_name["conv1"] == (55, 55, 96)
        assert by_name["pool1"] == (27, 27, 96)
        assert by_name["conv2"] == (27, 27, 256)
        assert by_name["pool2"] == (13, 13, 256)
        assert by_name["conv3"] == (13, 13, 384)
        assert by_name["conv4"] == (13, 13, 384)
        assert by_name["conv5"] == (13, 13, 256)
        assert by_name["pool5"] == (6, 6, 256)
        assert by_name["fc6"] == (4096,)
        assert by_name["relu7"] == (4096,)
        assert by_name["fc8"] == (1000,)
        assert by_name["prob"] == (1000,)

    def test_mismatch_names_layer(self):
        spec = NetworkSpec(layers=(conv("c1", 3, 3, 4), fc("bad_fc", 10, 2)), input_shape=(8, 8, 3))
        with pytest.raises(ShapeMismatchError, match="bad_fc"):
            infer_shapes(spec)

    def test_groups_must_divide(self):
        spec = NetworkSpec(layers=(conv("c1", 3, 3, 4, groups=2),), input_shape=(8, 8, 3))
        with pytest.raises(ShapeMismatchError, match="c1"):
            infer_shapes(spec)

    def test_json_round_trip(self, tmp_path):
        spec = alexnet_spec()
        path = tmp_path / "spec.json"
        spec.save_json(path)
        assert NetworkSpec.from_json(path) == spec

    def test_duplicate_names(self):
        with pytest.raises(ValidationError):
            NetworkSpec(layers=(relu("a"), relu("a")))


class TestWeightArchive:
    @pytest.mark.parametrize("name", ["weights", "weights.zip"])
    def test_round_trip_is_bit_identical(self, tmp_path, name):
        spec = tiny_spec()
        archive = random_weights(spec, seed=3)
        save_weights(archive, tmp_path / name)
        loaded = load_weights(tmp_path / name)
        assert set(loaded.tensors) == set(archive.tensors)
        for layer, (kernel, bias) in archive.tensors.items():
            assert loaded.kernel(layer).tobytes() == kernel.tobytes()
            assert loaded.bias(layer).tobytes() == bias.tobytes()
        validate_weights(spec, loaded)

    def test_truncated_payload(self, tmp_path):
        save_weights(random_weights(tiny_spec(), seed=1), tmp_path / "w")
        payload = tmp_path / "w" / "weights.bin"
        payload.write_bytes(payload.read_bytes()[:-1])
        with pytest.raises(WeightArchiveError, match="truncated payload"):
            load_weights(tmp_path / "w")

    @pytest.mark.parametrize("member", ["weights.bin", "manifest.json"])
    def test_missing_directory_member(self, tmp_path, member):
        save_weights(random_weights(tiny_spec(), seed=1), tmp_path / "w")
        (tmp_path / "w" / member).unlink()
        with pytest.raises(WeightArchiveError, match=member) as exc:
            load_weights(tmp_path / "w")
        assert exc.value.exit_code == 2

    def test_missing_zip_member(self, tmp_path):
        with zipfile.ZipFile(tmp_path / "w.zip", "w") as zf:
            zf.writestr("manifest.json", "{}")
        with pytest.raises(WeightArchiveError, match="weights.bin"):
            load_weights(tmp_path / "w.zip")

    def test_not_a_zip_file(self, tmp_path):
        (tmp_path / "w.zip").write_bytes(b"not a zip archive")
        with pytest.raises(WeightArchiveError):
            load_weights(tmp_path / "w.zip")

    def test_non_finite_weights(self, tmp_path):
        archive = random_weights(tiny_spec(), seed=1)
        tensors = {k: (v[0].copy(), v[1].copy()) for k, v in archive.tensors.items()}
        tensors["conv1"][0][0, 0, 0, 0] = np.nan
        save_weights(WeightArchive(tensors=tensors), tmp_path / "w")
        with pytest.raises(WeightArchiveError, match="non-finite weights"):
            load_weights(tmp_path / "w")

    def test_unknown_layer(self):
        spec = tiny_spec()
        tensors = dict(random_weights(spec).tensors)
        tensors["conv9"] = (np.zeros((1, 1, 1, 1), dtype=np.float32), np.zeros(1, dtype=np.float32))
        with pytest.raises(WeightArchiveError, match="conv9"):
            validate_weights(spec, WeightArchive(tensors=tensors))

    def test_shape_mismatch(self):
        spec = tiny_spec()
        tensors = dict(random_weights(spec).tensors)
        tensors["fc7"] = (np.zeros((3, 16), dtype=np.float32), np.zeros(16, dtype=np.float32))
        with pytest.raises(WeightArchiveError, match="fc7"):
            validate_weights(spec, WeightArchive(tensors=tensors))


class TestForward:
    def test_zero_input_zero_weights(self):
        spec = tiny_spec()
        tensors = {name: (np.zeros_like(k), np.zeros_like(b))
                   for name, (k, b) in random_weights(spec).tensors.items()}
        zero = GrayImage(np.zeros((64, 64)))
        vector = forward(spec, WeightArchive(tensors=tensors), ChannelStack(zero, zero, zero))
        assert vector.provenance is FeatureSet.CNN
        assert len(vector) == 16
        assert np.all(vector.values == 0.0)
        assert vector.names[0] == "cnn_0000"

    def test_deterministic_across_threads(self, rng):
        spec = tiny_spec()
        extractor = FeatureExtractor(spec, random_weights(spec, seed=11))
        stacks = [random_stack(rng, 64) for _ in range(4)]
        serial = [extractor.extract(s).values.tobytes() for s in stacks]
        parallel = ordered_map(lambda s: extractor.extract(s).values.tobytes(), stacks, threads=4)
        assert serial == parallel
        again = FeatureExtractor(spec, random_weights(spec, seed=11))
        assert [again.extract(s).values.tobytes() for s in stacks] == serial

    def test_small_network_matches_naive(self, rng):
        spec = NetworkSpec(layers=(
            conv("ca", 3, 3, 4, pad=1), relu("ra"),
            conv("cb", 3, 4, 6, stride=2, groups=2), relu("rb"),
            pool("pb"), fc("out", 3 * 3 * 6, 5),
        ), input_shape=(16, 16, 3))
        weights = random_weights(spec, seed=2)
        stack = random_stack(rng, 16)
        got = FeatureExtractor(spec, weights, tap="out").extract(stack).values

        x = stack.as_array().astype(float)
        x = np.maximum(naive_conv(x, weights.kernel("ca"), weights.bias("ca"), 1, 1, 1), 0)
        x = np.maximum(naive_conv(x, weights.kernel("cb"), weights.bias("cb"), 2, 0, 2), 0)
        x = naive_pool(x, 3, 2)
        expected = x.reshape(-1) @ weights.kernel("out").astype(float) + weights.bias("out")
        assert np.max(np.abs(got - expected)) <= 1e-4 * max(1.0, np.abs(expected).max())

    def test_tap_not_found(self):
        spec = tiny_spec()
        with pytest.raises(ValidationError):
            FeatureExtractor(spec, random_weights(spec), tap="fc9")

    def test_intermediate_tap(self, rng):
        spec = tiny_spec()
        extractor = FeatureExtractor(spec, random_weights(spec), tap="pool1")
        assert extractor.output_dim == 14 * 14 * 4
        assert len(extractor.extract(random_stack(rng, 64))) == 14 * 14 * 4

    def test_wrong_input_size(self, rng):
        spec = tiny_spec()
        extractor = FeatureExtractor(spec, random_weights(spec))
        with pytest.raises(ShapeMismatchError):
            extractor.extract(random_stack(rng, 32))

    def test_channel_means_are_subtracted(self):
        spec = tiny_spec()
        extractor = FeatureExtractor(spec, random_weights(spec), channel_means=(10.0, 20.0, 30.0))
        plane = GrayImage(np.full((64, 64), 30.0))
        x = extractor.preprocess(ChannelStack(plane, plane, plane))
        np.testing.assert_array_equal(x[0, 0], [20.0, 10.0, 0.0])
