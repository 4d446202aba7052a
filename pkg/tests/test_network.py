import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaloc.errors import DimensionError, ParseError
from adaloc.network import (
    Conv,
    Dense,
    NetworkSpec,
    ParameterStore,
    decode_model,
    encode_model,
    forward,
    index_coordinate,
    index_map,
    init_network,
    iter_coordinates,
    model_hash,
)

# Logits of NetworkSpec.mlp(4, [5], 3) initialised with seed 1234 at x below,
# recorded from the first verified build.
GOLDEN_X = np.array([0.5, -1.0, 2.0, 0.25])
GOLDEN_LOGITS = [0.07847537235070023, 0.10275917214872764, 0.3893022823150132]


def small_cnn() -> NetworkSpec:
    return NetworkSpec((2, 6, 6), 3, (Conv(2, 3, 3), Conv(3, 2, 2), Dense(18, 4), Dense(4, 3)))


class TestNetworkSpec:
    def test_mlp_helper(self):
        spec = NetworkSpec.mlp(32, [128, 128], 10)
        assert spec.layers == (Dense(32, 128), Dense(128, 128), Dense(128, 10))
        assert spec.param_count == 32 * 128 + 128 + 128 * 128 + 128 + 128 * 10 + 10

    def test_dense_layer_count(self):
        spec = NetworkSpec.mlp(4, [3], 2)
        w0, b0, end = spec.offsets(0)
        assert (b0 - w0, end - b0) == (12, 3)
        assert end - w0 == 15

    def test_conv_shapes(self):
        spec = small_cnn()
        assert spec.activation_shape(0) == (3, 4, 4)
        assert spec.activation_shape(1) == (2, 3, 3)
        assert spec.param_count == 54 + 3 + 24 + 2 + 72 + 4 + 12 + 3

    @pytest.mark.parametrize("layers", [
        (),
        (Dense(4, 3), Dense(2, 2)),
        (Dense(4, 5),),
        (Conv(1, 2, 3), Dense(8, 2)),
    ])
    def test_nonconforming(self, layers):
        with pytest.raises(DimensionError):
            NetworkSpec((4,), 2, layers)

    def test_dict_roundtrip(self):
        spec = small_cnn()
        assert NetworkSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_layer_kind(self):
        with pytest.raises(ParseError):
            NetworkSpec.from_dict({"input_shape": [2], "class_count": 2, "layers": [{"kind": "attn"}]})


class TestInit:
    def test_deterministic(self):
        spec = NetworkSpec.mlp(6, [5], 3)
        a, b = init_network(spec, 9), init_network(spec, 9)
        assert a.flat.tobytes() == b.flat.tobytes()
        assert init_network(spec, 10) != a

    def test_biases_zero(self):
        params = init_network(small_cnn(), 0)
        for i in range(4):
            np.testing.assert_array_equal(params.bias(i), 0.0)

    def test_he_variance(self):
        # one wide layer gives 10^5 draws with fan_in 50
        spec = NetworkSpec.mlp(50, [], 2000)
        w = init_network(spec, 5).weight(0)
        assert w.size == 100_000
        assert np.var(w) == pytest.approx(2.0 / 50, rel=0.05)
        assert abs(np.mean(w)) < 0.005


class TestParameterStore:
    def test_read_only(self):
        params = init_network(NetworkSpec.mlp(3, [2], 2), 0)
        with pytest.raises(ValueError):
            params.flat[0] = 1.0

    def test_wrong_length(self):
        with pytest.raises(DimensionError):
            ParameterStore(NetworkSpec.mlp(3, [2], 2), np.zeros(5))

    def test_unflatten_roundtrip_many(self):
        rng = np.random.default_rng(0)
        spec = small_cnn()
        for _ in range(1000):
            params = ParameterStore(spec, rng.normal(size=spec.param_count))
            layers = params.unflatten()
            again = ParameterStore.from_layers(spec, [w for w, _ in layers], [b for _, b in layers])
            assert again.flat.tobytes() == params.flat.tobytes()

    def test_equality_ignores_tag(self):
        params = init_network(NetworkSpec.mlp(3, [2], 2), 0)
        assert params.retag("locked") == params


class TestIndexMap:
    def test_first_and_last(self):
        spec = NetworkSpec.mlp(3, [4], 2)
        assert index_map(spec, (0, "weight", 0, 0)) == 0
        assert index_map(spec, (1, "bias", 1, 0)) == spec.param_count - 1

    def test_ordering_convention(self):
        spec = NetworkSpec.mlp(3, [4], 2)
        assert index_map(spec, (0, "weight", 1, 0)) == 3
        assert index_map(spec, (0, "bias", 0, 0)) == 12
        assert index_map(spec, (1, "weight", 0, 0)) == 16

    @pytest.mark.parametrize("spec", [NetworkSpec.mlp(3, [4], 2), small_cnn()])
    def test_bijection(self, spec):
        seen = [index_map(spec, c) for c in iter_coordinates(spec)]
        assert seen == list(range(spec.param_count))
        for i in range(spec.param_count):
            assert index_map(spec, index_coordinate(spec, i)) == i

    @pytest.mark.parametrize("coord", [(2, "weight", 0, 0), (0, "weight", 4, 0), (0, "weight", 0, 3),
                                       (0, "bias", 4, 0), (0, "gain", 0, 0), (-1, "bias", 0, 0)])
    def test_out_of_range(self, coord):
        with pytest.raises(IndexError):
            index_map(NetworkSpec.mlp(3, [4], 2), coord)

    def test_inverse_out_of_range(self):
        spec = NetworkSpec.mlp(3, [4], 2)
        with pytest.raises(IndexError):
            index_coordinate(spec, spec.param_count)

    def test_matches_weight_view(self):
        spec = small_cnn()
        params = ParameterStore(spec, np.arange(spec.param_count, dtype=float))
        w = params.weight(1)
        # conv column = row-major index into (c_in, k, k)
        assert w[1, 2, 0, 1] == index_map(spec, (1, "weight", 1, 2 * 4 + 0 * 2 + 1))


class TestForward:
    def test_reference_constant(self, rng):
        spec = NetworkSpec.mlp(5, [6, 4], 3)
        c = np.array([0.3, -1.2, 2.5])
        flat = np.zeros(spec.param_count)
        _, b0, end = spec.offsets(2)
        flat[b0:end] = c
        params = ParameterStore(spec, flat)
        out = forward(spec, params, rng.normal(size=(100, 5)))
        np.testing.assert_array_equal(out, np.tile(c, (100, 1)))

    def test_identity_single_layer(self):
        spec = NetworkSpec.mlp(3, [], 3)
        params = ParameterStore.from_layers(spec, [np.eye(3)], [np.zeros(3)])
        np.testing.assert_array_equal(forward(spec, params, np.array([1.0, -2.0, 3.0])), [1.0, -2.0, 3.0])

    def test_golden_logits(self):
        spec = NetworkSpec.mlp(4, [5], 3)
        np.testing.assert_allclose(forward(spec, init_network(spec, 1234), GOLDEN_X), GOLDEN_LOGITS,
                                   rtol=1e-14)

    def test_golden_matches_plain_numpy(self):
        spec = NetworkSpec.mlp(4, [5], 3)
        rng = np.random.default_rng(1234)
        w1 = rng.normal(0, np.sqrt(2 / 4), size=(5, 4))
        w2 = rng.normal(0, np.sqrt(2 / 5), size=(3, 5))
        expected = w2 @ np.maximum(w1 @ GOLDEN_X, 0.0)
        np.testing.assert_allclose(forward(spec, init_network(spec, 1234), GOLDEN_X), expected, rtol=1e-14)

    def test_deterministic(self, rng):
        spec = small_cnn()
        params = init_network(spec, 2)
        x = rng.normal(size=(3, 2, 6, 6))
        assert forward(spec, params, x).tobytes() == forward(spec, params, x).tobytes()

    def test_shape_mismatch(self):
        spec = NetworkSpec.mlp(4, [5], 3)
        with pytest.raises(DimensionError):
            forward(spec, init_network(spec, 0), np.zeros(5))


class TestModelFile:
    def test_roundtrip(self):
        params = init_network(small_cnn(), 4).retag("pretrained")
        restored, header = decode_model(encode_model(params))
        assert restored == params
        assert restored.tag == "pretrained"
        assert header["spec"] == params.spec.to_dict()

    def test_layout(self):
        params = init_network(NetworkSpec.mlp(2, [], 2), 0)
        payload = encode_model(params)
        assert payload[:4] == b"ADLM"
        head_len = int.from_bytes(payload[6:10], "little")
        values = np.frombuffer(payload[10 + head_len:-32], dtype="<f8")
        np.testing.assert_array_equal(values, params.flat)

    def test_corruption_detected(self):
        payload = bytearray(encode_model(init_network(NetworkSpec.mlp(2, [], 2), 0)))
        payload[-40] ^= 0xFF
        with pytest.raises(ParseError):
            decode_model(bytes(payload))

    def test_bad_magic(self):
        payload = b"XXXX" + encode_model(init_network(NetworkSpec.mlp(2, [], 2), 0))[4:]
        with pytest.raises(ParseError, match="offset 0"):
            decode_model(payload)

    def test_hash_ignores_tag(self):
        params = init_network(NetworkSpec.mlp(2, [3], 2), 0)
        assert model_hash(params) == model_hash(params.retag("locked"))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=9, max_size=9))
    def test_values_roundtrip_exactly(self, values):
        spec = NetworkSpec.mlp(2, [], 3)
        params = ParameterStore(spec, values)
        assert decode_model(encode_model(params))[0].flat.tobytes() == params.flat.tobytes()
