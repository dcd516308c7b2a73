import numpy as np
import pytest

from timearrow import autodiff as ad
from timearrow import network
from timearrow.network import ConfigError, ModelConfig

from conftest import TINY_CONFIG


def tiny_params(seed=0):
    return network.init_params(TINY_CONFIG, seed)


def tiny_windows(rng, n_windows=3):
    return rng.standard_normal(
        (n_windows, TINY_CONFIG.components, TINY_CONFIG.window_len)).astype(np.float32)


# ---------------------------------------------------------------------------
# config


def test_default_config_conv_length_trace():
    config = ModelConfig()
    assert config.conv_lengths == (17, 14, 12)
    assert config.flat_dim == 200 * 12
    assert config.context_dim == 400


def test_config_rejects_too_small_window():
    with pytest.raises(ConfigError, match="too short"):
        ModelConfig(window_len=8)  # 8 - 3 - 3 - 2 < 1


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        ModelConfig(n_classes=1)
    with pytest.raises(ConfigError):
        ModelConfig(leaky_slope=1.5)
    with pytest.raises(ConfigError):
        ModelConfig(components=0)


def test_config_text_round_trip():
    config = ModelConfig(components=7, window_len=12, conv_kernels=(3, 3, 3), leaky_slope=0.02)
    assert ModelConfig.from_text(config.to_text()) == config


# ---------------------------------------------------------------------------
# parameters


def test_init_params_is_deterministic():
    a = network.init_params(TINY_CONFIG, seed=9)
    b = network.init_params(TINY_CONFIG, seed=9)
    assert set(a) == set(b)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_conv1_shape_and_count_at_paper_scale():
    config = ModelConfig()
    params = network.init_params(config, seed=0)
    assert params["conv1.weight"].dims == (64, 53, 4)
    assert params["conv1.weight"].size + params["conv1.bias"].size == 13632


def test_lstm_direction_parameter_count():
    config = ModelConfig()
    params = network.init_params(config, seed=0)
    one_direction = sum(params[f"lstm_fwd.{k}"].size for k in ("w_ih", "w_hh", "bias"))
    assert one_direction == 4 * (200 * (256 + 200) + 200) == 365600
    both = one_direction + sum(params[f"lstm_bwd.{k}"].size for k in ("w_ih", "w_hh", "bias"))
    assert both == 731200


def test_param_count_matches_realized_sizes():
    rng = np.random.default_rng(3)
    for _ in range(20):
        kernels = tuple(int(k) for k in rng.integers(1, 4, size=3))
        config = ModelConfig(
            components=int(rng.integers(1, 8)),
            window_len=int(rng.integers(sum(kernels), sum(kernels) + 10)),
            conv_channels=tuple(int(c) for c in rng.integers(1, 8, size=3)),
            conv_kernels=kernels,
            encoder_dim=int(rng.integers(2, 10)),
            lstm_hidden=int(rng.integers(2, 10)),
            attention_dim=int(rng.integers(2, 10)),
            head_hidden=int(rng.integers(2, 10)),
        )
        params = network.init_params(config, seed=0)
        assert network.param_count(config) == sum(t.size for t in params.values())


def test_forget_gate_bias_is_one():
    params = tiny_params()
    h = TINY_CONFIG.lstm_hidden
    for direction in ("fwd", "bwd"):
        bias = params[f"lstm_{direction}.bias"].data
        np.testing.assert_array_equal(bias[h:2 * h], 1.0)
        np.testing.assert_array_equal(bias[:h], 0.0)
        np.testing.assert_array_equal(bias[2 * h:], 0.0)


# ---------------------------------------------------------------------------
# encoder


def test_encoder_output_dims(rng):
    params = tiny_params()
    single = network.encoder_forward(
        ad.Tensor(tiny_windows(rng)[0]), params, TINY_CONFIG)
    assert single.dims == (TINY_CONFIG.encoder_dim,)
    batch = network.encoder_forward(ad.Tensor(tiny_windows(rng)), params, TINY_CONFIG)
    assert batch.dims == (3, TINY_CONFIG.encoder_dim)


def test_encoder_default_scale_latent_is_256(rng):
    config = ModelConfig()
    params = network.init_params(config, seed=0)
    window = ad.Tensor(rng.standard_normal((53, 20)).astype(np.float32))
    assert network.encoder_forward(window, params, config).dims == (256,)


def test_encoder_zero_params_give_zero_latent(rng):
    params = {k: ad.parameter(np.zeros_like(t.data)) for k, t in tiny_params().items()}
    out = network.encoder_forward(ad.Tensor(tiny_windows(rng)[0]), params, TINY_CONFIG)
    np.testing.assert_array_equal(out.data, 0.0)


def test_encoder_rejects_bad_dims(rng):
    with pytest.raises(ad.ShapeError):
        network.encoder_forward(
            ad.Tensor(rng.standard_normal((5, 5)).astype(np.float32)), tiny_params(), TINY_CONFIG)


# ---------------------------------------------------------------------------
# bilstm


def test_bilstm_output_dims(rng):
    params = tiny_params()
    latents = ad.Tensor(rng.standard_normal((6, TINY_CONFIG.encoder_dim)).astype(np.float32))
    out = network.bilstm_forward(latents, params, TINY_CONFIG)
    assert out.dims == (6, TINY_CONFIG.context_dim)


def test_bilstm_single_step(rng):
    params = tiny_params()
    latents = ad.Tensor(rng.standard_normal((1, TINY_CONFIG.encoder_dim)).astype(np.float32))
    out = network.bilstm_forward(latents, params, TINY_CONFIG)
    assert out.dims == (1, TINY_CONFIG.context_dim)


def test_bilstm_reversal_swaps_direction_roles(rng):
    """Running the reversed sequence through swapped directional parameters
    reproduces the original outputs with the two halves exchanged."""
    params = tiny_params(seed=4)
    swapped = dict(params)
    for key in ("w_ih", "w_hh", "bias"):
        swapped[f"lstm_fwd.{key}"] = params[f"lstm_bwd.{key}"]
        swapped[f"lstm_bwd.{key}"] = params[f"lstm_fwd.{key}"]
    h = TINY_CONFIG.lstm_hidden
    latents = rng.standard_normal((5, TINY_CONFIG.encoder_dim)).astype(np.float32)
    base = network.bilstm_forward(ad.Tensor(latents), params, TINY_CONFIG).data
    flipped = network.bilstm_forward(ad.Tensor(latents[::-1].copy()), swapped, TINY_CONFIG).data
    np.testing.assert_array_equal(flipped[:, :h], base[::-1, h:])
    np.testing.assert_array_equal(flipped[:, h:], base[::-1, :h])


# ---------------------------------------------------------------------------
# attention


def test_attention_single_step_is_identity(rng):
    params = tiny_params()
    row = rng.standard_normal((1, TINY_CONFIG.context_dim)).astype(np.float32)
    out = network.attention_forward(ad.Tensor(row), params, TINY_CONFIG)
    np.testing.assert_array_equal(out.data, row[0])


def test_attention_identical_rows_give_uniform_weights(rng):
    params = tiny_params()
    row = rng.standard_normal((1, TINY_CONFIG.context_dim)).astype(np.float32)
    h_seq = np.repeat(row, 4, axis=0)
    out = network.attention_forward(ad.Tensor(h_seq), params, TINY_CONFIG)
    np.testing.assert_allclose(out.data, row[0], rtol=1e-5)


def test_attention_weights_sum_to_one(rng):
    params = tiny_params()
    for _ in range(10):
        h_seq = ad.Tensor(rng.standard_normal((7, TINY_CONFIG.context_dim)).astype(np.float32))
        hidden = ad.tanh(ad.matmul(h_seq, ad.transpose(params["attention.w"])))
        scores = ad.matmul(hidden, ad.reshape(params["attention.v"], (TINY_CONFIG.attention_dim, 1)))
        weights = ad.softmax(ad.reshape(scores, (7,)))
        assert np.all(weights.data >= 0)
        assert abs(float(weights.data.sum()) - 1.0) <= 1e-6


# ---------------------------------------------------------------------------
# classifier and full model


def test_classifier_outputs_probability_pair(rng):
    params = tiny_params()
    context = ad.Tensor(rng.standard_normal(TINY_CONFIG.context_dim).astype(np.float32))
    out = network.classifier_forward(context, params, TINY_CONFIG)
    assert out.dims == (2,)
    assert abs(float(out.data.sum()) - 1.0) <= 1e-6


def test_zero_params_give_exactly_uniform_output(rng):
    params = {k: ad.parameter(np.zeros_like(t.data)) for k, t in tiny_params().items()}
    probs = network.model_forward(tiny_windows(rng), params, TINY_CONFIG)
    np.testing.assert_array_equal(probs.data, [0.5, 0.5])


def test_model_forward_paper_scale_shapes(rng):
    config = ModelConfig()
    params = network.init_params(config, seed=1)
    windows = rng.standard_normal((7, 53, 20)).astype(np.float32)
    probs = network.model_forward(windows, params, config)
    assert probs.dims == (2,)
    assert np.all(probs.data > 0) and np.all(probs.data < 1)
    assert abs(float(probs.data.sum()) - 1.0) <= 1e-6


def test_model_forward_deterministic(rng):
    params = tiny_params(seed=2)
    windows = tiny_windows(rng)
    one = network.model_forward(windows, params, TINY_CONFIG).data
    two = network.model_forward(windows, params, TINY_CONFIG).data
    np.testing.assert_array_equal(one, two)


def test_model_forward_rejects_bad_window_dims(rng):
    params = tiny_params()
    with pytest.raises(ad.ShapeError):
        network.model_forward(rng.standard_normal((3, 2, 8)).astype(np.float32),
                              params, TINY_CONFIG)


def test_end_to_end_gradients_match_finite_differences():
    # seeds chosen so no probed leaky-relu preactivation sits within eps of
    # its kink (a straddled kink invalidates the central difference itself)
    params = tiny_params(seed=2)
    windows32 = tiny_windows(np.random.default_rng(2))

    def forward(p):
        dtype = next(iter(p.values())).data.dtype
        x = ad.Tensor(windows32.astype(dtype), dtype=dtype)
        probs = network.model_forward(x, p, TINY_CONFIG)
        return ad.cross_entropy(probs, 1)

    err = ad.finite_difference_check(forward, params, eps=1e-3, samples_per_tensor=10)
    assert err <= 1e-4


def test_init_head_matches_init_params_shapes():
    head = network.init_head(TINY_CONFIG, seed=3)
    params = tiny_params()
    for name, arr in head.items():
        assert arr.shape == params[name].dims
