import math

import numpy as np
import pytest

from ctcscst.errors import InvalidInputError, InvalidStateError
from ctcscst.gradcheck import TINY_MODEL, check_model, check_sepconv, numeric_grad, rel_error
from ctcscst.model import (
    ModelConfig,
    SepConvLayer,
    init_params,
    model_backward,
    model_forward,
    model_forward_batch,
    out_len,
    sepconv_forward,
)


def naive_sepconv(x, layer):
    """Channel-wise then pointwise convolution written as literal sums over every input position.

    s(i, j, d) = sum_f sum_t x(f, t, d) c(i*sf + pf - f, j*st + pt - t, d), with kernel
    taps outside [0, W) x [0, H) contributing nothing; pf, pt center the kernel.
    """
    F, T, D = x.shape
    c, w = layer.channelwise_weights, layer.pointwise_weights
    W, H, _ = c.shape
    N = w.shape[1]
    sf, st = layer.stride_f, layer.stride_t
    pf, pt = (W - 1) // 2, (H - 1) // 2
    Fo, To = math.ceil(F / sf), math.ceil(T / st)
    s = np.zeros((Fo, To, D))
    for i in range(Fo):
        for j in range(To):
            for d in range(D):
                acc = 0.0
                for f in range(F):
                    for t in range(T):
                        u, v = i * sf + pf - f, j * st + pt - t
                        if 0 <= u < W and 0 <= v < H:
                            acc += x[f, t, d] * c[u, v, d]
                s[i, j, d] = acc
    o = np.zeros((Fo, To, N))
    for i in range(Fo):
        for j in range(To):
            for n in range(N):
                o[i, j, n] = sum(s[i, j, k] * w[k, n] for k in range(D))
    if layer.activation == "relu":
        o = np.maximum(o, 0)
    if layer.has_residual:
        if layer.needs_projection:
            o = o + x[::sf, ::st] @ layer.projection_weights
        else:
            o = o + x
    return o


def random_layer(rng, D, N, W, H, sf, st, residual, activation="none"):
    return SepConvLayer(
        rng.normal(size=(W, H, D)),
        rng.normal(size=(D, N)),
        sf,
        st,
        has_residual=residual,
        projection_weights=rng.normal(size=(D, N)),
        activation=activation,
    )


def test_identity_kernel():
    layer = SepConvLayer(np.ones((1, 1, 1)), np.ones((1, 1)))
    assert sepconv_forward(np.full((1, 1, 1), 2.5), layer)[0, 0, 0] == 2.5
    assert sepconv_forward(np.full((1, 1, 1), -2.5), layer)[0, 0, 0] == -2.5


def test_zero_channelwise_weights(rng):
    x = rng.normal(size=(4, 5, 2))
    layer = SepConvLayer(np.zeros((3, 3, 2)), rng.normal(size=(2, 2)), has_residual=True, activation="relu")
    np.testing.assert_array_equal(sepconv_forward(x, layer), x)
    layer.has_residual = False
    np.testing.assert_array_equal(sepconv_forward(x, layer), np.zeros_like(x))


def test_matches_naive_example(rng):
    layer = random_layer(rng, D=2, N=3, W=3, H=3, sf=1, st=1, residual=False)
    x = rng.normal(size=(4, 5, 2))
    np.testing.assert_allclose(sepconv_forward(x, layer), naive_sepconv(x, layer), atol=1e-12)


def test_matches_naive_random_shapes():
    rng = np.random.default_rng(5)
    for _ in range(100):
        F, T = int(rng.integers(1, 6)), int(rng.integers(1, 7))
        D, N = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        W, H = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        sf, st = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        layer = random_layer(rng, D, N, W, H, sf, st, bool(rng.integers(2)), ["none", "relu"][int(rng.integers(2))])
        x = rng.normal(size=(F, T, D))
        out = sepconv_forward(x, layer)
        assert out.shape == (math.ceil(F / sf), math.ceil(T / st), N)
        np.testing.assert_allclose(out, naive_sepconv(x, layer), atol=1e-12)


def test_sepconv_shape_mismatch(rng):
    layer = random_layer(rng, 2, 3, 3, 3, 1, 1, False)
    with pytest.raises(InvalidInputError):
        sepconv_forward(rng.normal(size=(4, 5, 3)), layer)


def test_sepconv_backward_finite_differences():
    assert check_sepconv(seed=3) < 1e-6


def tiny_config(**kw):
    base = dict(n_features=4, n_classes=3, in_channels=1, conv_blocks=((3, 3, 3, 1, 1),), rnn_hidden=5)
    base.update(kw)
    return ModelConfig(**base)


def test_zero_everything_gives_zero_logits():
    params = init_params(tiny_config())
    for _, v in params.items():
        v[...] = 0
    logits, _ = model_forward(np.zeros((4, 7, 1)), params)
    assert logits.shape == (7, 3)
    np.testing.assert_array_equal(logits, 0)


def test_output_bias_shifts_logits(rng):
    params = init_params(tiny_config(), seed=2)
    x = rng.normal(size=(4, 7, 1))
    before, _ = model_forward(x, params)
    params["head.bias"][1] += 0.75
    after, _ = model_forward(x, params)
    np.testing.assert_allclose(after - before, np.tile([0, 0.75, 0], (7, 1)), atol=1e-12)


def test_forward_deterministic(rng):
    x = rng.normal(size=(4, 9, 1))
    a, _ = model_forward(x, init_params(tiny_config(), seed=3))
    b, _ = model_forward(x, init_params(tiny_config(), seed=3))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("strides", [(1,), (2,), (3,), (2, 2), (1, 3)])
@pytest.mark.parametrize("T", [1, 2, 5, 7, 12])
def test_time_striding_arithmetic(strides, T, rng):
    cfg = tiny_config(conv_blocks=tuple((3, 3, 3, 1, s) for s in strides))
    logits, _ = model_forward(rng.normal(size=(4, T, 1)), init_params(cfg))
    expected = T
    for s in strides:
        expected = math.ceil(expected / s)
    assert logits.shape[0] == expected == cfg.output_frames(T)
    assert out_len(T, strides[0]) == math.ceil(T / strides[0])


def test_batching_does_not_leak_padding(rng):
    cfg = tiny_config(conv_blocks=((3, 3, 3, 1, 1), (4, 3, 3, 2, 2)))
    params = init_params(cfg, seed=4)
    xs = [rng.normal(size=(4, T, 1)) for T in (3, 11, 6)]
    batched, _ = model_forward_batch(xs, params)
    for x, lb in zip(xs, batched):
        single, _ = model_forward(x, params)
        np.testing.assert_allclose(lb, single, atol=1e-12)


def test_zero_loss_grad_gives_zero_param_grads(rng):
    params = init_params(tiny_config(), seed=1)
    logits, cache = model_forward(rng.normal(size=(4, 6, 1)), params)
    grads = model_backward(cache, np.zeros_like(logits), params)
    for g in grads.values():
        assert not g.any()


def test_unused_channel_gets_zero_grad(rng):
    cfg = tiny_config(in_channels=2)
    params = init_params(cfg, seed=1)
    x = rng.normal(size=(4, 6, 2))
    x[..., 1] = 0.0  # second input channel carries nothing
    logits, cache = model_forward(x, params)
    grads = model_backward(cache, rng.normal(size=logits.shape), params)
    assert not grads["conv0.channelwise"][:, :, 1].any()
    assert not grads["conv0.pointwise"][1].any()
    assert grads["conv0.channelwise"][:, :, 0].any()


def test_stale_cache_rejected(rng):
    params = init_params(tiny_config(), seed=1)
    logits, cache = model_forward(rng.normal(size=(4, 6, 1)), params)
    params.touch()
    with pytest.raises(InvalidStateError):
        model_backward(cache, np.zeros_like(logits), params)
    other = init_params(tiny_config(), seed=1)
    with pytest.raises(InvalidStateError):
        model_backward(cache, np.zeros_like(logits), other)


def test_backward_matches_finite_differences_linear_probe(rng):
    params = init_params(TINY_MODEL, seed=9)
    x = rng.normal(size=(5, 7, 2))
    logits, cache = model_forward(x, params)
    probe = rng.normal(size=logits.shape)
    grads = model_backward(cache, probe, params)

    def f():
        return float(np.sum(model_forward(x, params)[0] * probe))

    for name, arr in params.items():
        assert rel_error(grads[name], numeric_grad(f, arr)) < 1e-5, name


def test_full_model_mixed_objective_gradcheck():
    assert TINY_MODEL.conv_blocks and init_params(TINY_MODEL).num_params <= 2000
    assert check_model(seed=1) < 1e-5


def test_dropout_train_and_inference(rng):
    cfg = tiny_config(input_dropout=0.1, conv_dropout=0.2, rnn_dropout=0.3)
    params = init_params(cfg, seed=1)
    x = rng.normal(size=(4, 6, 1))
    with pytest.raises(InvalidInputError):
        model_forward(x, params, train=True)
    a, cache = model_forward(x, params, train=True, rng=np.random.default_rng(0))
    b, _ = model_forward(x, params, train=True, rng=np.random.default_rng(0))
    assert np.array_equal(a, b)
    probe = rng.normal(size=a.shape)
    grads = model_backward(cache, probe, params)

    def f():
        return float(np.sum(model_forward(x, params, train=True, rng=np.random.default_rng(0))[0] * probe))

    for name, arr in params.items():
        assert rel_error(grads[name], numeric_grad(f, arr)) < 1e-5, name


def test_init_ranges():
    cfg = tiny_config(rnn_hidden=16)
    params = init_params(cfg, seed=0)
    for name in ("rnn.input", "rnn.recurrent"):
        assert np.abs(params[name]).max() <= 1 / 32
    bound = math.sqrt(6 / 9)
    assert np.abs(params["conv0.channelwise"]).max() <= bound
    assert not params["head.bias"].any()
