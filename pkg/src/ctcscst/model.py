"""Depthwise separable conv blocks + GRU + linear head, with hand-written backprop.

Feature maps are laid out frequency x time x channels. Internally every
function works on a leading batch axis; utterances of different length are
zero-padded in time and re-masked after each conv block so that padding
never leaks into valid frames.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, InvalidStateError


def out_len(n: int, stride: int) -> int:
    """Output length of a same-padded strided axis."""
    return -(-n // stride)


@dataclass(frozen=True)
class ConvBlockSpec:
    """(channels, filter_f, filter_t, stride_f, stride_t)."""

    channels: int
    filter_f: int
    filter_t: int
    stride_f: int = 1
    stride_t: int = 1

    @classmethod
    def coerce(cls, value) -> "ConvBlockSpec":
        if isinstance(value, cls):
            return value
        if isinstance(value, dict):
            return cls(**value)
        return cls(*[int(v) for v in value])

    def as_list(self) -> list[int]:
        return [self.channels, self.filter_f, self.filter_t, self.stride_f, self.stride_t]


@dataclass(frozen=True)
class ModelConfig:
    n_features: int
    n_classes: int
    in_channels: int = 1
    conv_blocks: tuple = (ConvBlockSpec(8, 3, 3, 1, 1),)
    rnn_hidden: int = 32
    activation: str = "relu"
    # dropout on layer inputs; 0 disables
    input_dropout: float = 0.0
    conv_dropout: float = 0.0
    rnn_dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(ConvBlockSpec.coerce(b) for b in self.conv_blocks))
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        for p in (self.input_dropout, self.conv_dropout, self.rnn_dropout):
            if not 0.0 <= p < 1.0:
                raise InvalidInputError("dropout probabilities must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
            "conv_blocks": [b.as_list() for b in self.conv_blocks],
            "rnn_hidden": self.rnn_hidden,
            "activation": self.activation,
            "input_dropout": self.input_dropout,
            "conv_dropout": self.conv_dropout,
            "rnn_dropout": self.rnn_dropout,
        }

    def time_stride(self) -> int:
        return math.prod(b.stride_t for b in self.conv_blocks)

    def output_frames(self, T: int) -> int:
        for b in self.conv_blocks:
            T = out_len(T, b.stride_t)
        return T


def _identity(x):
    return x


def _relu(x):
    return np.maximum(x, 0.0)


ACTIVATIONS = {"none": (_identity, lambda o: np.ones_like(o)), "relu": (_relu, lambda o: (o > 0).astype(o.dtype))}


@dataclass
class SepConvLayer:
    """Channel-wise W x H x D kernel followed by a D x N pointwise mix.

    Strides apply to the channel-wise stage only. With ``has_residual`` the
    input is added back, through ``projection`` (a strided 1 x 1 conv) when
    the shape changes.
    """

    channelwise_weights: np.ndarray
    pointwise_weights: np.ndarray
    stride_f: int = 1
    stride_t: int = 1
    has_residual: bool = False
    projection_weights: np.ndarray | None = None
    activation: str = "none"

    @property
    def in_channels(self) -> int:
        return self.channelwise_weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.pointwise_weights.shape[1]

    @property
    def needs_projection(self) -> bool:
        return self.has_residual and (
            self.in_channels != self.out_channels or self.stride_f != 1 or self.stride_t != 1
        )


def _pads(size: int, out: int, k: int, stride: int) -> tuple[int, int]:
    lo = k - 1 - (k - 1) // 2
    hi = max(0, stride * (out - 1) + k - size - lo)
    return lo, hi


def _sepconv_fwd(x: np.ndarray, layer: SepConvLayer):
    B, F, T, D = x.shape
    c = layer.channelwise_weights
    W, H, Dc = c.shape
    if Dc != D or layer.pointwise_weights.shape[0] != D:
        raise InvalidInputError(f"layer expects {Dc} input channels, got {D}")
    if layer.needs_projection and (
        layer.projection_weights is None or layer.projection_weights.shape != layer.pointwise_weights.shape
    ):
        raise InvalidInputError("shape-changing residual needs a D x N projection")
    sf, st = layer.stride_f, layer.stride_t
    Fo, To = out_len(F, sf), out_len(T, st)
    lo_f, hi_f = _pads(F, Fo, W, sf)
    lo_t, hi_t = _pads(T, To, H, st)
    xp = np.pad(x, ((0, 0), (lo_f, hi_f), (lo_t, hi_t), (0, 0)))
    # the kernel enters flipped: true convolution, not correlation
    cf = c[::-1, ::-1]
    s = np.zeros((B, Fo, To, D))
    for u in range(W):
        for v in range(H):
            s += xp[:, u : u + sf * (Fo - 1) + 1 : sf, v : v + st * (To - 1) + 1 : st, :] * cf[u, v]
    o = s @ layer.pointwise_weights
    act, _ = ACTIVATIONS[layer.activation]
    out = act(o)
    xs = None
    if layer.has_residual:
        if layer.needs_projection:
            xs = x[:, ::sf, ::st, :]
            out = out + xs @ layer.projection_weights
        else:
            out = out + x
    cache = (x.shape, xp, s, o, xs, (lo_f, lo_t))
    return out, cache


def _sepconv_bwd(dout: np.ndarray, cache, layer: SepConvLayer):
    (B, F, T, D), xp, s, o, xs, (lo_f, lo_t) = cache
    _, dact = ACTIVATIONS[layer.activation]
    c = layer.channelwise_weights
    W, H, _ = c.shape
    sf, st = layer.stride_f, layer.stride_t
    Fo, To = s.shape[1], s.shape[2]
    do = dout * dact(o)
    grads = {"pointwise": np.einsum("bftd,bftn->dn", s, do)}
    ds = do @ layer.pointwise_weights.T
    cf = c[::-1, ::-1]
    dcf = np.zeros_like(c)
    dxp = np.zeros_like(xp)
    for u in range(W):
        for v in range(H):
            sl = (slice(None), slice(u, u + sf * (Fo - 1) + 1, sf), slice(v, v + st * (To - 1) + 1, st))
            dcf[u, v] = np.einsum("bftd,bftd->d", xp[sl], ds)
            dxp[sl] += ds * cf[u, v]
    grads["channelwise"] = dcf[::-1, ::-1].copy()
    dx = dxp[:, lo_f : lo_f + F, lo_t : lo_t + T, :].copy()
    if layer.has_residual:
        if layer.needs_projection:
            grads["projection"] = np.einsum("bftd,bftn->dn", xs, dout)
            dx[:, ::sf, ::st, :] += dout @ layer.projection_weights.T
        else:
            dx += dout
    return dx, grads


def sepconv_forward(x, layer: SepConvLayer) -> np.ndarray:
    """Depthwise separable convolution of one F x T x D feature map (same padding)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidInputError(f"feature map must be F x T x D, got shape {x.shape}")
    out, _ = _sepconv_fwd(x[None], layer)
    return out[0]


def sepconv_backward(x, layer: SepConvLayer, dout) -> tuple[np.ndarray, dict]:
    """Gradients of <dout, sepconv_forward(x)> w.r.t. the input and the layer weights."""
    x = np.asarray(x, dtype=np.float64)
    _, cache = _sepconv_fwd(x[None], layer)
    dx, grads = _sepconv_bwd(np.asarray(dout, dtype=np.float64)[None], cache, layer)
    return dx[0], grads


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ModelParams:
    """Named parameter arrays in a fixed order, plus the config that fixes their shapes.

    ``version`` is bumped by every in-place update so that stale forward
    caches can be detected.
    """

    def __init__(self, config: ModelConfig, arrays: "OrderedDict[str, np.ndarray]"):
        self.config = config
        self.arrays = arrays
        self.version = 0
        expected = param_shapes(config)
        if list(arrays) != list(expected):
            raise InvalidInputError(f"parameter names {list(arrays)} do not match {list(expected)}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise InvalidInputError(f"{name}: shape {arrays[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "ModelParams":
        p = ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))
        p.version = self.version
        return p

    def conv_layer(self, i: int) -> SepConvLayer:
        spec = self.config.conv_blocks[i]
        proj = self.arrays.get(f"conv{i}.projection")
        return SepConvLayer(
            channelwise_weights=self.arrays[f"conv{i}.channelwise"],
            pointwise_weights=self.arrays[f"conv{i}.pointwise"],
            stride_f=spec.stride_f,
            stride_t=spec.stride_t,
            has_residual=True,
            projection_weights=proj,
            activation=self.config.activation,
        )

    def zeros_like(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.arrays.items())


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    shapes: OrderedDict[str, tuple] = OrderedDict()
    D = config.in_channels
    for i, b in enumerate(config.conv_blocks):
        shapes[f"conv{i}.channelwise"] = (b.filter_f, b.filter_t, D)
        shapes[f"conv{i}.pointwise"] = (D, b.channels)
        if D != b.channels or b.stride_f != 1 or b.stride_t != 1:
            shapes[f"conv{i}.projection"] = (D, b.channels)
        D = b.channels
    Hd = config.rnn_hidden
    shapes["rnn.input"] = (D, 3 * Hd)
    shapes["rnn.recurrent"] = (Hd, 3 * Hd)
    shapes["rnn.bias"] = (3 * Hd,)
    shapes["head.weight"] = (Hd, config.n_classes)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """He-style uniform init for conv and linear weights, U(-1/32, 1/32) for the GRU, zero biases."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    arrays = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith("bias"):
            arrays[name] = np.zeros(shape)
        elif name.startswith("rnn."):
            arrays[name] = rng.uniform(-1 / 32, 1 / 32, size=shape)
        else:
            if name.endswith("channelwise"):
                fan_in = shape[0] * shape[1]
            else:
                fan_in = shape[0]
            bound = math.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays)


@dataclass
class ForwardCache:
    params_id: int
    params_version: int
    lengths: list
    out_lengths: list
    conv: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    drop: dict = field(default_factory=dict)
    pooled_shape: tuple = ()
    gru: tuple = ()
    hidden: np.ndarray | None = None


def _dropout_mask(rng, p, shape):
    return (rng.random(shape) >= p).astype(np.float64)


def _apply_dropout(x, p, train, rng, cache: ForwardCache, key):
    if p == 0.0:
        return x
    if not train:
        return x * (1.0 - p)
    mask = _dropout_mask(rng, p, x.shape)
    cache.drop[key] = mask
    return x * mask


def _undo_dropout(dx, p, cache: ForwardCache, key):
    if p == 0.0:
        return dx
    return dx * cache.drop[key]


def _stack(inputs: Sequence[np.ndarray], config: ModelConfig):
    xs = []
    for x in inputs:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != config.n_features or x.shape[2] != config.in_channels:
            raise InvalidInputError(
                f"expected F x T x D = {config.n_features} x T x {config.in_channels}, got {x.shape}"
            )
        if x.shape[1] < 1 or not np.all(np.isfinite(x)):
            raise InvalidInputError("feature maps need T >= 1 and finite values")
        xs.append(x)
    lengths = [x.shape[1] for x in xs]
    Tmax = max(lengths)
    batch = np.zeros((len(xs), config.n_features, Tmax, config.in_channels))
    for b, x in enumerate(xs):
        batch[b, :, : x.shape[1]] = x
    return batch, lengths


def model_forward_batch(inputs: Sequence[np.ndarray], params: ModelParams, *, train: bool = False, rng=None):
    """Run a list of F x T x D feature maps; returns per-utterance T' x K logits and one cache."""
    cfg = params.config
    if not inputs:
        raise InvalidInputError("empty batch")
    x, lengths = _stack(inputs, cfg)
    if train and rng is None and (cfg.input_dropout or cfg.conv_dropout or cfg.rnn_dropout):
        raise InvalidInputError("training-mode dropout needs an rng")
    cache = ForwardCache(id(params), params.version, lengths, [])
    x = _apply_dropout(x, cfg.input_dropout, train, rng, cache, "input")
    cur = list(lengths)
    for i, spec in enumerate(cfg.conv_blocks):
        if i > 0:
            x = _apply_dropout(x, cfg.conv_dropout, train, rng, cache, f"conv{i}")
        x, c = _sepconv_fwd(x, params.conv_layer(i))
        cur = [out_len(n, spec.stride_t) for n in cur]
        mask = (np.arange(x.shape[2])[None, :] < np.array(cur)[:, None]).astype(np.float64)
        mask = mask[:, None, :, None]
        x = x * mask
        cache.conv.append(c)
        cache.masks.append(mask)
    cache.out_lengths = cur
    cache.pooled_shape = x.shape
    h_in = x.mean(axis=1)  # (B, T', N)
    h_in = _apply_dropout(h_in, cfg.rnn_dropout, train, rng, cache, "rnn")

    Wx, U, bias = params["rnn.input"], params["rnn.recurrent"], params["rnn.bias"]
    Hd = cfg.rnn_hidden
    B, Tn, _ = h_in.shape
    xw = h_in @ Wx + bias
    h = np.zeros((B, Hd))
    hs = np.empty((B, Tn, Hd))
    zs, rs, ns, hps = (np.empty((B, Tn, Hd)) for _ in range(4))
    Uzr, Un = U[:, : 2 * Hd], U[:, 2 * Hd :]
    for t in range(Tn):
        a = xw[:, t]
        hu = h @ Uzr
        z = _sigmoid(a[:, :Hd] + hu[:, :Hd])
        r = _sigmoid(a[:, Hd : 2 * Hd] + hu[:, Hd:])
        n = np.tanh(a[:, 2 * Hd :] + (r * h) @ Un)
        hps[:, t] = h
        h = (1.0 - z) * n + z * h
        zs[:, t], rs[:, t], ns[:, t], hs[:, t] = z, r, n, h
    cache.gru = (h_in, zs, rs, ns, hps)
    head_in = _apply_dropout(hs, cfg.rnn_dropout, train, rng, cache, "head")
    cache.hidden = head_in
    logits = head_in @ params["head.weight"] + params["head.bias"]
    return [logits[b, :n] for b, n in enumerate(cur)], cache


def model_forward(x, params: ModelParams, *, train: bool = False, rng=None):
    """Single utterance: F x T x D features to T' x K logits plus the activation cache."""
    logits, cache = model_forward_batch([x], params, train=train, rng=rng)
    return logits[0], cache


def model_backward(cache: ForwardCache, loss_grads, params: ModelParams) -> "OrderedDict[str, np.ndarray]":
    """Chain rule from per-utterance logit gradients to every parameter.

    ``loss_grads`` is a LossGrad / array, or a list of them matching the batch.
    """
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise InvalidStateError("forward cache does not belong to these parameters (stale or mismatched)")
    if not isinstance(loss_grads, (list, tuple)):
        loss_grads = [loss_grads]
    if len(loss_grads) != len(cache.out_lengths):
        raise InvalidStateError("number of logit gradients does not match the cached batch")
    cfg = params.config
    Hd = cfg.rnn_hidden
    head_in = cache.hidden
    B, Tn, _ = head_in.shape
    dlogits = np.zeros((B, Tn, cfg.n_classes))
    for b, lg in enumerate(loss_grads):
        g = np.asarray(getattr(lg, "grad", lg), dtype=np.float64)
        if g.shape != (cache.out_lengths[b], cfg.n_classes):
            raise InvalidStateError(f"logit gradient {b} has shape {g.shape}")
        dlogits[b, : g.shape[0]] = g
    grads = params.zeros_like()
    grads["head.weight"] = np.einsum("bth,btk->hk", head_in, dlogits)
    grads["head.bias"] = dlogits.sum(axis=(0, 1))
    dhs = _undo_dropout(dlogits @ params["head.weight"].T, cfg.rnn_dropout, cache, "head")

    h_in, zs, rs, ns, hps = cache.gru
    U = params["rnn.recurrent"]
    Uzr, Un = U[:, : 2 * Hd], U[:, 2 * Hd :]
    dxw = np.empty((B, Tn, 3 * Hd))
    dUzr = np.zeros_like(Uzr)
    dUn = np.zeros_like(Un)
    dh = np.zeros((B, Hd))
    for t in range(Tn - 1, -1, -1):
        dh = dh + dhs[:, t]
        z, r, n, hp = zs[:, t], rs[:, t], ns[:, t], hps[:, t]
        dan = dh * (1.0 - z) * (1.0 - n * n)
        daz = dh * (hp - n) * z * (1.0 - z)
        dhr = dan @ Un.T
        dar = dhr * hp * r * (1.0 - r)
        dUn += (r * hp).T @ dan
        dzr = np.concatenate([daz, dar], axis=1)
        dUzr += hp.T @ dzr
        dh = dh * z + dhr * r + dzr @ Uzr.T
        dxw[:, t, :Hd] = daz
        dxw[:, t, Hd : 2 * Hd] = dar
        dxw[:, t, 2 * Hd :] = dan
    grads["rnn.recurrent"] = np.concatenate([dUzr, dUn], axis=1)
    grads["rnn.input"] = np.einsum("btd,bth->dh", h_in, dxw)
    grads["rnn.bias"] = dxw.sum(axis=(0, 1))
    dh_in = _undo_dropout(dxw @ params["rnn.input"].T, cfg.rnn_dropout, cache, "rnn")

    Fo = cache.pooled_shape[1]
    dx = np.broadcast_to(dh_in[:, None, :, :] / Fo, cache.pooled_shape)
    for i in range(len(cfg.conv_blocks) - 1, -1, -1):
        dx = dx * cache.masks[i]
        dx, g = _sepconv_bwd(dx, cache.conv[i], params.conv_layer(i))
        for k, v in g.items():
            grads[f"conv{i}.{k}"] = v
        if i > 0:
            dx = _undo_dropout(dx, cfg.conv_dropout, cache, f"conv{i}")
    return grads
