"""Central finite-difference checks for the loss layer, the conv block and the full model."""
from __future__ import annotations

import numpy as np

from .alphabet import Alphabet
from .ctc import ctc_forward, ctc_grad
from .model import (
    ModelConfig,
    SepConvLayer,
    init_params,
    model_backward,
    model_forward_batch,
    sepconv_backward,
    sepconv_forward,
)
from .policy import MixedLossConfig, mixed_loss
from .sampler import sample_path

H = 1e-5
# denominators below this are treated as this; keeps near-zero coordinates from dominating
REL_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar f() with respect to every entry of x (perturbed in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def random_target(rng, T: int, n_labels: int) -> tuple[int, ...]:
    while True:
        L = int(rng.integers(0, T + 1))
        y = tuple(int(v) for v in rng.integers(1, n_labels + 1, size=L))
        if L + sum(a == b for a, b in zip(y, y[1:])) <= T:
            return y


def check_ctc(seed: int = 0, trials: int = 20, T: int = 4, K: int = 3) -> float:
    """Worst relative error of ctc_grad against finite differences of -ctc_forward."""
    rng = np.random.default_rng(seed)
    alphabet = Alphabet(tuple("abcdefgh"[: K - 1]))
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(T, K))
        y = random_target(rng, T, K - 1)
        num = numeric_grad(lambda: -ctc_forward(x, y, alphabet), x)
        worst = max(worst, rel_error(ctc_grad(x, y, alphabet).grad, num))
    return worst


def check_sepconv(seed: int = 0, trials: int = 5) -> float:
    """Worst relative error of sepconv_backward for a random linear functional of the output."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    shapes = [(4, 5, 2, 3, 3, 3, 1, 1), (5, 7, 2, 3, 3, 2, 2, 2), (4, 6, 3, 3, 2, 3, 1, 2)]
    for trial in range(trials):
        F, T, D, N, W, Hh, sf, st = shapes[trial % len(shapes)]
        layer = SepConvLayer(
            rng.normal(size=(W, Hh, D)),
            rng.normal(size=(D, N)),
            sf,
            st,
            has_residual=True,
            projection_weights=rng.normal(size=(D, N)),
            activation="none",
        )
        x = rng.normal(size=(F, T, D))
        probe = rng.normal(size=sepconv_forward(x, layer).shape)

        def f():
            return float(np.sum(sepconv_forward(x, layer) * probe))

        dx, grads = sepconv_backward(x, layer, probe)
        worst = max(worst, rel_error(dx, numeric_grad(f, x)))
        for name, arr in (
            ("channelwise", layer.channelwise_weights),
            ("pointwise", layer.pointwise_weights),
            ("projection", layer.projection_weights),
        ):
            worst = max(worst, rel_error(grads[name], numeric_grad(f, arr)))
    return worst


TINY_MODEL = ModelConfig(
    n_features=5,
    n_classes=3,
    in_channels=2,
    conv_blocks=((3, 3, 3, 1, 1), (4, 3, 2, 2, 2)),
    rnn_hidden=4,
)


def _kink_margin(cache) -> float:
    # exact zeros come from padded frames, which are masked out anyway
    vals = np.concatenate([np.abs(c[3]).ravel() for c in cache.conv])
    vals = vals[vals > 0]
    return float(vals.min()) if vals.size else np.inf


def check_model(seed: int = 0, lam: float = 0.7, config: ModelConfig = TINY_MODEL) -> float:
    """Worst relative error over every parameter of the mixed objective on a tiny model.

    The policy samples are drawn once and frozen so the objective is a
    deterministic function of the parameters. Instances whose ReLU
    pre-activations sit within finite-difference reach of the kink are
    skipped, since the derivative is undefined there.
    """
    alphabet = Alphabet(tuple("abcdefgh"[: config.n_classes - 1]))
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, attempt])
        params = init_params(config, seed=seed + 1000 * attempt)
        for _, v in params.items():
            v[...] = rng.normal(size=v.shape) * 0.5
        xs = [rng.normal(size=(config.n_features, T, config.in_channels)) for T in (9, 6)]
        logits, cache = model_forward_batch(xs, params)
        if config.activation == "none" or _kink_margin(cache) > 1e-3:
            break
        attempt += 1
        if attempt > 100:
            raise RuntimeError("no kink-free instance found")
    refs = [random_target(rng, lg.shape[0], config.n_classes - 1) for lg in logits]
    draws = [sample_path(lg, [seed, i]) for i, lg in enumerate(logits)]
    mix = MixedLossConfig(lam=lam)

    def objective():
        lgs, _ = model_forward_batch(xs, params)
        return sum(mixed_loss(lg, r, alphabet, mix, draws=d).loss for lg, r, d in zip(lgs, refs, draws))

    logits, cache = model_forward_batch(xs, params)
    grads = model_backward(cache, [mixed_loss(lg, r, alphabet, mix, draws=d) for lg, r, d in zip(logits, refs, draws)], params)
    worst = 0.0
    for name, arr in params.items():
        worst = max(worst, rel_error(grads[name], numeric_grad(objective, arr)))
    return worst


def run_all(seed: int = 0) -> dict:
    return {"ctc": check_ctc(seed), "sepconv": check_sepconv(seed), "model": check_model(seed)}
