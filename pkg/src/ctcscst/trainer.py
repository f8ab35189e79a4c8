"""Mini-batch training on the mixed CTC + policy-gradient objective.

Optimizer recipe: SGD with Nesterov momentum, global-norm clipping, L2
weight decay folded into the gradient, and learning-rate halving when the
validation CTC loss plateaus. The first plateau also switches the policy
weight from ``lambda_initial`` to ``lambda_final``.
"""
from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .alphabet import Alphabet
from .ctc import ctc_grad_batch
from .data import Record, validate_records
from .errors import InvalidInputError, NonFiniteGradientError
from .metrics import corpus_stats, split_words
from .model import ModelConfig, ModelParams, init_params, model_backward, model_forward_batch, param_shapes
from .policy import MixedLossConfig, mixed_loss_batch
from .sampler import RNG_ALGORITHM, greedy_decode
from .decoder import beam_search

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ctcscst-checkpoint"
CHECKPOINT_VERSION = 1

# spawn-key namespaces for the per-run seed tree
_SHUFFLE, _SAMPLE, _DROPOUT = 1, 2, 3


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.95
    clip_norm: float = 1.0
    weight_decay: float = 1e-5
    lambda_initial: float = 0.1
    lambda_final: float = 1.0
    plateau_patience: int = 2
    epsilon_improve: float = 1e-3
    seed: int = 0
    max_epochs: int = 20
    use_scst: bool = True
    num_samples: int = 1
    # model shape; n_features and n_classes come from the data
    conv_blocks: list = field(default_factory=lambda: [[8, 3, 3, 1, 1]])
    rnn_hidden: int = 32
    activation: str = "relu"
    input_dropout: float = 0.0
    conv_dropout: float = 0.0
    rnn_dropout: float = 0.0

    def __post_init__(self):
        for name in ("learning_rate", "clip_norm", "batch_size", "max_epochs"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.plateau_patience < 1:
            raise InvalidInputError("plateau_patience must be at least 1")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.epsilon_improve < 0:
            raise InvalidInputError("weight_decay and epsilon_improve must be non-negative")
        if self.lambda_initial < 0 or self.lambda_final < 0:
            raise InvalidInputError("lambda values must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, n_features: int, n_classes: int, in_channels: int = 1) -> ModelConfig:
        return ModelConfig(
            n_features=n_features,
            n_classes=n_classes,
            in_channels=in_channels,
            conv_blocks=tuple(self.conv_blocks),
            rnn_hidden=self.rnn_hidden,
            activation=self.activation,
            input_dropout=self.input_dropout,
            conv_dropout=self.conv_dropout,
            rnn_dropout=self.rnn_dropout,
        )


@dataclass
class TrainState:
    params: ModelParams
    velocity: "OrderedDict[str, np.ndarray]"
    lr: float
    lam: float
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    plateau_count: int = 0
    lambda_switched: bool = False
    skipped_steps: int = 0
    seed: int = 0

    @classmethod
    def initial(cls, params: ModelParams, config: TrainConfig) -> "TrainState":
        return cls(
            params=params,
            velocity=params.zeros_like(),
            lr=config.learning_rate,
            lam=config.lambda_initial,
            seed=config.seed,
        )


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: "OrderedDict[str, np.ndarray]", clip_norm: float):
    """Rescale all gradients together so their global L2 norm is at most ``clip_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteGradientError("non-finite gradient norm")
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return OrderedDict((k, g * scale) for k, g in grads.items())


def sgd_nesterov_step(state: TrainState, grads, momentum: float, weight_decay: float) -> TrainState:
    """In-place Nesterov update with weight decay added to the gradient:

    v <- mu v - lr (g + wd theta);  theta <- theta + mu v - lr (g + wd theta)
    """
    lr = state.lr
    for name, theta in state.params.items():
        d = grads[name] + weight_decay * theta
        v = state.velocity[name]
        v *= momentum
        v -= lr * d
        theta += momentum * v - lr * d
    state.params.touch()
    state.step += 1
    return state


def plateau_scheduler(state: TrainState, val_loss: float, config: TrainConfig) -> TrainState:
    """Track validation progress; halve the lr and switch lambda after ``plateau_patience`` flat epochs."""
    if not math.isfinite(val_loss):
        raise InvalidInputError("validation loss must be finite")
    if val_loss < state.best_val - config.epsilon_improve * abs(state.best_val) or not math.isfinite(state.best_val):
        state.best_val = val_loss
        state.plateau_count = 0
        return state
    state.plateau_count += 1
    if state.plateau_count >= config.plateau_patience:
        state.lr *= 0.5
        state.plateau_count = 0
        if not state.lambda_switched:
            state.lam = max(state.lam, config.lambda_final)
            state.lambda_switched = True
        log.info("plateau at epoch %d: lr -> %g, lambda -> %g", state.epoch, state.lr, state.lam)
    return state


def _seed(state_seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(state_seed, spawn_key=tuple(key))


def _batched(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def evaluate(
    params: ModelParams,
    records: Sequence[Record],
    alphabet: Alphabet,
    *,
    batch_size: int = 64,
    beam_width: int = 0,
    word_separator: str | None = None,
) -> dict:
    """Mean CTC loss and corpus-level error rates (total edits / total reference length).

    ``beam_width`` 0 decodes best-path; otherwise prefix beam search.
    """
    total_loss = 0.0
    hyps = []
    for batch in _batched(list(records), batch_size):
        logits, _ = model_forward_batch([r.features for r in batch], params)
        for lg_loss in ctc_grad_batch(logits, [r.labels for r in batch], alphabet):
            total_loss += lg_loss.loss
        for lg in logits:
            if beam_width:
                hyps.append(beam_search(lg, beam_width, alphabet)[0][0])
            else:
                hyps.append(greedy_decode(lg))
    refs = [r.labels for r in records]
    token = corpus_stats(zip(hyps, refs))
    words = corpus_stats(
        (split_words(alphabet.decode(h), word_separator), split_words(alphabet.decode(r), word_separator))
        for h, r in zip(hyps, refs)
    )
    chars = corpus_stats(
        (list("".join(alphabet.decode(h))), list("".join(alphabet.decode(r)))) for h, r in zip(hyps, refs)
    )
    n = max(len(records), 1)
    return {
        "ctc_loss": total_loss / n,
        "wer": words.rate,
        "cer": chars.rate,
        "token_error_rate": token.rate,
        "hypotheses": hyps,
    }


def train_epoch(state: TrainState, records: Sequence[Record], alphabet: Alphabet, config: TrainConfig) -> dict:
    params = state.params
    order = np.random.default_rng(_seed(state.seed, _SHUFFLE, state.epoch)).permutation(len(records))
    mix = MixedLossConfig(lam=state.lam, use_scst=config.use_scst, num_samples=config.num_samples)
    totals = {"loss": 0.0, "ctc_loss": 0.0, "reward_sample": 0.0, "reward_baseline": 0.0}
    n_seen = 0
    for b, idx in enumerate(_batched(order, config.batch_size)):
        batch = [records[i] for i in idx]
        drop_rng = np.random.default_rng(_seed(state.seed, _DROPOUT, state.epoch, b))
        logits, cache = model_forward_batch([r.features for r in batch], params, train=True, rng=drop_rng)
        seeds = [_seed(state.seed, _SAMPLE, state.epoch, int(i)) for i in idx]
        loss_grads = mixed_loss_batch(logits, [r.labels for r in batch], alphabet, mix, seeds)
        for out in loss_grads:
            out.grad /= len(batch)
            totals["loss"] += out.loss
            totals["ctc_loss"] += out.parts["ctc_loss"]
            totals["reward_sample"] += out.parts.get("reward_sample", 0.0)
            totals["reward_baseline"] += out.parts.get("reward_baseline", 0.0)
        n_seen += len(batch)
        grads = model_backward(cache, loss_grads, params)
        try:
            grads = clip_gradients(grads, config.clip_norm)
        except NonFiniteGradientError:
            state.skipped_steps += 1
            log.warning("skipping step %d: non-finite gradient", state.step)
            continue
        sgd_nesterov_step(state, grads, config.momentum, config.weight_decay)
    return {k: v / max(n_seen, 1) for k, v in totals.items()}


def train(
    train_records: Sequence[Record],
    val_records: Sequence[Record],
    alphabet: Alphabet,
    config: TrainConfig,
    *,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run epochs until ``max_epochs`` (or ``stop_after`` epochs in this call).

    With ``out_dir`` a checkpoint is written after every epoch and the metrics
    log is appended to ``metrics.jsonl``.
    """
    if not train_records:
        raise InvalidInputError("empty training set")
    first = train_records[0].features
    if resume is not None:
        state, saved_cfg, saved_alphabet = load_checkpoint(resume)
        if saved_alphabet != alphabet:
            raise InvalidInputError("checkpoint alphabet does not match the data")
        config = saved_cfg
    else:
        mcfg = config.model_config(first.shape[0], alphabet.size, first.shape[2])
        state = TrainState.initial(init_params(mcfg, config.seed), config)
    mcfg = state.params.config
    validate_records(train_records, alphabet, mcfg.output_frames)
    validate_records(val_records, alphabet, mcfg.output_frames)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    done = 0
    while state.epoch < config.max_epochs and (stop_after is None or done < stop_after):
        tr = train_epoch(state, train_records, alphabet, config)
        ev = evaluate(state.params, val_records, alphabet, batch_size=config.batch_size)
        row = {
            "epoch": state.epoch + 1,
            "train_loss": tr["loss"],
            "train_ctc_loss": tr["ctc_loss"],
            "reward_sample": tr["reward_sample"],
            "reward_baseline": tr["reward_baseline"],
            "val_loss": ev["ctc_loss"],
            "val_wer": ev["wer"],
            "lr": state.lr,
            "lambda": state.lam,
            "skipped_steps": state.skipped_steps,
        }
        state.epoch += 1
        plateau_scheduler(state, ev["ctc_loss"], config)
        history.append(row)
        log.info("epoch %(epoch)d train %(train_loss).4f val %(val_loss).4f wer %(val_wer).4f", row)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(row) + "\n")
            save_checkpoint(out / "checkpoint.npz", state, config, alphabet)
        done += 1
    return state, history


def save_checkpoint(path: str | Path, state: TrainState, config: TrainConfig, alphabet: Alphabet) -> None:
    arrays = {}
    for name, a in state.params.items():
        arrays[f"param/{name}"] = a
        arrays[f"velocity/{name}"] = state.velocity[name]
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "train_config": config.to_dict(),
        "model_config": state.params.config.to_dict(),
        "alphabet": list(alphabet.symbols),
        "shapes": {k: list(v.shape) for k, v in state.params.items()},
        "lr": state.lr,
        "lambda": state.lam,
        "epoch": state.epoch,
        "step": state.step,
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
        "plateau_count": state.plateau_count,
        "lambda_switched": state.lambda_switched,
        "skipped_steps": state.skipped_steps,
        # all randomness is derived from the run seed and (epoch, index) spawn keys
        "rng": {"algorithm": RNG_ALGORITHM, "seed": state.seed, "state": {"epoch": state.epoch}},
    }
    arrays["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig, Alphabet]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
        if meta["rng"]["algorithm"] != RNG_ALGORITHM:
            raise InvalidInputError(f"{path}: unsupported rng {meta['rng']['algorithm']}")
        mcfg = ModelConfig(**meta["model_config"])
        expected = param_shapes(mcfg)
        params_arrays = OrderedDict()
        velocity = OrderedDict()
        for name, shape in expected.items():
            if list(shape) != meta["shapes"].get(name):
                raise InvalidInputError(f"{path}: recorded shape of {name} disagrees with the model config")
            for prefix, dest in (("param", params_arrays), ("velocity", velocity)):
                key = f"{prefix}/{name}"
                if key not in z.files:
                    raise InvalidInputError(f"{path}: missing {key}")
                a = np.array(z[key], dtype=np.float64)
                if a.shape != shape:
                    raise InvalidInputError(f"{path}: {key} has shape {a.shape}, expected {shape}")
                dest[name] = a
    config = TrainConfig.from_dict(meta["train_config"])
    state = TrainState(
        params=ModelParams(mcfg, params_arrays),
        velocity=velocity,
        lr=meta["lr"],
        lam=meta["lambda"],
        epoch=meta["epoch"],
        step=meta["step"],
        best_val=math.inf if meta["best_val"] is None else meta["best_val"],
        plateau_count=meta["plateau_count"],
        lambda_switched=meta["lambda_switched"],
        skipped_steps=meta["skipped_steps"],
        seed=meta["rng"]["seed"],
    )
    return state, config, Alphabet(tuple(meta["alphabet"]))
