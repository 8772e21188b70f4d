"""Per-pair SGD training with stochastic teacher forcing, plus a gradient checker."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .ingest import SequencePair
from .seq2seq import ModelParams, forward_backward, sequence_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    hidden_size: int = 256
    iterations: int = 70_000
    lr_start: float = 0.01
    lr_end: float = 0.0001
    lr_schedule: str = "exponential"  # or "linear", "constant"
    teacher_forcing_p: float = 0.5
    max_len: int = 100
    seed: int = 0
    log_every: int = 100
    clip_norm: float = 5.0
    reduction: str = "sum"

    def __post_init__(self):
        if not 0.0 <= self.teacher_forcing_p <= 1.0:
            raise ValueError("teacher_forcing_p must lie in [0, 1]")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_schedule not in ("exponential", "linear", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.hidden_size < 1 or self.iterations < 0 or self.log_every < 1:
            raise ValueError("hidden_size, iterations and log_every must be positive")

    def learning_rate(self, step: int) -> float:
        """Rate for 0-based ``step``, moving from lr_start to lr_end over the run.

        The exponential schedule is geometric, the linear one arithmetic.
        """
        if self.lr_schedule == "constant" or self.iterations <= 1:
            return self.lr_start
        frac = min(step, self.iterations - 1) / (self.iterations - 1)
        if self.lr_schedule == "linear":
            return self.lr_start + (self.lr_end - self.lr_start) * frac
        return self.lr_start * (self.lr_end / self.lr_start) ** frac

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    iteration: int = 0
    rng_state: dict | None = None
    clip_count: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)
    window: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "rng_state": self.rng_state,
            "clip_count": self.clip_count,
            "history": [[i, v] for i, v in self.history],
            "window": list(self.window),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(
            iteration=d["iteration"],
            rng_state=d["rng_state"],
            clip_count=d["clip_count"],
            history=[(int(i), float(v)) for i, v in d["history"]],
            window=[float(v) for v in d["window"]],
        )


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    clipped: bool


def _as_tokens(pair) -> tuple[Sequence[int], Sequence[int]]:
    if isinstance(pair, SequencePair):
        return pair.input.tokens, pair.target.tokens
    return pair


def train_step(pair, params: ModelParams, lr: float, teacher_forcing_p: float,
               rng: np.random.Generator, clip_norm: float = 5.0,
               reduction: str = "sum") -> StepResult:
    """Forward, backward and one SGD update of ``params`` in place.

    A single Bernoulli draw decides teacher forcing for the whole pair. The
    clip threshold is per decoder step: with the summed loss the gradient is
    rescaled when its global norm exceeds ``clip_norm`` times the number of
    scored steps (with the mean loss, when it exceeds ``clip_norm``).
    """
    src, tgt = _as_tokens(pair)
    if len(src) == 0 or len(tgt) == 0:
        raise TrainingError("training pair with an empty sequence")
    forced = bool(rng.random() < teacher_forcing_p)
    loss, grads, steps = forward_backward(params, src, tgt, teacher_forcing=forced,
                                          reduction=reduction)
    norm = grads.global_norm()
    limit = clip_norm * steps if reduction == "sum" else clip_norm
    clipped = bool(clip_norm and norm > limit)
    scale = lr * (limit / norm if clipped else 1.0)
    if scale:
        for name, g in grads.tensors().items():
            getattr(params, name)[...] -= scale * g
    return StepResult(loss=loss, grad_norm=norm, clipped=clipped)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float]]
    state: TrainState


def _spawn(seed: int):
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss)


def train(pairs: Sequence, vocab_size: int, config: TrainConfig,
          params: ModelParams | None = None, state: TrainState | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Run SGD until ``config.iterations`` (or ``stop_at``) steps are done.

    Pairs are sampled uniformly with a generator derived from ``config.seed``;
    passing back the returned ``params`` and ``state`` continues the same run.
    Mean NLL is logged every ``config.log_every`` steps.
    """
    if len(pairs) == 0:
        raise TrainingError("no training pairs")
    init_rng, rng = _spawn(config.seed)
    if params is None:
        params = ModelParams.init(vocab_size, config.hidden_size, init_rng)
    if state is None:
        state = TrainState()
    elif state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    tokens = [_as_tokens(p) for p in pairs]
    while state.iteration < end:
        step = state.iteration
        k = int(rng.integers(len(tokens)))
        result = train_step(tokens[k], params, config.learning_rate(step),
                            config.teacher_forcing_p, rng, config.clip_norm, config.reduction)
        if not np.isfinite(result.loss):
            raise TrainingError(
                f"non-finite loss at iteration {step + 1} (pair {k}, grad norm {result.grad_norm})")
        state.clip_count += result.clipped
        state.window.append(result.loss)
        state.iteration += 1
        if state.iteration % config.log_every == 0:
            mean = float(np.mean(state.window))
            state.history.append((state.iteration, mean))
            state.window.clear()
            log.info("iter %d  mean nll %.4f  lr %.5f  clipped %d", state.iteration, mean,
                     config.learning_rate(step), state.clip_count)
    state.rng_state = rng.bit_generator.state
    return TrainResult(params=params, history=list(state.history), state=state)


def gradient_check(params: ModelParams, pair, eps: float = 1e-5, samples: int = 100,
                   seed: int = 0, reduction: str = "sum") -> dict[str, float]:
    """Largest relative error between analytic and central-difference gradients.

    Teacher forcing is always on. Up to ``samples`` coordinates are drawn per
    tensor (all of them for smaller tensors). The differences are evaluated in
    extended precision so that round-off does not swamp small gradients. A
    coordinate where both estimates are exactly zero counts as error 0.
    Returns ``{tensor name: max relative error}``.
    """
    src, tgt = _as_tokens(pair)
    _, grads, _ = forward_backward(params, src, tgt, teacher_forcing=True, reduction=reduction)
    wide = ModelParams(**{k: v.astype(np.longdouble) for k, v in params.tensors().items()})
    rng = np.random.default_rng(seed)
    eps_w = np.longdouble(eps)
    errors = {}
    for name, arr in wide.tensors().items():
        analytic = getattr(grads, name)
        if arr.size <= samples:
            flat = np.arange(arr.size)
        else:
            flat = rng.choice(arr.size, size=samples, replace=False)
        worst = 0.0
        for f in flat:
            idx = np.unravel_index(f, arr.shape)
            old = arr[idx]
            arr[idx] = old + eps_w
            up = sequence_loss(wide, src, tgt, reduction)
            arr[idx] = old - eps_w
            down = sequence_loss(wide, src, tgt, reduction)
            arr[idx] = old
            numeric = float((up - down) / (2 * eps_w))
            a = float(analytic[idx])
            denom = max(abs(a), abs(numeric))
            worst = max(worst, 0.0 if denom == 0 else abs(a - numeric) / denom)
        errors[name] = worst
    return errors
