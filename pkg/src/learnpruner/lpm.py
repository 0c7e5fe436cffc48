"""Learnable pruning module: per-token keep/prune classifier trained with a
straight-through mask through the frozen toy model."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .optim import OPTIMIZERS, global_norm
from .autodiff import Tensor, Tape, mul, relu, softmax_rows, ste, sub, take

log = logging.getLogger(__name__)

KEEP = 1  # class column holding the keep probability


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float, what: str = "loss"):
        super().__init__(f"non-finite {what} {value!r} at training step {step}")
        self.step = step


@dataclass
class LpmParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d: int, hidden: int | None = None, seed: int = 0) -> "LpmParams":
        h = hidden or max(d // 2, 1)
        rng = np.random.default_rng([seed, 3])
        return cls(
            w1=Tensor(rng.normal(0.0, np.sqrt(2.0 / d), (d, h)), requires_grad=True),
            b1=Tensor(np.zeros(h), requires_grad=True),
            w2=Tensor(np.zeros((h, 2)), requires_grad=True),
            b2=Tensor(np.zeros(2), requires_grad=True),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def state(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1.data, "b1": self.b1.data, "w2": self.w2.data, "b2": self.b2.data}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "LpmParams":
        return cls(**{k: Tensor(np.array(state[k]), requires_grad=True) for k in ("w1", "b1", "w2", "b2")})

    def copy(self) -> "LpmParams":
        return LpmParams.from_state(self.state())


@dataclass
class PruneDecision:
    soft: Tensor          # keep probability per token
    hard: np.ndarray      # 0/1 mask, argmax of the two classes (ties keep)


def predict(params: LpmParams, tokens) -> PruneDecision:
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if x.shape[-1] != params.w1.shape[0]:
        raise ValueError(f"token width {x.shape[-1]} does not match LPM input width {params.w1.shape[0]}")
    logits = relu(x @ params.w1 + params.b1) @ params.w2 + params.b2
    probs = softmax_rows(logits)
    soft = take(probs, KEEP, axis=-1)
    hard = (soft.data >= 0.5).astype(np.float64)
    return PruneDecision(soft=soft, hard=hard)


def ste_mask(decision: PruneDecision) -> Tensor:
    return ste(decision.hard, decision.soft)


def prune_loss(mask, tau: float) -> Tensor:
    """``(mean(mask) - tau)^2`` per sequence, averaged over any batch axes."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    m = mask if isinstance(mask, Tensor) else Tensor(mask)
    dev = sub(m.mean(axis=-1), tau)
    return mul(dev, dev).mean()


@dataclass
class TrainConfig:
    lambda_loss: float = 1.0
    tau: float = 0.0
    lr: float = 1e-2
    steps: int = 2000
    batch_size: int = 16
    clip_norm: float | None = None
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.lambda_loss < 0:
            raise ValueError("lambda_loss must be nonnegative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {sorted(OPTIMIZERS)}")


@dataclass
class TraceRow:
    step: int
    l_ntp: float
    l_prune: float
    keep_rate: float


@dataclass
class TrainResult:
    params: LpmParams
    trace: list[TraceRow] = field(default_factory=list)


def train(params: LpmParams, encoder, decoder, dataset, cfg: TrainConfig,
          features: np.ndarray | None = None) -> TrainResult:
    """Gradient descent (plain by default) on ``L_ntp + lambda * L_prune`` over LPM params only.

    ``dataset`` must expose ``images``, ``queries``, ``answers`` arrays.  The
    encoder is frozen and deterministic, so its features are computed once
    (or passed in as ``features``).
    """
    from .decoder import SequenceLayout

    for t in list(encoder.params.values()) + list(decoder.params.values()):
        if t.requires_grad:
            raise ValueError("encoder/decoder weights must be frozen before LPM training")
    params = params.copy()
    if features is None:
        features = encoder.encode(dataset.images).tokens
    queries, answers = np.asarray(dataset.queries), np.asarray(dataset.answers)
    n = len(features)
    n_vision = features.shape[1]
    layout = SequenceLayout(n_vision, queries.shape[1], answers.shape[1])
    text = np.concatenate([queries, answers], axis=1)
    embedded = decoder.embed(features, text).data   # frozen, so computed once
    rng = np.random.default_rng([cfg.seed, 4])
    order = rng.permutation(n)
    cursor = 0
    trace = []
    opt = OPTIMIZERS[cfg.optimizer](params.tensors(), lr=cfg.lr)
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        with Tape() as tape:
            dec = predict(params, features[idx])
            mask = ste_mask(dec)
            l_ntp = decoder.training_forward(Tensor(embedded[idx]), layout, mask, answers[idx])
            l_prune = prune_loss(mask, cfg.tau)
            loss = l_ntp + cfg.lambda_loss * l_prune
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLoss(step, value)
        for t in params.tensors():
            t.grad = None
        tape.backward(loss)
        # hard masks hide NaN scores from the loss, so check the update too
        norm = global_norm(params.tensors())
        if not np.isfinite(norm):
            raise NonFiniteLoss(step, norm, "gradient norm")
        if not all(np.isfinite(t.data).all() for t in params.tensors()):
            raise NonFiniteLoss(step, float("nan"), "LPM parameter")
        scale = 1.0
        if cfg.clip_norm:
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
        opt.step(scale)
        row = TraceRow(step, float(l_ntp.data), float(l_prune.data), float(dec.hard.mean()))
        trace.append(row)
        if step % 200 == 0:
            log.debug("lpm step %d l_ntp=%.4f l_prune=%.4f keep=%.3f", step, row.l_ntp, row.l_prune, row.keep_rate)
    return TrainResult(params, trace)
