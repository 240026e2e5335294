"""Losses, Adagrad with Nesterov momentum, and the session-parallel training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import _faults
from .corpus import NegativeSampler, SessionCorpus, SessionParallelIterator, batch_candidate_set
from .model import (
    ModelParams,
    SparseGrad,
    backward,
    final_activation,
    final_activation_grad,
    forward,
    init_model,
    parse_final_act,
    reset_rows,
    sigmoid,
    softmax,
)

log = logging.getLogger(__name__)

LOSSES = ("cross-entropy", "bpr-max")
BPR_MAX_EPS = 1e-24
ACC_EPS = 1e-10
ACC_INIT = 0.0


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class NumericError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    loss: str = "cross-entropy"
    final_act: str = "softmax"
    layers: list[int] = field(default_factory=lambda: [100])
    batch_size: int = 64
    n_sample: int = 2048
    sample_alpha: float = 0.5
    logq: float = 0.0
    bpreg: float = 0.0
    constrained_embedding: bool = True
    embedding: int = 0
    dropout_p_embed: float = 0.0
    dropout_p_hidden: float = 0.0
    learning_rate: float = 0.05
    momentum: float = 0.0
    n_epochs: int = 10
    seed: int = 42
    shuffle: bool = False
    sample_cache_size: int = 10_000_000

    @property
    def embedding_mode(self) -> str:
        if self.constrained_embedding:
            return "shared"
        return "separate" if self.embedding > 0 else "none"

    def problems(self) -> list[str]:
        """Every violated constraint, not just the first."""
        out = []
        if self.loss not in LOSSES:
            out.append(f"loss must be one of {LOSSES}, got {self.loss!r}")
        try:
            act, _ = parse_final_act(self.final_act)
        except ValueError as e:
            out.append(str(e))
            act = None
        if self.loss == "cross-entropy" and act not in (None, "softmax"):
            out.append("cross-entropy loss requires final_act=softmax")
        if self.loss == "bpr-max" and act == "softmax":
            out.append("bpr-max needs an elementwise final_act (linear, relu, elu, selu)")
        if not self.layers or any(int(h) < 1 for h in self.layers):
            out.append("layers must be a non-empty list of positive sizes")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.n_sample < 0:
            out.append("n_sample must be >= 0")
        if self.sample_alpha < 0:
            out.append("sample_alpha must be >= 0")
        if not 0 <= self.logq <= 1:
            out.append("logq must be in [0, 1]")
        if self.logq > 0 and self.loss != "cross-entropy":
            out.append("logq only applies to cross-entropy")
        if self.bpreg < 0:
            out.append("bpreg must be >= 0")
        if self.bpreg > 0 and self.loss != "bpr-max":
            out.append("bpreg only applies to bpr-max")
        if self.embedding < 0:
            out.append("embedding must be >= 0")
        if self.constrained_embedding and self.embedding not in (0, (self.layers or [0])[-1]):
            out.append("constrained_embedding ties the input embedding to the last layer size; set embedding=0")
        for name in ("dropout_p_embed", "dropout_p_hidden"):
            if not 0 <= getattr(self, name) < 1:
                out.append(f"{name} must be in [0, 1)")
        if self.learning_rate <= 0:
            out.append("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            out.append("momentum must be in [0, 1)")
        if self.n_epochs < 1:
            out.append("n_epochs must be >= 1")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown parameter {k!r}" for k in sorted(unknown)])
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    events: int
    seconds: float


# ---------------------------------------------------------------------------
# losses


def candidate_sampling_probs(
    supports: np.ndarray, targets: np.ndarray, extra: np.ndarray, sample_alpha: float
) -> np.ndarray:
    """Inclusion probability of each candidate column under mixed sampling.

    Targets of other examples arrive with their empirical frequency; extra
    shared negatives with ``support ** alpha`` normalised.
    """
    supports = np.asarray(supports, dtype=np.float64)
    q_batch = supports[targets] / supports.sum()
    w = supports**sample_alpha
    q_extra = w[extra] / w.sum()
    return np.concatenate([q_batch, q_extra])


def cross_entropy_loss(scores, positive_index, logq: float = 0.0, q=None):
    """Mean softmax cross-entropy over rows with optional logQ correction.

    Returns ``(loss, dscores)`` with the gradient taken w.r.t. the raw scores.
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    pos = np.asarray(positive_index)
    if logq > 0:
        q = np.asarray(q, dtype=np.float64)
        if np.any(q <= 0):
            raise NumericError("logQ correction needs positive sampling probabilities")
        scores = scores - (logq * np.log(q)).astype(scores.dtype)
    if _faults.active("double_softmax"):
        scores = softmax(scores, axis=1)
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, pos]))
    grad = np.exp(shifted - lse[:, None])
    grad[rows, pos] -= 1.0
    grad /= n
    if _faults.active("double_softmax"):
        # chain through the extra softmax so only the loss surface is wrong
        s = scores
        grad = s * (grad - (grad * s).sum(axis=1, keepdims=True))
    return loss, grad


def bpr_max_loss(scores, positive_index, bpreg: float = 0.0, eps: float = BPR_MAX_EPS):
    """BPR-max over all other columns of each row, plus softmax-weighted score regularisation.

    ``scores`` are post final activation. Returns ``(loss, dscores)``.
    """
    scores = np.asarray(scores)
    n, c = scores.shape
    if c < 2:
        # no negatives to rank against
        return 0.0, np.zeros_like(scores)
    pos = np.asarray(positive_index)
    rows = np.arange(n)
    neg = np.ones((n, c), dtype=bool)
    neg[rows, pos] = False
    r_pos = scores[rows, pos][:, None]
    masked = np.where(neg, scores, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(neg, np.exp(masked - m), 0.0)
    if _faults.active("bpr_max_wrong_equation"):
        # uniform weights: the mean-BPR equation under the BPR-max name
        e = neg.astype(scores.dtype)
    s = e / e.sum(axis=1, keepdims=True)
    sig = np.where(neg, sigmoid(r_pos - scores), 0.0)
    a = (s * sig).sum(axis=1, keepdims=True)
    sq = scores * scores
    reg = (s * sq).sum(axis=1, keepdims=True)
    loss = float(np.mean(-np.log(a[:, 0] + eps) + bpreg * reg[:, 0]))

    dsig = sig * (1.0 - sig)
    if _faults.active("bpr_max_wrong_equation"):
        da_neg = -s * dsig
    else:
        da_neg = s * (sig - a) - s * dsig
    da_pos = (s * dsig).sum(axis=1)
    grad = -da_neg / (a + eps)
    grad[rows, pos] = -da_pos / (a[:, 0] + eps)
    if bpreg:
        dreg = s * (sq - reg) + 2.0 * s * scores
        if _faults.active("bpr_max_wrong_equation"):
            dreg = 2.0 * s * scores
        grad += bpreg * np.where(neg, dreg, 0.0)
    grad /= n
    return loss, grad.astype(scores.dtype, copy=False)


# ---------------------------------------------------------------------------
# optimizer


class AdagradNesterov:
    """Adagrad scaling followed by Nesterov momentum.

    ``acc += g**2; step = lr * g / (sqrt(acc) + eps); v = mu * v + step;
    param -= mu * v + step``. Sparse gradients touch only their rows, so
    per-step cost does not grow with the catalog.
    """

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float, momentum: float = 0.0, eps: float = ACC_EPS):
        init = 0.1 if _faults.active("large_initial_accumulator") else ACC_INIT
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.eps = eps
        self.accumulator = {}
        self.velocity = {}
        for name, p in params.items():
            self.accumulator[name] = np.full(p.shape, init, dtype=p.dtype)
            self.velocity[name] = np.zeros_like(p)

    def _update(self, p, acc, vel, g):
        g2 = g * g
        acc += g2
        delta = self.learning_rate * g / (np.sqrt(acc) + self.eps)
        if self.momentum:
            vel *= self.momentum
            vel += delta
            p -= self.momentum * vel + delta
        else:
            p -= delta

    def step(self, params: dict[str, np.ndarray], grads: dict) -> None:
        for name, g in grads.items():
            if isinstance(g, SparseGrad):
                if not np.all(np.isfinite(g.values)):
                    raise NumericError(f"non-finite gradient for {name}")
        for name, g in grads.items():
            if not isinstance(g, SparseGrad) and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
        for name, g in grads.items():
            p, acc, vel = params[name], self.accumulator[name], self.velocity[name]
            if isinstance(g, SparseGrad):
                if g.axis == 1:
                    p = p.T
                    if acc.shape != p.shape:
                        acc = self.accumulator[name] = np.ascontiguousarray(acc.T)
                        vel = self.velocity[name] = np.ascontiguousarray(vel.T)
                rows, inv = np.unique(g.index, return_inverse=True)
                summed = np.zeros((len(rows), g.values.shape[1]), dtype=g.values.dtype)
                np.add.at(summed, inv.ravel(), g.values)
                a, v, w = acc[rows], vel[rows], p[rows]
                self._update(w, a, v, summed)
                acc[rows], vel[rows], p[rows] = a, v, w
            else:
                self._update(p, acc, vel, g)


def adagrad_step(params, grads, opt_state: AdagradNesterov, learning_rate=None, momentum=None) -> None:
    if learning_rate is not None:
        opt_state.learning_rate = learning_rate
    if momentum is not None:
        opt_state.momentum = momentum
    opt_state.step(params, grads)


# ---------------------------------------------------------------------------
# loop


@dataclass
class Trainer:
    """Model, optimizer, hidden state and RNG streams for one training run."""

    config: TrainConfig
    corpus: SessionCorpus
    params: ModelParams
    optimizer: AdagradNesterov
    sampler: NegativeSampler | None
    rng_dropout: np.random.Generator
    rng_order: np.random.Generator
    state: list = field(default_factory=list)
    last_scores_per_example: int = 0
    last_score_evaluations: int = 0
    stale_mask: np.ndarray | None = None

    @classmethod
    def create(cls, corpus: SessionCorpus, config: TrainConfig, dtype=np.float32) -> "Trainer":
        config.validate()
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        rng_init, rng_sample, rng_dropout, rng_order = (np.random.default_rng(s) for s in seeds)
        params = init_model(
            corpus.n_items,
            config.layers,
            config.embedding_mode,
            config.embedding if config.embedding_mode == "separate" else 0,
            rng_init,
            dtype,
        )
        sampler = None
        if config.n_sample > 0:
            pairs = corpus.n_events - corpus.n_sessions
            steps = pairs // max(1, min(config.batch_size, corpus.n_sessions)) + 1
            cache = min(config.sample_cache_size, config.n_sample * steps)
            sampler = NegativeSampler(corpus.supports, config.sample_alpha, rng_sample, cache)
        opt = AdagradNesterov(params.named(), config.learning_rate, config.momentum)
        return cls(config, corpus, params, opt, sampler, rng_dropout, rng_order)

    def prepare_state(self, batch) -> list[np.ndarray]:
        """Hidden-state rows for the batch's slots, zeroed where a session starts."""
        state = [h[batch.slots] for h in self.state]
        reset = batch.reset_mask
        if _faults.active("reset_on_session_end_only"):
            reset = _stale_reset(self, batch)
        reset_rows(state, reset)
        return state

    def store_state(self, batch, new_state) -> None:
        for h, h_new in zip(self.state, new_state):
            h[batch.slots] = h_new

    def batches(self):
        bs = 32 if _faults.active("hard_coded_batch_size") else self.config.batch_size
        rng = self.rng_order if self.config.shuffle else None
        self.state = self.params.zero_state(bs)
        it = SessionParallelIterator.for_corpus(
            self.corpus, bs, rng=rng, sampler=self.sampler, n_sample=self.config.n_sample
        )
        return iter(it)


def train_step(trainer: Trainer, batch) -> float:
    """Reset, forward on the candidate set, loss, backward, optimizer update."""
    cfg, params = trainer.config, trainer.params
    state = trainer.prepare_state(batch)
    candidates = batch_candidate_set(batch)
    scores, new_state, cache = forward(
        params, state, batch.inputs, candidates, True, trainer.rng_dropout, cfg.dropout_p_embed, cfg.dropout_p_hidden
    )
    trainer.last_scores_per_example = scores.shape[1]
    trainer.last_score_evaluations = cache.score_evaluations
    pos = np.arange(len(batch))
    if cfg.loss == "cross-entropy":
        q = None
        if cfg.logq > 0:
            q = candidate_sampling_probs(trainer.corpus.supports, batch.targets, batch.extra_negatives, cfg.sample_alpha)
        loss, dscores = cross_entropy_loss(scores, pos, cfg.logq, q)
    else:
        act = final_activation(scores, cfg.final_act)
        loss, dact = bpr_max_loss(act, pos, cfg.bpreg)
        dscores = final_activation_grad(scores, dact, cfg.final_act)
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    grads = backward(params, cache, dscores.astype(params.dtype, copy=False))
    trainer.optimizer.step(params.named(), grads)
    trainer.store_state(batch, new_state)
    return loss


def _stale_reset(trainer: Trainer, batch) -> np.ndarray:
    # fault: the reset mask is only recomputed on steps where some session ends,
    # so slots reset once keep getting reset on the following steps
    mask = trainer.stale_mask
    if mask is None or len(mask) != len(batch) or batch.reset_mask.any():
        mask = batch.reset_mask.copy()
    trainer.stale_mask = mask
    return mask


def fit(corpus: SessionCorpus, config: TrainConfig, dtype=np.float32, callback=None) -> tuple[ModelParams, list[EpochStats]]:
    """Train for ``config.n_epochs`` epochs; deterministic for a fixed seed."""
    trainer = Trainer.create(corpus, config, dtype)
    history = []
    for epoch in range(config.n_epochs):
        t0 = time.perf_counter()
        total, events = 0.0, 0
        for batch in trainer.batches():
            loss = train_step(trainer, batch)
            total += loss * len(batch)
            events += len(batch)
        mean = total / max(events, 1)
        if not np.isfinite(mean):
            raise NumericError(f"epoch {epoch + 1}: non-finite mean loss")
        stats = EpochStats(epoch + 1, mean, events, time.perf_counter() - t0)
        log.info("epoch %d loss %.6f events %d (%.1fs)", stats.epoch, stats.loss, stats.events, stats.seconds)
        history.append(stats)
        if callback is not None:
            callback(trainer, stats)
    return trainer.params, history
