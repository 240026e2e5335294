"""Executable correctness checks and the feature-availability matrix.

Checks report instead of raising, so a full run always yields a complete
table. Every check takes a seed and is reproducible from it.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special, stats

from .corpus import (
    NegativeSampler,
    SessionCorpus,
    SessionParallelIterator,
    batch_candidate_set,
    build_corpus,
    pair_multiset,
)
from .datasets import EventLog
from .evaluation import evaluate, naive_evaluate
from .model import (
    backward,
    dense_grads,
    dense_reference_scores,
    final_activation,
    final_activation_grad,
    forward,
    init_model,
    step,
)
from .training import TrainConfig, Trainer, bpr_max_loss, cross_entropy_loss

GRAD_TOL = 1e-4
FD_EPS = 1e-5
SIGNIFICANCE = 0.01


@dataclass
class CheckReport:
    name: str
    passed: bool
    value: float
    threshold: float
    seed: int | None = None
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.value = float(self.value)

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"


def reports_tsv(reports: list[CheckReport]) -> str:
    lines = ["check\tstatus\tvalue\tthreshold\tseed\tdetail"]
    for r in reports:
        lines.append(f"{r.name}\t{r.status}\t{r.value:.6g}\t{r.threshold:.6g}\t{r.seed}\t{r.detail}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gradient checks


def _random_state(params, n, rng):
    return [rng.uniform(-0.8, 0.8, size=(n, h)) for h in params.layers]


def step_loss(params, state, inputs, candidates, loss, act, bpreg, logq, q, dropout, dropout_seed):
    """Loss of one training step and its parameter gradients (dense)."""
    rng = np.random.default_rng(dropout_seed)
    scores, _, cache = forward(params, [h.copy() for h in state], inputs, candidates, True, rng, *dropout)
    pos = np.arange(len(inputs))
    if loss == "cross-entropy":
        value, dscores = cross_entropy_loss(scores, pos, logq, q)
    else:
        a = final_activation(scores, act)
        value, da = bpr_max_loss(a, pos, bpreg)
        dscores = final_activation_grad(scores, da, act)
    return value, cache, dscores


def gradcheck(loss: str, mode: str, layers, seed: int = 7, n_items: int = 7, batch: int = 3, n_extra: int = 2) -> CheckReport:
    """Central finite differences against the analytic gradient on a tiny float64 model."""
    rng = np.random.default_rng(seed)
    params = init_model(n_items, layers, mode, 3 if mode == "separate" else 0, rng, dtype=np.float64)
    for b in params.b:
        b[:] = rng.uniform(-0.3, 0.3, size=b.shape)
    state = _random_state(params, batch, rng)
    inputs = rng.integers(0, n_items, size=batch)
    targets = rng.integers(0, n_items, size=batch)
    candidates = np.concatenate([targets, rng.integers(0, n_items, size=n_extra)])
    act = "softmax" if loss == "cross-entropy" else "elu-0.5"
    bpreg = 0.5 if loss == "bpr-max" else 0.0
    logq = 0.5 if loss == "cross-entropy" else 0.0
    q = rng.uniform(0.05, 0.5, size=len(candidates))
    dropout = (0.3, 0.2) if mode != "none" else (0.0, 0.2)
    dseed = seed + 1

    def f():
        return step_loss(params, state, inputs, candidates, loss, act, bpreg, logq, q, dropout, dseed)[0]

    _, cache, dscores = step_loss(params, state, inputs, candidates, loss, act, bpreg, logq, q, dropout, dseed)
    analytic = dense_grads(params, backward(params, cache, dscores))
    worst, where = 0.0, ""
    for name, p in params.named().items():
        g = analytic.get(name, np.zeros_like(p))
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + FD_EPS
            up = f()
            p[idx] = orig - FD_EPS
            down = f()
            p[idx] = orig
            num = (up - down) / (2 * FD_EPS)
            err = abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-7)
            if err > worst:
                worst, where = err, f"{name}{list(idx)}"
    label = f"gradcheck[{loss},{mode},{len(layers)}L]"
    return CheckReport(label, worst < GRAD_TOL, worst, GRAD_TOL, seed, f"worst at {where}")


def run_gradcheck_suite(seed: int = 7) -> list[CheckReport]:
    out = []
    for loss, mode, layers in itertools.product(("cross-entropy", "bpr-max"), ("none", "separate", "shared"), ([4], [4, 3])):
        out.append(gradcheck(loss, mode, layers, seed))
    return out


# ---------------------------------------------------------------------------
# hidden-state resets


def _toy_corpus(rng, n_sessions=12, n_items=9, max_len=6) -> SessionCorpus:
    rows = []
    for s in range(n_sessions):
        length = int(rng.integers(2, max_len + 1))
        items = rng.integers(0, n_items, size=length)
        rows += [(s, f"i{it}", float(s * 100 + t)) for t, it in enumerate(items)]
    frame = pd.DataFrame(rows, columns=["SessionId", "ItemId", "Time"])
    return build_corpus(EventLog(frame))


def run_reset_check(seed: int = 11, steps: int = 50) -> CheckReport:
    """Hidden-state lineage of the training loop against a prefix-replay simulation.

    Every slot's state entering a step must equal the state obtained by
    replaying its session's prefix from zero.
    """
    rng = np.random.default_rng(seed)
    corpus = _toy_corpus(rng, n_sessions=80)
    cfg = TrainConfig(layers=[5], batch_size=4, n_sample=0, n_epochs=1, seed=seed, shuffle=True)
    trainer = Trainer.create(corpus, cfg, dtype=np.float64)
    params = trainer.params
    it = SessionParallelIterator.for_corpus(corpus, cfg.batch_size, rng=trainer.rng_order)
    trainer.state = params.zero_state(cfg.batch_size)
    # reference: (session, position) per slot, replayed from scratch
    slot_session = {}
    worst = 0.0
    for t, batch in enumerate(it):
        if t >= steps:
            break
        state = trainer.prepare_state(batch)
        for k, slot in enumerate(batch.slots):
            if batch.reset_mask[k]:
                slot_session[slot] = [batch.inputs[k]]
            else:
                slot_session[slot].append(batch.inputs[k])
            prefix = slot_session[slot][:-1]
            ref = params.zero_state(1)
            for item in prefix:
                _, ref, _ = step(params, ref, np.array([item]))
            for layer in range(len(params.layers)):
                worst = max(worst, float(np.abs(state[layer][k] - ref[layer][0]).max()))
        _, new_state, _ = step(params, state, batch.inputs)
        trainer.store_state(batch, new_state)
    return CheckReport("reset_lineage", worst < 1e-12, worst, 1e-12, seed, f"{min(steps, t + 1)} steps")


# ---------------------------------------------------------------------------
# sampler statistics


def sampler_fixture(n_items: int = 100, seed: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.zipf(1.6, size=n_items).clip(max=500).astype(np.int64)


def run_sampler_check(alphas=(0.0, 0.5, 0.75, 1.0), draws: int = 1_000_000, seed: int = 5, supports=None) -> list[CheckReport]:
    """Chi-square goodness of fit of sampler draws against ``support ** alpha``."""
    supports = sampler_fixture() if supports is None else np.asarray(supports)
    out = []
    for alpha in alphas:
        sampler = NegativeSampler(supports, alpha, np.random.default_rng(seed), cache_size=draws // 4)
        counts = np.zeros(len(supports), dtype=np.int64)
        remaining = draws
        while remaining:
            n = min(remaining, 100_000)
            counts += np.bincount(sampler.draw(n), minlength=len(supports))
            remaining -= n
        w = supports.astype(np.float64) ** alpha
        p = w / w.sum()
        chi = stats.chisquare(counts, p * draws)
        se = np.sqrt(p * (1 - p) / draws)
        z = np.abs(counts / draws - p) / se
        detail = f"chi2={chi.statistic:.1f} max|z|={z.max():.2f}"
        passed = chi.pvalue > SIGNIFICANCE and z.max() < 4
        out.append(CheckReport(f"sampler[alpha={alpha:g}]", passed, float(chi.pvalue), SIGNIFICANCE, seed, detail))
    return out


# ---------------------------------------------------------------------------
# oracle equivalences


def synthetic_log(n_sessions: int, n_items: int, rng, min_len=2, max_len=8, start=0, prefix="i") -> EventLog:
    rows = []
    for s in range(n_sessions):
        length = int(rng.integers(min_len, max_len + 1))
        for t, it in enumerate(rng.integers(0, n_items, size=length)):
            rows.append((start + s, f"{prefix}{it}", float((start + s) * 1000 + t)))
    return EventLog(pd.DataFrame(rows, columns=["SessionId", "ItemId", "Time"]))


def check_sampled_vs_full_ce(seed: int = 13, n_items: int = 30) -> CheckReport:
    rng = np.random.default_rng(seed)
    params = init_model(n_items, [6], "separate", 4, rng, dtype=np.float64)
    state = _random_state(params, 5, rng)
    inputs = rng.integers(0, n_items, size=5)
    targets = rng.integers(0, n_items, size=5)
    scores, _, _ = forward(params, state, inputs, np.arange(n_items))
    sampled, _ = cross_entropy_loss(scores, targets)
    dense = dense_reference_scores(params, state, inputs, range(n_items))
    full = -np.mean(special.log_softmax(dense, axis=1)[np.arange(5), targets])
    diff = abs(sampled - full)
    return CheckReport("oracle[sampled_ce=full_softmax]", diff < 1e-6, diff, 1e-6, seed)


def check_batched_vs_naive_eval(seed: int = 17, n_items: int = 40, target_events: int = 200) -> CheckReport:
    rng = np.random.default_rng(seed)
    train = synthetic_log(60, n_items, rng)
    corpus = build_corpus(train)
    test = synthetic_log(1, n_items + 5, rng, start=1000)
    while len(test) < target_events:
        more = synthetic_log(1, n_items + 5, rng, start=1000 + test.n_sessions)
        test = EventLog(pd.concat([test.frame, more.frame], ignore_index=True))
    params = init_model(corpus.n_items, [8], "shared", 0, rng, dtype=np.float64)
    fast = evaluate(params, test, corpus)
    slow = naive_evaluate(params, test, corpus)
    same = (
        fast.recall == slow.recall
        and fast.mrr == slow.mrr
        and fast.evaluated_events == slow.evaluated_events
        and fast.skipped == slow.skipped
    )
    gap = max(abs(fast.recall[n] - slow.recall[n]) + abs(fast.mrr[n] - slow.mrr[n]) for n in fast.recall)
    return CheckReport("oracle[batched_eval=naive_eval]", same, gap, 0.0, seed, f"{len(test)} test events")


def check_iterator_pairs(seed: int = 19) -> CheckReport:
    rng = np.random.default_rng(seed)
    corpus = _toy_corpus(rng, n_sessions=50)
    mismatches = 0
    for bs in (1, 3, 7, 64):
        emitted = []
        for batch in SessionParallelIterator.for_corpus(corpus, bs):
            emitted.extend(zip(batch.inputs.tolist(), batch.targets.tolist()))
        mismatches += sorted(emitted) != pair_multiset(corpus.items, corpus.session_offsets)
    return CheckReport("oracle[iterator_pairs=direct_pairs]", mismatches == 0, mismatches, 0, seed)


def check_dense_forward(mode: str, seed: int = 23, zero: bool = False) -> CheckReport:
    rng = np.random.default_rng(seed)
    params = init_model(7, [3], mode, 4 if mode == "separate" else 0, rng, dtype=np.float64)
    if zero:
        for p in params.named().values():
            p[...] = 0
    state = params.zero_state(2) if zero else _random_state(params, 2, rng)
    inputs = rng.integers(0, 7, size=2)
    candidates = np.arange(7)
    fast, _, _ = forward(params, [h.copy() for h in state], inputs, candidates)
    slow = dense_reference_scores(params, state, inputs, candidates)
    diff = float(np.abs(fast - slow).max())
    ok = diff < 1e-6 and (not zero or (not fast.any() and not slow.any()))
    label = f"oracle[indexed_forward=dense_forward,{mode}{',zero' if zero else ''}]"
    return CheckReport(label, ok, diff, 1e-6, seed)


def check_candidate_layout(seed: int = 29, n_sample: int = 4) -> CheckReport:
    rng = np.random.default_rng(seed)
    corpus = _toy_corpus(rng, n_sessions=20)
    sampler = NegativeSampler(corpus.supports, 0.5, np.random.default_rng(seed), cache_size=64)
    bad = 0
    for batch in SessionParallelIterator.for_corpus(corpus, 5, sampler=sampler, n_sample=n_sample):
        cand = batch_candidate_set(batch)
        bad += len(cand) != len(batch) + n_sample
        bad += not np.array_equal(cand[: len(batch)], batch.targets)
        bad += not np.array_equal(cand[len(batch) :], batch.extra_negatives)
    return CheckReport("candidate_set[targets+shared_extra]", bad == 0, bad, 0, seed)


def check_shared_aliasing(seed: int = 31) -> CheckReport:
    params = init_model(6, [4], "shared", 0, np.random.default_rng(seed))
    params.input_embedding[2, 1] += 1.0
    ok = params.input_embedding is params.output_embedding and params.output_embedding[2, 1] == params.input_embedding[2, 1]
    return CheckReport("shared_embedding_aliasing", bool(ok), float(ok), 1.0, seed)


def run_oracle_equivalences(seed: int = 0) -> list[CheckReport]:
    out = [
        check_sampled_vs_full_ce(13 + seed),
        check_batched_vs_naive_eval(17 + seed),
        check_iterator_pairs(19 + seed),
        check_candidate_layout(29 + seed),
        check_shared_aliasing(31 + seed),
    ]
    for mode in ("none", "separate", "shared"):
        out.append(check_dense_forward(mode, 23 + seed))
    out.append(check_dense_forward("shared", 23 + seed, zero=True))
    return out


# ---------------------------------------------------------------------------
# regression checks for known reimplementation bugs


def check_bpr_max_reference(seed: int = 41, bpreg: float = 0.7) -> CheckReport:
    """BPR-max loss against a scalar loop over rows and negatives."""
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(4, 6))
    pos = rng.integers(0, 6, size=4)
    got, _ = bpr_max_loss(scores, pos, bpreg)
    total = 0.0
    for i in range(4):
        negs = [j for j in range(6) if j != pos[i]]
        z = sum(math.exp(scores[i, j]) for j in negs)
        weight = {j: math.exp(scores[i, j]) / z for j in negs}
        hit = sum(weight[j] / (1 + math.exp(scores[i, j] - scores[i, pos[i]])) for j in negs)
        reg = sum(weight[j] * scores[i, j] ** 2 for j in negs)
        total += -math.log(hit + 1e-24) + bpreg * reg
    diff = abs(got - total / 4)
    return CheckReport("bugclass[bpr_max_equation]", diff < 1e-10, diff, 1e-10, seed)


def check_dropout_rate(seed: int = 43, p: float = 0.2, n: int = 200_000) -> CheckReport:
    """Fraction of zeroed entries matches the drop probability."""
    from .model import apply_dropout

    out, _ = apply_dropout(np.ones(n), p, np.random.default_rng(seed), train=True)
    frac = np.count_nonzero(out == 0) / n
    z = abs(frac - p) / np.sqrt(p * (1 - p) / n)
    return CheckReport("bugclass[dropout_is_drop_probability]", z < 4, z, 4.0, seed, f"dropped {frac:.4f}")


def check_first_update(seed: int = 47, lr: float = 0.05) -> CheckReport:
    """With a zero initial accumulator the first Adagrad step moves every entry by ``lr``."""
    from .training import AdagradNesterov

    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 4))
    g = rng.normal(scale=1e-3, size=(3, 4))
    before = w.copy()
    AdagradNesterov({"w": w}, lr).step({"w": w}, {"w": g})
    err = float(np.abs(np.abs(before - w) - lr).max())
    return CheckReport("bugclass[initial_accumulator]", err < 1e-6, err, 1e-6, seed)


def check_sampled_scoring(seed: int = 53, batch_size: int = 8, n_sample: int = 16) -> CheckReport:
    """A training step evaluates exactly B * (B + n_sample) scores, never the full catalog."""
    from .training import train_step

    rng = np.random.default_rng(seed)
    corpus = _toy_corpus(rng, n_sessions=30, n_items=400, max_len=5)
    cfg = TrainConfig(layers=[6], batch_size=batch_size, n_sample=n_sample, n_epochs=1, seed=seed)
    trainer = Trainer.create(corpus, cfg, dtype=np.float64)
    worst = 0
    for t, batch in enumerate(trainer.batches()):
        if t >= 10:
            break
        train_step(trainer, batch)
        expected = len(batch) * (len(batch) + n_sample)
        worst = max(worst, abs(trainer.last_score_evaluations - expected))
    return CheckReport("bugclass[sample_before_scoring]", worst == 0, worst, 0, seed)


def check_batch_size_honored(seed: int = 59, sizes=(5, 50)) -> CheckReport:
    rng = np.random.default_rng(seed)
    corpus = _toy_corpus(rng, n_sessions=120)
    bad = 0
    for bs in sizes:
        trainer = Trainer.create(corpus, TrainConfig(layers=[4], batch_size=bs, n_sample=0, n_epochs=1, seed=seed))
        bad += len(next(iter(trainer.batches()))) != bs
    return CheckReport("bugclass[configured_batch_size]", bad == 0, bad, 0, seed)


def run_bug_catalog_checks() -> list[CheckReport]:
    return [
        check_bpr_max_reference(),
        check_dropout_rate(),
        check_first_update(),
        check_sampled_scoring(),
        check_batch_size_honored(),
    ]


# ---------------------------------------------------------------------------
# scaling


def _profile_trainer(n_items, batch_size, n_sample, hidden, steps, seed):
    rng = np.random.default_rng(seed)
    n_sessions = 8 * batch_size
    lengths = rng.integers(steps // 4 + 2, steps // 2 + 2, size=n_sessions)
    items = rng.integers(0, n_items, size=int(lengths.sum()))
    offsets = np.r_[0, np.cumsum(lengths)].astype(np.int64)
    supports = np.bincount(items, minlength=n_items) + 1
    corpus = SessionCorpus(pd.Index([str(i) for i in range(n_items)]), supports, items, offsets)
    cfg = TrainConfig(layers=[hidden], batch_size=batch_size, n_sample=n_sample, n_epochs=1, seed=seed, momentum=0.3)
    return Trainer.create(corpus, cfg)


def step_cost_profile(n_items: int, batch_size: int = 64, n_sample: int = 512, hidden: int = 64, steps: int = 200, seed: int = 37) -> dict:
    """Median wall time of a training step and scores evaluated per example on a synthetic corpus."""
    return compare_step_cost((n_items,), batch_size, n_sample, hidden, steps, seed)[n_items]


def compare_step_cost(catalog_sizes, batch_size=64, n_sample=512, hidden=64, steps=200, seed=37, warmup=20) -> dict:
    """Per-step cost for several catalog sizes at fixed batch size and sample count.

    Steps of the different trainers are interleaved one by one so that
    machine-level noise hits every catalog size alike.
    """
    from .training import train_step

    trainers = {v: _profile_trainer(v, batch_size, n_sample, hidden, steps, seed) for v in catalog_sizes}
    streams = {v: t.batches() for v, t in trainers.items()}
    times = {v: [] for v in catalog_sizes}
    per_example = {v: set() for v in catalog_sizes}
    evaluated = {v: set() for v in catalog_sizes}
    for t in range(steps + warmup):
        for v, trainer in trainers.items():
            batch = next(streams[v])
            t0 = time.perf_counter()
            train_step(trainer, batch)
            dt = time.perf_counter() - t0
            if t >= warmup:
                times[v].append(dt)
            per_example[v].add(trainer.last_scores_per_example)
            evaluated[v].add(trainer.last_score_evaluations)
    return {
        v: {
            "n_items": v,
            "median_seconds": float(np.median(times[v])),
            "scores_per_example": sorted(per_example[v]),
            "score_evaluations": sorted(evaluated[v]),
        }
        for v in catalog_sizes
    }


# ---------------------------------------------------------------------------
# feature matrix

FEATURES = [
    ("Session parallel mini-batches", "", ("oracle[iterator_pairs", "reset_lineage")),
    ("Negative sampling", "Mini-batch", ("candidate_set",)),
    ("Negative sampling", "Shared extra", ("candidate_set", "sampler[")),
    ("Loss", "Cross-entropy", ("gradcheck[cross-entropy", "oracle[sampled_ce")),
    ("Loss", "BPR-max", ("gradcheck[bpr-max",)),
    ("Embedding", "No embedding", ("gradcheck[cross-entropy,none", "gradcheck[bpr-max,none", "oracle[indexed_forward=dense_forward,none")),
    ("Embedding", "Separate", ("gradcheck[cross-entropy,separate", "gradcheck[bpr-max,separate", "oracle[indexed_forward=dense_forward,separate")),
    ("Embedding", "Shared", ("gradcheck[cross-entropy,shared", "gradcheck[bpr-max,shared", "shared_embedding_aliasing")),
]


@dataclass
class FeatureRow:
    group: str
    feature: str
    supported: bool
    witnesses: list[str] = field(default_factory=list)

    @property
    def mark(self) -> str:
        return "✓" if self.supported else "✗"


def emit_feature_matrix(reports: list[CheckReport], disabled=()) -> list[FeatureRow]:
    """One row per feature.

    A row is supported when every witness prefix matches at least one check
    and all matching checks passed. Checks whose names start with an entry
    of ``disabled`` are ignored.
    """
    rows = []
    for group, feature, prefixes in FEATURES:
        matched, ok = [], True
        for prefix in prefixes:
            hits = [r for r in reports if r.name.startswith(prefix) and not r.name.startswith(tuple(disabled))]
            ok &= bool(hits) and all(r.passed for r in hits)
            matched += [r.name for r in hits]
        rows.append(FeatureRow(group, feature, ok, matched))
    return rows


def feature_matrix_text(rows: list[FeatureRow]) -> str:
    width = max(len(f"{r.group} {r.feature}") for r in rows) + 2
    lines = ["GRU4Rec feature".ljust(width) + "this implementation", "-" * (width + 19)]
    last = None
    for r in rows:
        group = r.group if r.group != last else ""
        last = r.group
        label = f"{group:<18}{r.feature}" if r.feature else r.group
        lines.append(label.ljust(width) + r.mark)
    return "\n".join(lines) + "\n"


def run_all(seed: int = 7) -> list[CheckReport]:
    return (
        run_gradcheck_suite(seed)
        + [run_reset_check()]
        + run_sampler_check()
        + run_oracle_equivalences()
        + run_bug_catalog_checks()
    )
