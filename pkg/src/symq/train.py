"""Offline training of the Q-model.

The decision loss is softmax cross-entropy over the 30 actions at every
demonstration step.  A supervised contrastive term pulls together the point
embeddings of records that share a skeleton.
"""

from __future__ import annotations

import json
import time
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import expr
from .datagen import CorpusRecord
from .errors import ConfigError, EmptyCorpus, NoPositives
from .infer import greedy_decode, log_softmax
from .model import DESK, DecisionBatch, Dims, QModel, clip_grads


@dataclass
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-4
    alpha: float = 0.2
    tau: float = 0.07
    grad_clip: float = 1.0
    steps: int = 1000
    seed: int = 0
    optimizer: str = "sgd"  # sgd | adam
    momentum: float = 0.0
    eval_every: int = 100
    eval_limit: int = 1000  # records used for the logged accuracies

    def validate(self) -> "TrainConfig":
        for name in ("batch_size", "learning_rate", "tau", "grad_clip", "eval_every", "eval_limit"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.steps < 0 or self.alpha < 0:
            raise ConfigError("steps and alpha must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        return self


# ---------------------------------------------------------------------------
# Losses


def softmax(q: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(q))


def offline_loss(q, demo: int) -> float:
    return float(-log_softmax(np.asarray(q, dtype=float))[demo])


def offline_loss_grad(q, demo: int) -> np.ndarray:
    g = softmax(np.asarray(q, dtype=float))
    g[demo] -= 1.0
    return g


def cross_entropy(q: np.ndarray, targets: np.ndarray, weights: np.ndarray | None = None):
    """Weighted mean of per-row cross-entropy and its gradient w.r.t. ``q``."""
    r = q.shape[0]
    lsm = log_softmax(q)
    rows = np.arange(r)
    w = np.ones(r) if weights is None else np.asarray(weights, dtype=float)
    loss = float(-(w * lsm[rows, targets]).sum() / r)
    dq = np.exp(lsm)
    dq[rows, targets] -= 1.0
    return loss, dq * (w / r)[:, None]


@dataclass
class ContrastiveBatch:
    embeddings: np.ndarray
    labels: list[str]

    def positives(self) -> list[np.ndarray]:
        labels = np.asarray(self.labels)
        out = []
        for i, lab in enumerate(labels):
            p = np.flatnonzero(labels == lab)
            out.append(p[p != i])
        return out


def contrastive_loss(z: np.ndarray, labels: Sequence[str], tau: float):
    """Supervised contrastive loss (mean over anchors) and its gradient."""
    n = z.shape[0]
    pos = ContrastiveBatch(z, list(labels)).positives()
    for i, p in enumerate(pos):
        if p.size == 0:
            raise NoPositives(f"record {i} has no positive in the batch")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    zh = z / norms
    s = zh @ zh.T / tau
    off = ~np.eye(n, dtype=bool)
    masked = np.where(off, s, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(masked - m).sum(axis=1))
    pmask = np.zeros((n, n))
    for i, p in enumerate(pos):
        pmask[i, p] = 1.0 / p.size
    loss = float(-((s - lse[:, None]) * pmask).sum() / n)
    prob = np.where(off, np.exp(masked - lse[:, None]), 0.0)
    ds = (prob - pmask) / n
    dzh = (ds + ds.T) @ zh / tau
    dz = (dzh - zh * (zh * dzh).sum(axis=1, keepdims=True)) / norms
    return loss, dz


class LossFn:
    """``loss_fn(q, zp)`` for :meth:`QModel.backward`; remembers its parts."""

    def __init__(self, batch: DecisionBatch, alpha: float, tau: float):
        self.batch = batch
        self.alpha = alpha
        self.tau = tau
        self.offline = None
        self.contrastive = None

    def __call__(self, q, zp):
        self.offline, dq = cross_entropy(q, self.batch.targets, self.batch.weights)
        if self.alpha > 0:
            self.contrastive, dz = contrastive_loss(zp, self.batch.labels, self.tau)
            return self.offline + self.alpha * self.contrastive, dq, self.alpha * dz
        self.contrastive = 0.0
        return self.offline, dq, None


def make_loss_fn(batch: DecisionBatch, alpha: float = 0.2, tau: float = 0.07) -> LossFn:
    return LossFn(batch, alpha, tau)


def total_loss(model: QModel, batch: DecisionBatch, cfg: TrainConfig) -> dict:
    q, zp = model.forward(batch)
    fn = make_loss_fn(batch, cfg.alpha, cfg.tau)
    total = fn(q, zp)[0]
    return {"loss": total, "offline_loss": fn.offline, "contrastive_loss": fn.contrastive}


# ---------------------------------------------------------------------------
# Batches


def decision_batch(records: Sequence[CorpusRecord], labels: Sequence[str] | None = None) -> DecisionBatch:
    """One row per demonstration step of every record."""
    prefixes, rec, targets = [], [], []
    for i, r in enumerate(records):
        acts = list(r.demo_actions)
        for t, a in enumerate(acts):
            prefixes.append(acts[:t])
            rec.append(i)
            targets.append(a)
    return DecisionBatch(
        [r.points for r in records],
        np.array(rec, dtype=np.int64),
        prefixes,
        targets=np.array(targets, dtype=np.int64),
        labels=None if labels is None else list(labels),
    )


def group_by_skeleton(records: Iterable[CorpusRecord]) -> dict[str, list[CorpusRecord]]:
    groups: dict[str, list[CorpusRecord]] = defaultdict(list)
    for r in records:
        groups[expr.canonicalize(r.tree)].append(r)
    return dict(groups)


def sample_batch(groups: dict[str, list[CorpusRecord]], batch_size: int, rng: np.random.Generator) -> DecisionBatch:
    """B/2 skeletons, two distinct instantiations of each."""
    keys = sorted(k for k, v in groups.items() if len(v) >= 2)
    if not keys:
        raise EmptyCorpus("no skeleton has two or more records")
    n = min(batch_size // 2, len(keys))
    chosen = rng.choice(len(keys), size=n, replace=False)
    records, labels = [], []
    for j in chosen:
        grp = groups[keys[j]]
        for i in rng.choice(len(grp), size=2, replace=False):
            records.append(grp[i])
            labels.append(keys[j])
    return decision_batch(records, labels)


# ---------------------------------------------------------------------------
# Optimisers


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.state: dict[str, np.ndarray] = {}

    def update(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            if self.momentum:
                v = self.state.setdefault(f"opt.v.{k}", np.zeros_like(g))
                v *= self.momentum
                v += g
                g = v
            params[k] -= self.lr * g


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.state: dict[str, np.ndarray] = {"opt.t": np.zeros(1)}

    def update(self, params: dict, grads: dict) -> None:
        self.state["opt.t"] += 1
        t = float(self.state["opt.t"][0])
        for k, g in grads.items():
            m = self.state.setdefault(f"opt.m.{k}", np.zeros_like(g))
            v = self.state.setdefault(f"opt.v.{k}", np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1**t)
            vh = v / (1 - self.b2**t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def make_optimizer(cfg: TrainConfig, state: dict | None = None):
    opt = Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate, cfg.momentum)
    if state:
        opt.state.update({k: v.copy() for k, v in state.items() if k.startswith("opt.")})
    return opt


# ---------------------------------------------------------------------------
# Metrics


def step_predictions(model: QModel, records: Sequence[CorpusRecord], chunk: int = 256):
    """Argmax action at every ground-truth prefix.

    Returns (record index, step t, length T, demo action, predicted action)
    arrays, one entry per decision.
    """
    rec_i, steps, lengths, demos, preds = [], [], [], [], []
    for lo in range(0, len(records), chunk):
        part = records[lo : lo + chunk]
        batch = decision_batch(part)
        q, _ = model.forward(batch)
        preds.append(q.argmax(axis=1))
        demos.append(batch.targets)
        rec_i.append(batch.rec + lo)
        for r in part:
            T = len(r.demo_actions)
            steps.append(np.arange(T))
            lengths.append(np.full(T, T))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    return cat(rec_i), cat(steps), cat(lengths), cat(demos), cat(preds)


def step_accuracy(model: QModel, records: Sequence[CorpusRecord]) -> float:
    _, _, _, demos, preds = step_predictions(model, records)
    if demos.size == 0:
        raise EmptyCorpus("no decisions to evaluate")
    return float(np.mean(demos == preds))


def equation_accuracy(model: QModel, records: Sequence[CorpusRecord], chunk: int = 256) -> float:
    if not records:
        raise EmptyCorpus("no records to evaluate")
    hits = 0
    for lo in range(0, len(records), chunk):
        part = records[lo : lo + chunk]
        decoded = greedy_decode(model, [r.points for r in part])
        hits += sum(d == list(r.demo_actions) for d, r in zip(decoded, part))
    return hits / len(records)


# ---------------------------------------------------------------------------
# Training loop


def fit(
    corpus: Sequence[CorpusRecord],
    cfg: TrainConfig,
    model: QModel | None = None,
    dims: Dims = DESK,
    metrics_path=None,
    eval_records: Sequence[CorpusRecord] | None = None,
    optimizer_state: dict | None = None,
    callback: Callable[[dict], bool | None] | None = None,
):
    """Train ``model`` (fresh if None) for up to ``cfg.steps`` steps.

    Returns ``(model, log, optimizer)`` where ``log`` holds one metrics dict
    per evaluation.  With ``metrics_path`` each dict is also appended to that
    file as one JSON line.  A ``callback`` that returns True stops training
    after the current evaluation.
    """
    cfg.validate()
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    groups = group_by_skeleton(corpus)
    model = model or QModel(dims, seed=cfg.seed)
    # continue the batch stream when resuming from a checkpoint
    rng = np.random.default_rng([cfg.seed, model.step])
    opt = make_optimizer(cfg, optimizer_state)
    evals = list(eval_records if eval_records is not None else corpus)[: cfg.eval_limit]
    log: list[dict] = []
    fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    t0 = time.perf_counter()
    try:
        for _ in range(cfg.steps):
            batch = sample_batch(groups, cfg.batch_size, rng)
            loss_fn = make_loss_fn(batch, cfg.alpha, cfg.tau)
            loss, grads = model.backward(batch, loss_fn)
            clip_grads(grads, cfg.grad_clip)
            opt.update(model.params, grads)
            model.step += 1
            if model.step % cfg.eval_every == 0 or model.step == 1:
                row = {
                    "step": model.step,
                    "loss": loss,
                    "offline_loss": loss_fn.offline,
                    "contrastive_loss": loss_fn.contrastive,
                    "step_acc": step_accuracy(model, evals),
                    "eq_acc": equation_accuracy(model, evals),
                    "wallclock_s": round(time.perf_counter() - t0, 3),
                }
                log.append(row)
                if fh:
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
                if callback and callback(row):
                    break
    finally:
        if fh:
            fh.close()
    return model, log, opt


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
