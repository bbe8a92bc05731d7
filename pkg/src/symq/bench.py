"""Benchmark suites, scoring and step-wise error analysis.

Suite expressions use ``x_1``/``x_2`` for x/y.  Numbers that are not
integer literals in -3..5 (and ``pi``) become ``c`` slots when parsed, so
``6*sin(x_1)`` has the skeleton ``c*sin(x_1)``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr
from .datagen import CorpusRecord, GenConfig, read_corpus, sample_points
from .env import r_squared
from .errors import DomainTooSmall, EntryMismatch, ParseError, UnknownSuite
from .infer import FitResult

SUITES: dict[str, tuple[tuple[str, str], ...]] = {
    "nguyen": (
        ("Nguyen-1", "x_1**3+x_1**2+x_1"),
        ("Nguyen-2", "x_1**4+x_1**3+x_1**2+x_1"),
        ("Nguyen-3", "x_1**5+x_1**4+x_1**3+x_1**2+x_1"),
        ("Nguyen-4", "x_1**6+x_1**5+x_1**4+x_1**3+x_1**2+x_1"),
        ("Nguyen-5", "sin(x_1**2)*cos(x_1)-1"),
        ("Nguyen-6", "sin(x_1)+sin(x_1+x_1**2)"),
        ("Nguyen-7", "log(x_1)+log(x_1**2+1)"),
        ("Nguyen-8", "sqrt(x_1)"),
        ("Nguyen-9", "sin(x_1)+sin(x_2)"),
        ("Nguyen-10", "2*sin(x_1)*cos(x_2)"),
        ("Nguyen-11", "x_1**x_2"),
        ("Nguyen-12", "x_1**4-x_1**3+1/2*x_2**2-x_2"),
    ),
    "constant": (
        ("Constant-1", "3.39*x_1**3+2.12*x_1**2+1.78*x_1"),
        ("Constant-2", "sin(x_1**2)*cos(x_1)-0.75"),
        ("Constant-3", "sin(1.5*x_1)*cos(0.5*x_2)"),
        ("Constant-4", "2.7*x_1**x_2"),
        ("Constant-5", "sqrt(1.23*x_1)"),
        ("Constant-6", "x_1**0.423"),
        ("Constant-7", "2*sin(1.3*x_1)*cos(x_2)"),
        ("Constant-8", "log(x_1+1.4)+log(x_1**2+1.3)"),
    ),
    "keijzer": (
        ("Keijzer-3", "0.3*x_1*sin(2*pi*x_1)"),
        ("Keijzer-4", "x_1**3*exp(-x_1)*cos(x_1)*sin(x_1)*(sin(x_1**2)*cos(x_1)-1)"),
        ("Keijzer-6", "x_1*(x_1+1)/2"),
        ("Keijzer-7", "log(x_1)"),
        ("Keijzer-8", "sqrt(x_1)"),
        ("Keijzer-9", "log(x_1+sqrt(x_1**2+1))"),
        ("Keijzer-10", "x_1**x_2"),
        ("Keijzer-11", "x_1*x_2+sin((x_1-1)*(x_2-1))"),
        ("Keijzer-12", "x_1**4-x_1**3+x_2**2/2-x_2"),
        ("Keijzer-13", "6*sin(x_1)*cos(x_2)"),
        ("Keijzer-14", "8/(2+x_1**2+x_2**2)"),
        ("Keijzer-15", "x_1**3/5+x_2**3/2-x_2-x_1"),
    ),
    "r": (
        ("R-1", "(x_1+1)**3/(x_1**2-x_1+1)"),
        ("R-2", "(x_1**5-3*x_1**3+1)/(x_1**2+1)"),
        ("R-3", "(x_1**6+x_1**5)/(x_1**4+x_1**3+x_1**2+x_1)"),
    ),
    "feynman": (
        ("Feynman-1", "exp(-x_1**2/2)/sqrt(2*pi)"),
        ("Feynman-2", "exp(-(x_1*x_2**-1)**2/2)/(sqrt(2*pi)*x_2)"),
        ("Feynman-3", "x_1*x_2"),
        ("Feynman-4", "x_1*x_2"),
        ("Feynman-5", "1/2*x_1*x_2**2"),
        ("Feynman-6", "x_1/x_2"),
        ("Feynman-7", "sin(x_1)/sin(x_2)"),
        ("Feynman-8", "x_1/x_2"),
        ("Feynman-9", "x_1*x_2/(2*pi)"),
        ("Feynman-10", "1.5*x_1*x_2"),
        ("Feynman-11", "x_1/(4*pi*x_2**2)"),
        ("Feynman-12", "x_1*x_2**2/x_1"),
        ("Feynman-13", "x_1*x_2**2"),
        ("Feynman-14", "x_1/(2*(1+x_2))"),
        ("Feynman-15", "x_1*x_2/(2*pi)"),
    ),
}
SUITE_NAMES = tuple(SUITES)
SCORE_POINTS = 100
_SUITE_SEEDS = {name: i + 1 for i, name in enumerate(SUITE_NAMES)}


@dataclass(frozen=True)
class Entry:
    label: str
    expression: str
    tree: expr.ExprTree
    constants: tuple[float, ...]
    n_vars: int

    @property
    def skeleton(self) -> str:
        return expr.to_skeleton_string(self.tree)

    @property
    def canonical(self) -> str:
        return expr.canonicalize(self.tree)

    def evaluate(self, x1, x2) -> np.ndarray:
        return expr.evaluate_many(self.tree, self.constants, x1, x2)


@dataclass(frozen=True)
class BenchmarkSuite:
    name: str
    entries: tuple[Entry, ...]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.entries)


def _entry(label: str, s: str) -> Entry:
    try:
        tree, values = expr.parse_expression(s)
    except ParseError as e:
        raise ParseError(f"{label}: {e}", e.position) from e
    consts = tuple(1.0 if v is None else float(v) for v in values)
    return Entry(label, s, tree, consts, len(expr.variables_used(tree)))


def load_suite(name: str) -> BenchmarkSuite:
    """A named suite, or a corpus file treated as an SSDNC-style set."""
    key = str(name).lower()
    if key in SUITES:
        return BenchmarkSuite(key, tuple(_entry(lab, s) for lab, s in SUITES[key]), _SUITE_SEEDS[key])
    if not os.path.isfile(name):
        raise UnknownSuite(f"unknown suite {name!r}; choose from {', '.join(SUITE_NAMES)} or a corpus path")
    records = read_corpus(name)
    entries = []
    for i, r in enumerate(records):
        tree = r.tree
        entries.append(Entry(f"record-{i + 1}", expr.to_expression_string(tree, r.constants), tree,
                             tuple(r.constants), len(expr.variables_used(tree))))
    return BenchmarkSuite(str(name), tuple(entries), 0)


def suite_checksum() -> str:
    blob = json.dumps(SUITES, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def entry_points(entry: Entry, n: int, seed: int, salt: int, cfg: GenConfig | None = None) -> np.ndarray:
    """``n`` valid points for an entry, drawn like the corpus generator draws them."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng([seed, salt, int(hashlib.sha256(entry.label.encode()).hexdigest()[:8], 16)])
    return sample_points(entry.tree, entry.constants, n, rng, cfg)


def fit_points(suite: BenchmarkSuite, entry: Entry, n: int = SCORE_POINTS) -> np.ndarray:
    return entry_points(entry, n, suite.seed, 0)


def holdout_points(suite: BenchmarkSuite, entry: Entry, n: int = SCORE_POINTS) -> np.ndarray:
    return entry_points(entry, n, suite.seed, 1)


# ---------------------------------------------------------------------------
# Scoring


@dataclass
class EvalReport:
    suite: str
    rows: list[dict]
    recovery_rate: float
    mean_r2: float
    errors: "ErrorAnalysis | None" = None

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"suite: {self.suite}\n")
        out.write("label\trecovered\tr2\tpredicted\ttruth\tflag\n")
        for r in self.rows:
            out.write(f"{r['label']}\t{int(r['recovered'])}\t{r['r2']:.6f}\t{r['predicted']}\t{r['truth']}\t{r['flag']}\n")
        out.write(f"[aggregates]\nentries={len(self.rows)}\nrecovery_rate={self.recovery_rate:.6f}\nmean_r2={self.mean_r2:.6f}\n")
        return out.getvalue()


def _holdout_r2(pred: FitResult, points: np.ndarray) -> float:
    y_hat = expr.evaluate_many(pred.tree, pred.constants, points[:, 0], points[:, 1])
    if np.isnan(y_hat).any():
        return 0.0
    return float(min(1.0, max(0.0, r_squared(points[:, 2], y_hat))))


def score(preds: Sequence[Sequence[FitResult]], suite: BenchmarkSuite, holdouts: Sequence[np.ndarray] | None = None) -> EvalReport:
    """Recovery and held-out R² (clamped to [0, 1]) of each entry's top prediction."""
    if len(preds) != len(suite.entries):
        raise EntryMismatch(f"{len(preds)} prediction lists for {len(suite.entries)} entries")
    rows = []
    for i, (entry, plist) in enumerate(zip(suite.entries, preds)):
        pts = holdouts[i] if holdouts is not None else holdout_points(suite, entry)
        if not plist:
            rows.append(dict(label=entry.label, truth=entry.skeleton, predicted="", recovered=False, r2=0.0, flag="no-prediction"))
            continue
        top = plist[0]
        rows.append(
            dict(
                label=entry.label,
                truth=entry.skeleton,
                predicted=top.skeleton,
                recovered=expr.canonicalize(top.tree) == entry.canonical,
                r2=_holdout_r2(top, pts),
                flag="",
            )
        )
    n = len(rows)
    return EvalReport(
        suite.name,
        rows,
        sum(r["recovered"] for r in rows) / n if n else 0.0,
        float(np.mean([r["r2"] for r in rows])) if n else 0.0,
    )


def weighted_average(values: Sequence[float], counts: Sequence[int]) -> float:
    v = np.asarray(values, dtype=float)
    c = np.asarray(counts, dtype=float)
    if v.shape != c.shape or c.sum() <= 0:
        raise EntryMismatch("values and counts must align and counts must be positive")
    return float((v * c).sum() / c.sum())


def aggregate(reports: Sequence[EvalReport]) -> dict:
    return {
        "suites": {r.suite: {"entries": len(r.rows), "recovery_rate": r.recovery_rate, "mean_r2": r.mean_r2} for r in reports},
        "weighted_mean_r2": weighted_average([r.mean_r2 for r in reports], [len(r.rows) for r in reports]),
        "weighted_recovery_rate": weighted_average([r.recovery_rate for r in reports], [len(r.rows) for r in reports]),
    }


def run_suite(model, suite: BenchmarkSuite, beam: int = 128, restarts: int = 20, jobs: int = 1) -> EvalReport:
    """Predict every entry from its fitting points and score on held-out points."""
    from .infer import predict

    preds, holdouts = [], []
    for entry in suite.entries:
        try:
            pts = fit_points(suite, entry)
            holdouts.append(holdout_points(suite, entry))
        except DomainTooSmall:
            preds.append([])
            holdouts.append(None)
            continue
        preds.append(predict(model, pts, beam=beam, restarts=restarts, jobs=jobs))
    return score(preds, suite, holdouts)


# ---------------------------------------------------------------------------
# Step-wise error analysis

N_BINS = 10


@dataclass
class ErrorAnalysis:
    n_decisions: int
    n_errors: int
    bins: list[dict]  # per progress decile: decisions, errors, error_rate
    ops: list[dict]  # per demo op: decisions, errors, train_frequency
    wrong_choices: dict[int, dict[int, float]] = field(default_factory=dict)

    @property
    def error_fraction(self) -> float:
        return self.n_errors / self.n_decisions if self.n_decisions else 0.0

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"decisions={self.n_decisions}\nerrors={self.n_errors}\nerror_fraction={self.error_fraction:.6f}\n")
        out.write("[progress]\n")
        for b in self.bins:
            out.write(f"{b['bin_lo']:.1f}-{b['bin_hi']:.1f}\t{b['decisions']}\t{b['errors']}\t{b['error_rate']:.6f}\n")
        out.write("[ops]\n")
        for o in self.ops:
            out.write(f"{o['op']}\t{o['decisions']}\t{o['errors']}\t{o['train_frequency']:.6f}\n")
        return out.getvalue()

    def write_csvs(self, prefix) -> list[str]:
        paths = [f"{prefix}.progress.csv", f"{prefix}.ops.csv", f"{prefix}.wrong_choices.csv"]
        with open(paths[0], "w", newline="") as fh:
            w = csv.DictWriter(fh, ["bin_lo", "bin_hi", "decisions", "errors", "error_rate"])
            w.writeheader()
            w.writerows(self.bins)
        with open(paths[1], "w", newline="") as fh:
            w = csv.DictWriter(fh, ["op", "token", "decisions", "errors", "train_frequency"])
            w.writeheader()
            w.writerows(self.ops)
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["demo_op", "demo_token", "chosen_op", "chosen_token", "share"])
            for demo, dist in sorted(self.wrong_choices.items()):
                for chosen, share in sorted(dist.items()):
                    w.writerow([demo, expr.OPS[demo].token, chosen, expr.OPS[chosen].token, repr(share)])
        return paths


def progress_bins(steps: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Decile index of decision t (0-based) in a sequence of length T, by (t+1)/T."""
    frac = (steps + 1) / lengths
    return np.clip(np.ceil(frac * N_BINS - 1e-9).astype(int) - 1, 0, N_BINS - 1)


def error_analysis(model, records: Sequence[CorpusRecord], train_records: Sequence[CorpusRecord] | None = None) -> ErrorAnalysis:
    """Where, on which operators and with which wrong choices the model errs.

    Decisions are taken on ground-truth prefixes.  Operator frequencies come
    from ``train_records`` (the evaluation records when omitted).
    """
    from .train import step_predictions

    _, steps, lengths, demos, preds = step_predictions(model, list(records))
    wrong = demos != preds
    bins = progress_bins(steps, lengths)
    bin_rows = []
    for b in range(N_BINS):
        sel = bins == b
        d, e = int(sel.sum()), int((wrong & sel).sum())
        bin_rows.append(dict(bin_lo=b / N_BINS, bin_hi=(b + 1) / N_BINS, decisions=d, errors=e, error_rate=e / d if d else 0.0))
    freq = Counter(a for r in (train_records if train_records is not None else records) for a in r.demo_actions)
    total = sum(freq.values()) or 1
    op_rows = []
    for op in range(expr.N_ACTIONS):
        sel = demos == op
        op_rows.append(
            dict(op=op, token=expr.OPS[op].token, decisions=int(sel.sum()), errors=int((wrong & sel).sum()),
                 train_frequency=freq[op] / total)
        )
    dists: dict[int, dict[int, float]] = {}
    for op in np.unique(demos[wrong]):
        chosen = Counter(preds[wrong & (demos == op)].tolist())
        n = sum(chosen.values())
        dists[int(op)] = {int(k): v / n for k, v in chosen.items()}
    return ErrorAnalysis(int(demos.size), int(wrong.sum()), bin_rows, op_rows, dists)
