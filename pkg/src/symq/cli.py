"""Command-line entry point: ``symq {gen,train,infer,online,bench,analyze}``.

Option values resolve as: command-line flag, then the matching key in the
``--config`` INI section, then ``SYMQ_SEED`` (seed only), then the built-in
default.  The resolved values are written to ``<output>.config.ini`` and can
be fed back through ``--config`` to repeat a run.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import __version__
from .errors import ConfigError, SymQError

log = logging.getLogger("symq")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


@dataclass(frozen=True)
class Opt:
    name: str  # config key; the flag is --name with _ -> -
    type: Callable[[str], Any]
    default: Any
    help: str
    short: str | None = None


def _cores() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


SEED = Opt("seed", int, 0, "random seed for every stage of the command")
JOBS = Opt("jobs", int, None, "worker processes (default: available cores)")

COMMANDS: dict[str, list[Opt]] = {
    "gen": [
        Opt("output", str, None, "corpus file to write", "-o"),
        Opt("skeletons", int, 100, "distinct skeletons"),
        Opt("constants", int, 50, "constant instantiations per skeleton"),
        Opt("points", int, 100, "points per expression"),
        Opt("max_ops", int, 24, "maximum skeleton length in actions"),
        SEED,
    ],
    "train": [
        Opt("corpus", str, None, "training corpus", "-c"),
        Opt("output", str, None, "checkpoint to write", "-o"),
        Opt("steps", int, 1000, "optimisation steps"),
        Opt("batch_size", int, 512, "records per batch (two per skeleton)"),
        Opt("lr", float, 1e-4, "learning rate"),
        Opt("momentum", float, 0.0, "SGD momentum"),
        Opt("optimizer", str, "sgd", "sgd or adam"),
        Opt("alpha", float, 0.2, "weight of the contrastive term"),
        Opt("tau", float, 0.07, "contrastive temperature"),
        Opt("grad_clip", float, 1.0, "gradient max-norm"),
        Opt("eval_every", int, 100, "steps between metric evaluations"),
        Opt("dims", str, "desk", "model size preset: tiny, desk or full"),
        Opt("resume", str, None, "checkpoint to continue from"),
        Opt("metrics", str, None, "metrics log (default: <output>.metrics.ndj)"),
        SEED,
    ],
    "infer": [
        Opt("model", str, None, "checkpoint", "-m"),
        Opt("points", str, None, "points file, one [x1, x2, y] JSON array per line", "-p"),
        Opt("output", str, None, "prediction file (default: stdout)", "-o"),
        Opt("beam", int, 128, "beam size"),
        Opt("restarts", int, 20, "BFGS restarts per skeleton"),
        Opt("max_len", int, None, "maximum skeleton length (default: model's)"),
        SEED,
        JOBS,
    ],
    "online": [
        Opt("model", str, None, "pretrained checkpoint", "-m"),
        Opt("points", str, None, "points file", "-p"),
        Opt("output", str, None, "refined checkpoint to write", "-o"),
        Opt("budget", int, 50, "sampled expressions"),
        Opt("beta", float, 0.7, "risk threshold coefficient"),
        Opt("lr", float, 0.01, "learning rate"),
        Opt("temperature", float, 3.0, "sampling temperature"),
        Opt("capacity", int, 512, "replay buffer capacity"),
        Opt("history", str, None, "history log (default: <output>.history.ndj)"),
        SEED,
    ],
    "bench": [
        Opt("model", str, None, "checkpoint", "-m"),
        Opt("suite", str, "all", "nguyen, constant, keijzer, r, feynman, all, or a corpus path"),
        Opt("output", str, None, "report file (default: stdout)", "-o"),
        Opt("beam", int, 128, "beam size"),
        Opt("restarts", int, 20, "BFGS restarts per skeleton"),
        SEED,
        JOBS,
    ],
    "analyze": [
        Opt("model", str, None, "checkpoint", "-m"),
        Opt("corpus", str, None, "evaluation corpus", "-c"),
        Opt("train_corpus", str, None, "corpus for operator frequencies (default: the evaluation corpus)"),
        Opt("output", str, None, "report prefix; CSVs go to <prefix>.*.csv", "-o"),
        SEED,
    ],
}
REQUIRED = {
    "gen": ["output"],
    "train": ["corpus", "output"],
    "infer": ["model", "points"],
    "online": ["model", "points", "output"],
    "bench": ["model"],
    "analyze": ["model", "corpus", "output"],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symq", description="Symbolic regression with a sequential Q-model.")
    p.add_argument("--version", action="version", version=f"symq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        sp = sub.add_parser(cmd, help=(HANDLERS[cmd].__doc__ or "").strip().splitlines()[0])
        sp.add_argument("--config", help="INI file; keys of section [%s] (and [run] for seed) fill unset flags" % cmd)
        for o in opts:
            flags = [f"--{o.name.replace('_', '-')}"] + ([o.short] if o.short else [])
            sp.add_argument(*flags, dest=o.name, type=o.type, default=None, help=f"{o.help} (default: {o.default})")
    return p


def resolve(cmd: str, ns: argparse.Namespace, env=os.environ) -> dict:
    """Merge flags, config file, environment and defaults into one dict."""
    section: dict[str, str] = {}
    run: dict[str, str] = {}
    if ns.config:
        cp = configparser.ConfigParser()
        if not cp.read(ns.config):
            raise ConfigError(f"cannot read config file {ns.config}")
        section = dict(cp[cmd]) if cp.has_section(cmd) else {}
        run = dict(cp["run"]) if cp.has_section("run") else {}
    out = {}
    for o in COMMANDS[cmd]:
        val = getattr(ns, o.name)
        if val is None and o.name in section:
            raw = section[o.name]
            try:
                val = None if raw == "" else o.type(raw)
            except ValueError as e:
                raise ConfigError(f"[{cmd}] {o.name}: {e}") from e
        if val is None and o.name == "seed":
            raw = run.get("seed", env.get("SYMQ_SEED"))
            if raw not in (None, ""):
                try:
                    val = int(raw)
                except ValueError as e:
                    raise ConfigError(f"seed must be an integer, got {raw!r}") from e
        if val is None:
            val = o.default
        out[o.name] = val
    if "jobs" in out and out["jobs"] is None:
        out["jobs"] = _cores()
    missing = [k for k in REQUIRED[cmd] if out.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return out


def write_run_config(cmd: str, cfg: dict, path: str) -> str:
    cp = configparser.ConfigParser()
    cp[cmd] = {k: "" if v is None else str(v) for k, v in cfg.items()}
    out = f"{path}.config.ini"
    with open(out, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return out


def read_points(path) -> np.ndarray:
    from .errors import CorpusError

    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if isinstance(row, dict):
                    row = [row["x1"], row["x2"], row["y"]]
                vals = [float(v) for v in row]
                if len(vals) != 3:
                    raise ValueError("expected three numbers")
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusError(f"bad point: {e}", line=lineno) from e
            rows.append(vals)
    return np.asarray(rows, dtype=float).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(cfg: dict) -> int:
    """Generate a training corpus."""
    from .datagen import GenConfig, build_corpus

    gc = GenConfig(
        n_skeletons=cfg["skeletons"],
        constants_per_skeleton=cfg["constants"],
        points_per_expression=cfg["points"],
        max_ops=cfg["max_ops"],
        seed=cfg["seed"],
    )
    n = build_corpus(gc.validate(), cfg["output"])
    write_run_config("gen", cfg, cfg["output"])
    log.info("wrote %d records to %s", n, cfg["output"])
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    """Train a Q-model on a corpus."""
    from . import model as M
    from .datagen import read_corpus
    from .train import TrainConfig, fit

    if cfg["dims"] not in M.PRESETS:
        raise ConfigError(f"unknown dims preset {cfg['dims']!r}; choose from {', '.join(M.PRESETS)}")
    tc = TrainConfig(
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        alpha=cfg["alpha"],
        tau=cfg["tau"],
        grad_clip=cfg["grad_clip"],
        steps=cfg["steps"],
        seed=cfg["seed"],
        optimizer=cfg["optimizer"],
        momentum=cfg["momentum"],
        eval_every=cfg["eval_every"],
    ).validate()
    corpus = read_corpus(cfg["corpus"])
    model, opt_state = None, None
    if cfg["resume"]:
        model, opt_state = M.load(cfg["resume"], with_extra=True)
    metrics = cfg["metrics"] or f"{cfg['output']}.metrics.ndj"
    cb = (lambda row: log.info("step %d loss %.4f step_acc %.3f eq_acc %.3f", row["step"], row["loss"], row["step_acc"], row["eq_acc"]))
    model, _, opt = fit(corpus, tc, model=model, dims=M.PRESETS[cfg["dims"]], metrics_path=metrics,
                        optimizer_state=opt_state, callback=cb)
    M.save(model, cfg["output"], opt.state)
    write_run_config("train", cfg, cfg["output"])
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    """Predict expressions for a points file."""
    from . import model as M
    from .infer import predict

    m = M.load(cfg["model"])
    pts = read_points(cfg["points"])
    res = predict(m, pts, beam=cfg["beam"], max_len=cfg["max_len"], restarts=cfg["restarts"], seed=cfg["seed"],
                  jobs=cfg["jobs"])
    lines = [json.dumps(r.to_dict(rank=i)) for i, r in enumerate(res, 1)]
    if cfg["output"]:
        with open(cfg["output"], "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))
        write_run_config("infer", cfg, cfg["output"])
    else:
        sys.stdout.write("".join(line + "\n" for line in lines))
    return EXIT_OK


def cmd_online(cfg: dict) -> int:
    """Refine a model on one instance by online search."""
    from . import model as M
    from .online import OnlineConfig, explore

    m = M.load(cfg["model"])
    pts = read_points(cfg["points"])
    oc = OnlineConfig(budget=cfg["budget"], beta=cfg["beta"], learning_rate=cfg["lr"], capacity=cfg["capacity"],
                      seed=cfg["seed"], temperature=cfg["temperature"])
    history = cfg["history"] or f"{cfg['output']}.history.ndj"
    res = explore(m, pts, oc, history_path=history)
    M.save(res.model, cfg["output"])
    write_run_config("online", cfg, cfg["output"])
    best = None if res.best is None else {"skeleton": res.best.skeleton, "expression": res.best.expression, "r2": res.best.r2}
    sys.stdout.write(json.dumps({"R_star": res.r_star, "best": best}) + "\n")
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    """Score a model on benchmark suites."""
    from . import bench
    from . import model as M

    m = M.load(cfg["model"])
    names = bench.SUITE_NAMES if cfg["suite"] == "all" else [cfg["suite"]]
    reports = []
    for name in names:
        suite = bench.load_suite(name)
        log.info("suite %s: %d entries", suite.name, len(suite))
        reports.append(bench.run_suite(m, suite, beam=cfg["beam"], restarts=cfg["restarts"], jobs=cfg["jobs"]))
    text = "".join(r.to_text() + "\n" for r in reports)
    if len(reports) > 1:
        agg = bench.aggregate(reports)
        text += (f"[weighted]\nentries={sum(len(r.rows) for r in reports)}\n"
                 f"weighted_mean_r2={agg['weighted_mean_r2']:.6f}\n"
                 f"weighted_recovery_rate={agg['weighted_recovery_rate']:.6f}\n")
    if cfg["output"]:
        with open(cfg["output"], "w", encoding="utf-8") as fh:
            fh.write(text)
        write_run_config("bench", cfg, cfg["output"])
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    """Step-wise error analysis with CSV plot data."""
    from . import bench
    from . import model as M
    from .datagen import read_corpus

    m = M.load(cfg["model"])
    records = read_corpus(cfg["corpus"])
    train_records = read_corpus(cfg["train_corpus"]) if cfg["train_corpus"] else None
    ea = bench.error_analysis(m, records, train_records)
    prefix = cfg["output"]
    with open(f"{prefix}.report.txt", "w", encoding="utf-8") as fh:
        fh.write(ea.to_text())
    for p in ea.write_csvs(prefix):
        log.info("wrote %s", p)
    write_run_config("analyze", cfg, prefix)
    return EXIT_OK


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "online": cmd_online,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"symq {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SymQError, OSError) as e:
        print(f"symq {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
