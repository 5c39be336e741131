"""Experiment harness: configuration, the seven experiments and their artifacts.

Every experiment writes row-level CSV files plus ``summary.txt`` (computed
from those rows) into its output directory.  Wall-clock timings go to a
separate ``timing.json`` so that the CSV and summary files are a pure
function of the configuration and seed.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import expfam
from .bayes import batch_fit, loo_residuals, predict
from .data import (
    Dataset,
    classification_error,
    compound_gamma_problem,
    load_csv_dataset,
    stratified_subsample,
    synthetic_logistic,
)
from .errors import IoFailure, KernelEPError, ParseError, PreconditionError
from .expfam import ExpFamMessage, Family, SuffStats
from .features import (
    FeatureMap,
    MVFeatureMap,
    gaussian_embedding_kernel_matrix,
    mean_variance_vector,
    median_heuristic,
    product_embedding_features,
    stage1_features,
    sum_embedding_features,
)
from .graph import build_compound_gamma_graph, build_logistic_graph, posterior_mean_w, run_ep
from .kjit import JitOperator, OperatorRecord, load_operator, save_operator
from .oracle import (
    CompoundGammaFactor,
    ImportanceSamplingOperator,
    LogisticFactor,
    Proposal,
    QuadratureOperator,
)

EXPERIMENTS = ("batch", "uncertainty", "jit-logistic", "compound-gamma", "uci",
               "kernel-compare", "feature-study")
ORACLES = ("quadrature", "sampling")
OUTPUT_DIR_ENV = "KERNEL_EP_OUTPUT_DIR"
LOGISTIC_FAMILIES = (Family.GAUSSIAN, Family.BETA)
PERCENTILES = (1, 5, 25, 50, 75, 95, 99)

# stand-ins for the four UCI sets: (name, d, weight scale, rows)
STAND_INS = (("banknote-like", 4, 3.0, 1372), ("blood-like", 4, 0.7, 748),
             ("fertility-like", 9, 1.0, 100), ("ionosphere-like", 34, 0.5, 351))


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    output_dir: str = "results"
    # model
    d: int = 5
    n: int = 100
    n_problems: int = 10
    ep_iters: int = 10
    damping: float = 1.0
    convergence_tol: float = 0.0
    n_test: int = 1000
    # message pools
    n_datasets: int = 5
    collect_iters: int = 5
    n_train_messages: int = 2000
    n_test_messages: int = 500
    cv: bool = True
    # operator
    d_in: int = 300
    d_out: int = 500
    sigma_y2: float = 1e-4
    sigma_02: float = 1.0
    threshold: float = -8.5
    minibatch: int = 300
    # oracle
    oracle: str = "quadrature"
    proposal_var: float = 200.0
    particles: int = 500_000
    baselines: Tuple[str, ...] = ("quadrature",)
    # compound gamma
    s1: float = 1.0
    r1: float = 1.0
    s2: float = 1.0
    n_min: int = 10
    n_max: int = 100
    # uci
    datasets: Tuple[str, ...] = ()
    label_column: str = "-1"
    n_train: int = 200
    # uncertainty curves, (intercept, slope) and (intercept, curvature) of log variance in the mean
    line: Tuple[float, ...] = (2.5, 0.2)
    parabola: Tuple[float, ...] = (-0.7, 0.02)
    line_range: Tuple[float, ...] = (-15.0, 15.0)
    parabola_range: Tuple[float, ...] = (-8.0, 8.0)
    curve_points: int = 61
    shift_sd: float = 10.0
    # feature study
    d_in_grid: Tuple[int, ...] = (50, 100, 200, 500)
    d_out_grid: Tuple[int, ...] = (50, 100, 200, 500, 1000, 2000)
    feature_tuples: int = 100
    feature_reps: int = 3
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ParseError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.oracle not in ORACLES:
            raise ParseError(f"unknown oracle {self.oracle!r}; choose from {ORACLES}")
        for b in self.baselines:
            if b not in ORACLES:
                raise ParseError(f"unknown baseline {b!r}")
        for path in self.datasets:
            if not Path(path).is_file():
                raise IoFailure(f"dataset file {path} does not exist")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(name: str, text: str):
    f = _FIELD_TYPES[name]
    default = f.default
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    try:
        if kind.startswith("Tuple"):
            items = [t.strip() for t in text.split(",") if t.strip()]
            elem = "str" if "str" in kind else ("int" if "int" in kind else "float")
            return tuple({"str": str, "int": int, "float": float}[elem](t) for t in items)
        if kind == "bool":
            return text.strip().lower() in ("1", "true", "yes", "on")
        if kind == "int":
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind == "float":
            return float(text)
        return text.strip()
    except ValueError:
        raise ParseError(f"bad value {text!r} for {name} (default {default!r})") from None


def config_from_mapping(values: Dict[str, str]) -> ExperimentConfig:
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ParseError(f"unknown config keys: {', '.join(unknown)}")
    for key in ("experiment", "seed"):
        if key not in values:
            raise ParseError(f"config must set {key!r}")
    return ExperimentConfig(**{k: _convert(k, v) for k, v in values.items()})


def load_config(path, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Read an INI file; keys may sit in any section but must be unique.

    Relative dataset paths are resolved against the config file's directory,
    and the output directory can be overridden by ``KERNEL_EP_OUTPUT_DIR``.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ParseError(f"malformed config {path}: {exc}") from exc
    values: Dict[str, str] = {}
    for section in parser.sections():
        for key, val in parser.items(section):
            if key in values:
                raise ParseError(f"key {key!r} set twice in {path}")
            values[key] = val
    values.update(overrides or {})
    if "datasets" in values:
        base = Path(path).parent
        values["datasets"] = ",".join(
            str(p if Path(p).is_absolute() else base / p)
            for p in (s.strip() for s in values["datasets"].split(",")) if p)
    if os.environ.get(OUTPUT_DIR_ENV):
        values["output_dir"] = os.environ[OUTPUT_DIR_ENV]
    return config_from_mapping(values)


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([fmt(v) for v in r])
    return path


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(path, items: Sequence[Tuple[str, Any]]) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for k, v in items:
            fh.write(f"{k} = {fmt(v)}\n")
    return path


def describe(prefix: str, values) -> List[Tuple[str, Any]]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return [(f"{prefix}.count", 0)]
    out = [(f"{prefix}.count", v.size), (f"{prefix}.mean", float(v.mean())),
           (f"{prefix}.sd", float(v.std(ddof=1)) if v.size > 1 else 0.0)]
    out += [(f"{prefix}.p{p}", float(np.percentile(v, p))) for p in PERCENTILES]
    return out


def _map(fn: Callable, args: Sequence, workers: int):
    if workers <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args))


@dataclass
class ExperimentResult:
    experiment: str
    output_dir: Path
    artifacts: Dict[str, Path] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    timing: Dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# message pools
# ---------------------------------------------------------------------------

MessageRecord = Tuple[Tuple[ExpFamMessage, ...], int, SuffStats]


def logistic_oracle(cfg: ExperimentConfig, seed: Optional[int] = None, kind: Optional[str] = None):
    kind = kind or cfg.oracle
    if kind == "quadrature":
        return QuadratureOperator(LogisticFactor())
    proposal = Proposal(ExpFamMessage.gaussian(0.0, cfg.proposal_var), cfg.particles)
    return ImportanceSamplingOperator(proposal=proposal, seed=seed)


def collect_pool(cfg: ExperimentConfig, seed_seq: np.random.SeedSequence) -> List[MessageRecord]:
    """Logistic-factor messages from EP runs on ``n_datasets`` synthetic problems."""
    pool: List[MessageRecord] = []
    for k, child in enumerate(seed_seq.spawn(cfg.n_datasets)):
        rng = np.random.default_rng(child)
        w = rng.standard_normal(cfg.d)
        ds = synthetic_logistic(w, cfg.n, rng, name=f"pool{k}")
        g = build_logistic_graph(ds.X, ds.y, operators=logistic_oracle(cfg, seed=int(rng.integers(2**32))))
        report = run_ep(g, cfg.collect_iters, cfg.damping, convergence_tol=0.0, rng=rng,
                        log_messages=True)
        pool.extend(report.message_log)
    return pool


MESSAGE_HEADER = ("target", "incoming", "stat1", "stat2")


def save_messages(path, records: Sequence[MessageRecord]) -> Path:
    rows = [(pos, ";".join(m.to_text() for m in tup), s.values[0], s.values[1])
            for tup, pos, s in records]
    return write_csv(path, MESSAGE_HEADER, rows)


def load_messages(path) -> List[MessageRecord]:
    try:
        rows = read_csv(path)
    except OSError as exc:
        raise IoFailure(f"cannot read messages file {path}: {exc}") from exc
    out = []
    for i, r in enumerate(rows):
        try:
            tup = tuple(ExpFamMessage.from_text(t) for t in r["incoming"].split(";"))
            pos = int(r["target"])
            stats = SuffStats(tup[pos].family, (float(r["stat1"]), float(r["stat2"])))
        except (KeyError, ValueError, IndexError) as exc:
            raise ParseError(f"{path}: bad message row {i + 2}: {exc}") from exc
        out.append((tup, pos, stats))
    return out


def split_pool(pool, target: int, n_train: int, n_test: int, rng):
    chosen = [r for r in pool if r[1] == target]
    if len(chosen) < n_train + n_test:
        raise PreconditionError(f"pool holds {len(chosen)} messages, need {n_train + n_test}")
    idx = rng.permutation(len(chosen))
    return [chosen[i] for i in idx[:n_train]], [chosen[i] for i in idx[n_train:n_train + n_test]]


# ---------------------------------------------------------------------------
# operator training and evaluation
# ---------------------------------------------------------------------------

def _loo_score(X, Y, sigma_02, sigma_y2) -> float:
    return float(np.mean(loo_residuals(X.T, Y.T, sigma_02, sigma_y2) ** 2))


def train_operator(records: Sequence[MessageRecord], cfg: ExperimentConfig, seed: int = 0,
                   cv: Optional[bool] = None) -> Tuple[JitOperator, Dict[str, Any]]:
    """Batch-fit a learned operator on (incoming, target, statistics) records.

    With ``cv`` the noise variance and the outer kernel width are picked by
    leave-one-out error over a small grid around the configured value and
    the median heuristic.
    """
    cv = cfg.cv if cv is None else cv
    targets = {r[1] for r in records}
    if len(targets) != 1:
        raise PreconditionError("records must share one target direction")
    target = targets.pop()
    families = tuple(m.family for m in records[0][0])
    tuples = [r[0] for r in records]
    recs = [OperatorRecord(t, np.array(s.values)) for t, _, s in records]
    widths, gamma2 = median_heuristic(tuples, d_in=cfg.d_in, seed=seed)
    chosen = {"sigma_y2": cfg.sigma_y2, "gamma2_scale": 1.0}
    if cv:
        Y = np.array([r.targets for r in recs])
        best = math.inf
        for scale in (0.5, 1.0, 2.0):
            fm = FeatureMap.create(families, widths, gamma2 * scale, cfg.d_in, cfg.d_out, seed=seed + 1)
            X = fm.transform(tuples)
            for sy in (cfg.sigma_y2 * 0.01, cfg.sigma_y2 * 0.1, cfg.sigma_y2):
                score = _loo_score(X, Y, cfg.sigma_02, sy)
                if score < best:
                    best, chosen = score, {"sigma_y2": sy, "gamma2_scale": scale}
        chosen["loo_mse"] = best
    op = JitOperator(families, target, None, d_in=cfg.d_in, d_out=cfg.d_out,
                     sigma_y2=chosen["sigma_y2"], sigma_02=cfg.sigma_02, threshold=cfg.threshold,
                     minibatch_size=len(recs), seed=seed)
    op.warmup_fit(recs, widths, gamma2 * chosen["gamma2_scale"])
    chosen.update(gamma2=op.feature_map.gamma2, widths=list(map(float, widths)))
    return op, chosen


def _belief_kl(family: Family, truth: SuffStats, pred) -> Tuple[float, bool]:
    q = expfam.project_from_suffstats(family, truth)
    try:
        q_hat = expfam.project_from_suffstats(family, SuffStats(family, tuple(map(float, pred))))
    except KernelEPError:
        return math.inf, False
    return expfam.kl_divergence(q, q_hat), True


KL_HEADER = ("index", "true_param1", "true_param2", "pred_stat1", "pred_stat2", "kl", "log_kl",
             "log_predictive_variance", "valid")


def evaluate_predictions(records: Sequence[MessageRecord], pred: np.ndarray,
                         pred_var: Optional[np.ndarray] = None) -> List[Tuple]:
    rows = []
    for i, ((tup, pos, s), p) in enumerate(zip(records, pred)):
        family = tup[pos].family
        kl, valid = _belief_kl(family, s, p)
        params = expfam.project_from_suffstats(family, s).params()
        logv = math.log(pred_var[i, 0]) if pred_var is not None else math.nan
        rows.append((i, params[0], params[1], p[0], p[1], kl,
                     math.log(max(kl, 1e-300)) if valid else math.inf, logv, valid))
    return rows


def evaluate_operator(op: JitOperator, records: Sequence[MessageRecord]) -> List[Tuple]:
    mean, var = op.predict([r[0] for r in records])
    return evaluate_predictions(records, mean, var)


def kl_summary(rows, prefix="log_kl") -> List[Tuple[str, Any]]:
    valid = [r[6] for r in rows if r[8]]
    return describe(prefix, valid) + [(f"{prefix}.invalid", sum(1 for r in rows if not r[8]))]


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _pool_split(cfg: ExperimentConfig, ss: np.random.SeedSequence):
    pool_ss, split_ss = ss.spawn(2)
    pool = collect_pool(cfg, pool_ss)
    return split_pool(pool, 0, cfg.n_train_messages, cfg.n_test_messages,
                      np.random.default_rng(split_ss))


def run_batch(cfg: ExperimentConfig, out: Path, res: ExperimentResult) -> None:
    ss = np.random.SeedSequence(cfg.seed)
    t0 = time.perf_counter()
    train, test = _pool_split(cfg, ss)
    res.timing["collect_seconds"] = time.perf_counter() - t0
    res.artifacts["messages_train"] = save_messages(out / "messages_train.csv", train)
    res.artifacts["messages_test"] = save_messages(out / "messages_test.csv", test)
    t0 = time.perf_counter()
    op, chosen = train_operator(train, cfg, seed=cfg.seed)
    res.timing["train_seconds"] = time.perf_counter() - t0
    save_operator(op, out / "operator.npz")
    res.artifacts["operator"] = out / "operator.npz"
    rows = evaluate_operator(op, test)
    res.artifacts["kl"] = write_csv(out / "batch_kl.csv", KL_HEADER, rows)
    items = kl_summary(rows) + [(f"selected.{k}", v) for k, v in chosen.items() if k != "widths"]
    items += [(f"selected.width{l}", w) for l, w in enumerate(chosen["widths"])]
    res.summary.update(items)


def _kernel_features(kind: str, train_t, test_t, cfg: ExperimentConfig, seed: int):
    widths, gamma2 = median_heuristic(train_t, d_in=cfg.d_in, seed=seed)
    if kind == "mv":
        mv = np.array([mean_variance_vector(t) for t in train_t])
        scales = np.maximum(mv.std(axis=0), 1e-6)
        c = len(train_t[0])
        fm = MVFeatureMap.create(scales[:c], scales[c:], cfg.d_out, seed=seed + 1)
        return fm.transform(train_t), fm.transform(test_t)
    if kind == "expected-product-joint":
        fm = FeatureMap.create(LOGISTIC_FAMILIES, widths, gamma2, cfg.d_out, 1, seed=seed + 1)
        return stage1_features(train_t, fm), stage1_features(test_t, fm)
    if kind in ("sum", "product"):
        per = cfg.d_out // 2 if kind == "sum" else max(2, int(math.isqrt(cfg.d_out)))
        maps = [FeatureMap.create([fam], [widths[l]], 1.0, per, 1, seed=seed + 1 + l)
                for l, fam in enumerate(LOGISTIC_FAMILIES)]
        f = sum_embedding_features if kind == "sum" else product_embedding_features
        return f(train_t, maps), f(test_t, maps)
    fm = FeatureMap.create(LOGISTIC_FAMILIES, widths, gamma2, cfg.d_in, cfg.d_out, seed=seed + 1)
    return fm.transform(train_t), fm.transform(test_t)


KERNELS = ("mv", "expected-product-joint", "sum", "product", "gaussian-joint")


def run_kernel_compare(cfg: ExperimentConfig, out: Path, res: ExperimentResult) -> None:
    ss = np.random.SeedSequence(cfg.seed)
    train, test = _pool_split(cfg, ss)
    train_t, test_t = [r[0] for r in train], [r[0] for r in test]
    Y = np.array([r[2].values for r in train])
    rows = []
    for kind in KERNELS:
        t0 = time.perf_counter()
        Xtr, Xte = _kernel_features(kind, train_t, test_t, cfg, cfg.seed)
        grid = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
        sy = min(grid, key=lambda s: _loo_score(Xtr, Y, cfg.sigma_02, s)) if cfg.cv else cfg.sigma_y2
        state = batch_fit(Xtr.T, Y.T, cfg.sigma_02, sy)
        pred = predict(state, Xte)[0]
        for r in evaluate_predictions(test, pred):
            rows.append((kind, r[0], sy, r[5], r[6], r[8]))
        res.timing[f"{kind}_seconds"] = time.perf_counter() - t0
    res.artifacts["messages"] = write_csv(
        out / "kernel_compare_messages.csv",
        ("kernel", "index", "sigma_y2", "kl", "log_kl", "valid"), rows)
    table = []
    for kind in KERNELS:
        vals = [r[4] for r in rows if r[0] == kind and r[5]]
        invalid = sum(1 for r in rows if r[0] == kind and not r[5])
        sy = next(r[2] for r in rows if r[0] == kind)
        table.append((kind, float(np.mean(vals)) if vals else math.nan,
                      float(np.std(vals, ddof=1)) if len(vals) > 1 else math.nan, invalid, sy))
        res.summary.update({f"{kind}.mean_log_kl": table[-1][1], f"{kind}.sd_log_kl": table[-1][2],
                            f"{kind}.invalid": invalid})
    res.artifacts["table"] = write_csv(out / "kernel_compare.csv",
                                       ("kernel", "mean_log_kl", "sd_log_kl", "invalid", "sigma_y2"),
                                       table)


def uncertainty_curves(cfg: ExperimentConfig):
    """(name, means, log variances) for the two test curves in the z-message plane."""
    m1 = np.linspace(*cfg.line_range, cfg.curve_points)
    m2 = np.linspace(*cfg.parabola_range, cfg.curve_points)
    return [("line", m1, cfg.line[0] + cfg.line[1] * m1),
            ("parabola", m2, cfg.parabola[0] + cfg.parabola[1] * m2 ** 2)]


def curve_tuples(means, log_vars):
    other = ExpFamMessage.beta(1.0, 2.0)
    return [(ExpFamMessage.gaussian(float(m), math.exp(float(lv))), other)
            for m, lv in zip(means, log_vars)]


def run_uncertainty(cfg: ExperimentConfig, out: Path, res: ExperimentResult) -> None:
    ss = np.random.SeedSequence(cfg.seed)
    train, _ = _pool_split(cfg.replace(n_test_messages=0), ss)
    op, chosen = train_operator(train, cfg, seed=cfg.seed, cv=False)
    rows = []
    for name, means, log_vars in uncertainty_curves(cfg):
        logpv = np.log(op.predict(curve_tuples(means, log_vars))[1][:, 0])
        rows += [(name, i, m, lv, p) for i, (m, lv, p) in enumerate(zip(means, log_vars, logpv))]
        res.summary[f"{name}.mean_log_predictive_variance"] = float(np.mean(logpv))
    res.artifacts["curves"] = write_csv(out / "uncertainty_curves.csv",
                                        ("curve", "index", "mean", "log_variance",
                                         "log_predictive_variance"), rows)
    # each training input against the same input moved shift_sd spreads away
    z_means = np.array([t[0].mean() for t, _, _ in train])
    shift = cfg.shift_sd * float(z_means.std())
    probe = train[:min(200, len(train))]
    base = [t for t, _, _ in probe]
    moved = [(ExpFamMessage.gaussian(t[0].mean() + shift, t[0].variance()), t[1]) for t in base]
    lb = np.log(op.predict(base)[1][:, 0])
    lm = np.log(op.predict(moved)[1][:, 0])
    srows = [(i, t[0].mean(), t[0].mean() + shift, a, b) for i, (t, a, b) in enumerate(zip(base, lb, lm))]
    res.artifacts["shift"] = write_csv(out / "uncertainty_shift.csv",
                                       ("index", "mean", "shifted_mean", "log_predictive_variance",
                                        "log_predictive_variance_shifted"), srows)
    res.summary["shift.amount"] = shift
    res.summary["shift.fraction_increased"] = float(np.mean(lb <= lm))
    res.summary["training_messages"] = len(train)


def _jit_pair(cfg: ExperimentConfig, oracle, seed: int) -> Dict[int, JitOperator]:
    return {k: JitOperator(LOGISTIC_FAMILIES, k, oracle, d_in=cfg.d_in, d_out=cfg.d_out,
                           sigma_y2=cfg.sigma_y2, sigma_02=cfg.sigma_02, threshold=cfg.threshold,
                           minibatch_size=cfg.minibatch, seed=seed + 10 * k)
            for k in (0, 1)}


def _baseline_run(args):
    """Plain EP with an oracle operator; top-level so worker processes can run it."""
    cfg, kind, X, y, seed = args
    g = build_logistic_graph(X, y, operators=logistic_oracle(cfg, seed=seed, kind=kind))
    t0 = time.perf_counter()
    report = run_ep(g, cfg.ep_iters, cfg.damping, cfg.convergence_tol, np.random.default_rng(seed))
    return posterior_mean_w(report, X.shape[1]), time.perf_counter() - t0, report.oracle_query_count


def _sweep_rows(label, report):
    """Per (iteration, direction): invocations, post-warm-up invocations, queries, mean log variance."""
    rows = []
    keys = sorted({(r["iteration"], r["target"]) for r in report.trace})
    for it, tgt in keys:
        sel = [r for r in report.trace if r["iteration"] == it and r["target"] == tgt]
        post = [r for r in sel if r["log_variance"] != ""]
        logv = [float(r["log_variance"].split(";")[0]) for r in post]
        rows.append(label + (it, tgt, len(sel), len(post), sum(r["used_oracle"] for r in sel),
                             sum(r["used_oracle"] for r in post),
                             float(np.mean(logv)) if logv else math.nan))
    return rows


SWEEP_TAIL = ("ep_iteration", "direction", "invocations", "post_warmup_invocations",
              "oracle_queries", "post_warmup_oracle_queries", "mean_log_variance")
TRACE_HEADER = ("invocation_index", "problem_id", "ep_iteration", "direction", "log_variance",
                "used_oracle")


def _trace_rows(ops: Dict[int, JitOperator]):
    rows = []
    for k, op in ops.items():
        rows += [(r["invocation"], r.get("problem", 0), r.get("ep_iteration", 0), k,
                  r["log_variance"], r["used_oracle"]) for r in op.stats.trace]
    return rows


def _run_logistic_sequence(cfg, problems, ops, res, key="problem"):
    """Run KJIT and the baselines over ``problems`` = [(label, train, test, seed)]."""
    err_rows, sweep_rows = [], []
    baseline_args = [(cfg, kind, tr.X, tr.y, seed) for _, tr, _, seed in problems
                     for kind in cfg.baselines]
    baseline_out = iter(_map(_baseline_run, baseline_args, cfg.workers))
    for p, (label, tr, te, seed) in enumerate(problems):
        for op in ops.values():
            op.context = {"problem": p}
        before = {k: (op.stats.invocations, op.stats.oracle_queries, op.stats.warmup_invocations)
                  for k, op in ops.items()}
        g = build_logistic_graph(tr.X, tr.y, operators=ops)
        t0 = time.perf_counter()
        report = run_ep(g, cfg.ep_iters, cfg.damping, cfg.convergence_tol,
                        np.random.default_rng(seed), trace=True)
        elapsed = time.perf_counter() - t0
        w = posterior_mean_w(report, tr.d)
        inv = sum(op.stats.invocations - before[k][0] for k, op in ops.items())
        qry = sum(op.stats.oracle_queries - before[k][1] for k, op in ops.items())
        warm = sum(op.stats.warmup_invocations - before[k][2] for k, op in ops.items())
        err_rows.append((p, label, "kjit", classification_error(w, te), classification_error(w, tr),
                         qry, inv, warm))
        res.timing.setdefault("kjit_seconds", []).append(elapsed)
        sweep_rows += _sweep_rows((p, label), report)
        for kind in cfg.baselines:
            wb, tb, qb = next(baseline_out)
            err_rows.append((p, label, kind, classification_error(wb, te),
                             classification_error(wb, tr), qb, qb, 0))
            res.timing.setdefault(f"{kind}_seconds", []).append(tb)
    return err_rows, sweep_rows


ERR_HEADER = ("problem", "dataset", "method", "test_error", "train_error", "oracle_queries",
              "invocations", "warmup_invocations")


def _sequence_summary(res, err_rows, sweep_rows, methods):
    for m in methods:
        errs = [r[3] for r in err_rows if r[2] == m]
        res.summary[f"{m}.mean_test_error"] = float(np.mean(errs))
    kj = [r for r in err_rows if r[2] == "kjit"]
    post_inv = sum(r[6] - r[7] for r in kj)
    post_q = sum(r[5] for r in kj) - sum(r[7] for r in kj)
    res.summary["kjit.post_warmup_invocations"] = post_inv
    res.summary["kjit.post_warmup_oracle_queries"] = post_q
    res.summary["kjit.post_warmup_query_fraction"] = post_q / post_inv if post_inv else math.nan
    for r in kj:
        frac = (r[5] - r[7]) / (r[6] - r[7]) if r[6] > r[7] else math.nan
        res.summary[f"problem{r[0]}.post_warmup_query_fraction"] = frac
    if "quadrature" in methods:
        gaps = [abs(a[3] - b[3]) for a, b in zip(kj, [r for r in err_rows if r[2] == "quadrature"])]
        res.summary["kjit.max_abs_error_gap_vs_quadrature"] = float(max(gaps))


def run_jit_logistic(cfg: ExperimentConfig, out: Path, res: ExperimentResult) -> None:
    ss = np.random.SeedSequence(cfg.seed)
    w_ss, op_ss, prob_ss = ss.spawn(3)
    w = np.random.default_rng(w_ss).standard_normal(cfg.d)
    op_seed = int(np.random.default_rng(op_ss).integers(2**31))
    ops = _jit_pair(cfg, logistic_oracle(cfg, seed=op_seed), op_seed)
    problems = []
    for p, child in enumerate(prob_ss.spawn(cfg.n_problems)):
        rng = np.random.default_rng(child)
        problems.append((f"problem{p}", synthetic_logistic(w, cfg.n, rng),
                         synthetic_logistic(w, cfg.n_test, rng), int(rng.integers(2**31))))
    err_rows, sweep_rows = _run_logistic_sequence(cfg, problems, ops, res)
    res.artifacts["errors"] = write_csv(out / "jit_errors.csv", ERR_HEADER, err_rows)
    res.artifacts["sweeps"] = write_csv(out / "jit_sweeps.csv", ("problem", "dataset") + SWEEP_TAIL,
                                        sweep_rows)
    res.artifacts["trace"] = write_csv(out / "variance_trace.csv", TRACE_HEADER, _trace_rows(ops))
    _sequence_summary(res, err_rows, sweep_rows, ("kjit",) + tuple(cfg.baselines))


def uci_datasets(cfg: ExperimentConfig, rng) -> List[Dataset]:
    if cfg.datasets:
        label = int(cfg.label_column) if cfg.label_column.lstrip("-").isdigit() else cfg.label_column
        return [load_csv_dataset(p, label, name=Path(p).stem) for p in cfg.datasets]
    out = []
    for name, d, scale, rows in STAND_INS:
        w = scale * rng.standard_normal(d)
        out.append(synthetic_logistic(w, rows, rng, name=name))
    return out


def run_uci(cfg: ExperimentConfig, out: Path, res: ExperimentResult) -> None:
    ss = np.random.SeedSequence(cfg.seed)
    data_ss, op_ss, split_ss = ss.spawn(3)
    sets = uci_datasets(cfg, np.random.default_rng(data_ss))
    op_seed = int(np.random.default_rng(op_ss).integers(2**31))
    ops = _jit_pair(cfg, logistic_oracle(cfg, seed=op_seed), op_seed)
    problems = []
    for ds, child in zip(sets, split_ss.spawn(len(sets))):
        rng = np.random.default_rng(child)
        n_train = min(cfg.n_train, len(ds) // 2)
        tr, te = stratified_subsample(ds, n_train, rng)
        problems.append((ds.name, tr, te, int(rng.integers(2**31))))
    err_rows, sweep_rows = _run_logistic_sequence(cfg, problems, ops, res)
    res.artifacts["errors"] = write_csv(out / "uci_errors.csv", ERR_HEADER, err_rows)
    res.artifacts["sweeps"] = write_csv(out / "uci_sweeps.csv", ("problem", "dataset") + SWEEP_TAIL,
                                        sweep_rows)
    res.artifacts["trace"] = write_csv(out / "variance_trace.csv", TRACE_HEADER, _trace_rows(ops))
    _sequence_summary(res, err_rows, sweep_rows, ("kjit",) + tuple(cfg.baselines))
    res.summary["datasets"] = ",".join(ds.name for ds in sets)
    res.summary["synthetic_stand_ins"] = not cfg.datasets
    for k, ok in enumerate(shift_detected(sweep_rows)):
        res.summary[f"switch{k + 1}.variance_rise"] = ok


def shift_detected(sweep_rows, direction: int = 0) -> List[bool]:
    """For each problem switch: first-sweep mean log variance above the previous last sweep."""
    by_problem: Dict[int, Dict[int, float]] = {}
    for r in sweep_rows:
        if r[3] == direction and not math.isnan(r[-1]):
            by_problem.setdefault(r[0], {})[r[2]] = r[-1]
    probs = sorted(by_problem)
    out = []
    for a, b in zip(probs, probs[1:]):
        last = by_problem[a][max(by_problem[a])]
        first = by_problem[b][min(by_problem[b])]
        out.append(bool(first > last))
    return out


def _cg_oracle_run(args):
    x, s1, r1, s2, iters = args
    g = build_compound_gamma_graph(x, s1, r1, s2)
    t0 = time.perf_counter()
    report = run_ep(g, iters, 1.0, 1e-10)
    return report.final_beliefs[0].params(), time.perf_counter() - t0


def run_compound_gamma(cfg: ExperimentConfig, out: Path, res: ExperimentResult) -> None:
    """Warm-up problems are drawn until the operator leaves warm-up, then
    ``n_problems`` evaluation problems follow."""
    ss = np.random.SeedSequence(cfg.seed)
    op_ss, prob_ss = ss.spawn(2)
    rng = np.random.default_rng(prob_ss)
    op_seed = int(np.random.default_rng(op_ss).integers(2**31))
    oracle = QuadratureOperator(CompoundGammaFactor(cfg.s1, cfg.r1, cfg.s2))
    op = JitOperator([Family.GAMMA], 0, oracle, d_in=cfg.d_in, d_out=cfg.d_out,
                     sigma_y2=cfg.sigma_y2, sigma_02=cfg.sigma_02, threshold=cfg.threshold,
                     minibatch_size=cfg.minibatch, target_mode="outgoing", seed=op_seed)
    rows, problems = [], []
    p = 0
    evaluated = 0
    while evaluated < cfg.n_problems:
        phase = "warmup" if op.in_warmup else "eval"
        n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
        x, tau = compound_gamma_problem(cfg.s1, cfg.r1, cfg.s2, n, rng)
        op.context = {"problem": p}
        q0 = op.stats.oracle_queries
        g = build_compound_gamma_graph(x, cfg.s1, cfg.r1, cfg.s2, operator=op)
        t0 = time.perf_counter()
        report = run_ep(g, cfg.ep_iters, 1.0, 1e-10)
        res.timing.setdefault("kjit_seconds", []).append(time.perf_counter() - t0)
        problems.append((x, cfg.s1, cfg.r1, cfg.s2, cfg.ep_iters))
        rows.append([p, phase, n, tau, *report.final_beliefs[0].params(), op.stats.oracle_queries - q0])
        evaluated += phase == "eval"
        p += 1
    for row, (params, secs) in zip(rows, _map(_cg_oracle_run, problems, cfg.workers)):
        rel = [abs(row[4] / params[0] - 1.0), abs(row[5] / params[1] - 1.0)]
        row[6:6] = [params[0], params[1], rel[0], rel[1]]
        res.timing.setdefault("quadrature_seconds", []).append(secs)
    res.artifacts["posteriors"] = write_csv(
        out / "compound_gamma.csv",
        ("problem", "phase", "n", "tau", "kjit_shape", "kjit_rate", "oracle_shape", "oracle_rate",
         "rel_err_shape", "rel_err_rate", "oracle_queries"), rows)
    ev = [r for r in rows if r[1] == "eval"]
    res.summary["eval_problems"] = len(ev)
    res.summary["warmup_problems"] = len(rows) - len(ev)
    res.summary["fraction_within_5pct"] = float(np.mean([max(r[8], r[9]) < 0.05 for r in ev]))
    res.summary["max_rel_err_shape"] = float(max(r[8] for r in ev))
    res.summary["max_rel_err_rate"] = float(max(r[9] for r in ev))
    res.summary["eval_oracle_queries"] = int(sum(r[10] for r in ev))


def feature_study_tuples(n: int, rng) -> List[Tuple[ExpFamMessage, ...]]:
    return [(ExpFamMessage.gaussian(rng.normal(0.0, 3.0), rng.gamma(3.0, 4.0)),) for _ in range(n)]


def run_feature_study(cfg: ExperimentConfig, out: Path, res: ExperimentResult) -> None:
    ss = np.random.SeedSequence(cfg.seed)
    data_ss, map_ss = ss.spawn(2)
    tuples = feature_study_tuples(cfg.feature_tuples, np.random.default_rng(data_ss))
    widths, gamma2 = median_heuristic(tuples, d_in=500, seed=cfg.seed)
    K = gaussian_embedding_kernel_matrix(tuples, widths, gamma2)
    rows = []
    seeds = np.random.default_rng(map_ss).integers(2**31, size=(len(cfg.d_in_grid),
                                                                 len(cfg.d_out_grid), cfg.feature_reps))
    for i, d_in in enumerate(cfg.d_in_grid):
        for j, d_out in enumerate(cfg.d_out_grid):
            for r in range(cfg.feature_reps):
                fm = FeatureMap.create([Family.GAUSSIAN], widths, gamma2, d_in, d_out,
                                       seed=int(seeds[i, j, r]))
                P = fm.transform(tuples)
                diff = P @ P.T - K
                rows.append((d_in, d_out, r, float(np.linalg.norm(diff)), float(np.abs(diff).max())))
    res.artifacts["grid"] = write_csv(out / "feature_study.csv",
                                      ("d_in", "d_out", "rep", "frobenius", "max_abs"), rows)
    res.summary["gamma2"] = gamma2
    res.summary["width"] = float(widths[0])
    for d_in in cfg.d_in_grid:
        for d_out in cfg.d_out_grid:
            vals = [r[3] for r in rows if r[0] == d_in and r[1] == d_out]
            res.summary[f"frobenius.{d_in}.{d_out}"] = float(np.mean(vals))


RUNNERS = {
    "batch": run_batch, "uncertainty": run_uncertainty, "jit-logistic": run_jit_logistic,
    "compound-gamma": run_compound_gamma, "uci": run_uci, "kernel-compare": run_kernel_compare,
    "feature-study": run_feature_study,
}


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> ExperimentResult:
    out = Path(output_dir or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out}: {exc}") from exc
    res = ExperimentResult(cfg.experiment, out)
    t0 = time.perf_counter()
    RUNNERS[cfg.experiment](cfg, out, res)
    res.timing["total_seconds"] = time.perf_counter() - t0
    items = [("experiment", cfg.experiment), ("seed", cfg.seed)] + list(res.summary.items())
    res.artifacts["summary"] = write_summary(out / "summary.txt", items)
    with open(out / "timing.json", "w") as fh:
        json.dump(res.timing, fh, indent=1)
    res.artifacts["timing"] = out / "timing.json"
    with open(out / "config.json", "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=1, sort_keys=True)
    return res
