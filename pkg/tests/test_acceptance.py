"""The nine acceptance criteria, each at its stated tolerance.

Every test prints one ``[PASS]``/``[FAIL]`` line (repeated in the pytest
terminal summary) before asserting.  Experiment-level criteria run the
shipped configs under ``configs/`` into temporary directories.
"""
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from kernel_ep.bayes import RegressorState, batch_fit, online_update
from kernel_ep.expfam import ExpFamMessage as M
from kernel_ep.experiments import (
    EXPERIMENTS,
    feature_study_tuples,
    load_config,
    read_csv,
    run_experiment,
)
from kernel_ep.features import FeatureMap, gaussian_embedding_kernel_matrix, median_heuristic
from kernel_ep.oracle import LOGISTIC_SAMPLER, LogisticFactor, Proposal, is_project_all, quadrature_project

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def verdict(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


class Runs:
    """Run each experiment config at most once per session (twice for determinism)."""

    def __init__(self, root: Path):
        self.root = root
        self.results = {}
        self.seconds = {}

    def get(self, name, tag="a"):
        key = (name, tag)
        if key not in self.results:
            t0 = time.perf_counter()
            self.results[key] = run_experiment(load_config(CONFIGS / f"{name}.ini"), self.root / tag / name)
            self.seconds[key] = time.perf_counter() - t0
        return self.results[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    yield Runs(root)
    shutil.rmtree(root, ignore_errors=True)


def test_criterion_1_online_batch_equivalence():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((200, 500)) / math.sqrt(200)
    Y = rng.standard_normal((2, 500))
    t0 = time.perf_counter()
    state = RegressorState.init(200, 2, 1.0, 1e-2)
    for i in range(500):
        online_update(state, X[:, i], Y[:, i])
    batch = batch_fit(X, Y, 1.0, 1e-2)
    secs = time.perf_counter() - t0
    ds = float(np.max(np.abs(state.sigma_w - batch.sigma_w)))
    dm = float(np.max(np.abs(state.mu_w - batch.mu_w)))
    ok = ds < 1e-8 and dm < 1e-8 and secs < 5
    assert verdict(1, "online/batch regression", ok,
                   f"|dSigma|inf={ds:.2e} |dmu|inf={dm:.2e} time={secs:.2f}s")


def test_criterion_2_feature_fidelity():
    t0 = time.perf_counter()
    tuples = feature_study_tuples(100, np.random.default_rng(2))
    widths, gamma2 = median_heuristic(tuples, d_in=500, seed=2)
    exact = gaussian_embedding_kernel_matrix(tuples, widths, gamma2)
    err = {}
    for d_out in (200, 2000):
        fm = FeatureMap.create(["gaussian"], widths, gamma2, 500, d_out, seed=3)
        psi = fm.transform(tuples)
        err[d_out] = float(np.max(np.abs(psi @ psi.T - exact)))
    secs = time.perf_counter() - t0
    ok = err[2000] < 0.1 and err[2000] < err[200] and secs < 120
    assert verdict(2, "two-stage feature fidelity", ok,
                   f"max err D_out=2000: {err[2000]:.4f}, D_out=200: {err[200]:.4f}, time={secs:.1f}s")


def test_criterion_3_batch_regression(runs):
    res = runs.get("batch")
    rows = read_csv(res.output_dir / "batch_kl.csv")
    valid = [float(r["log_kl"]) for r in rows if r["valid"] == "1"]
    mean = float(np.mean(valid))
    invalid = len(rows) - len(valid)
    ok = mean <= -5.0 and len(rows) == 500
    assert verdict(3, "batch message regression", ok,
                   f"mean log KL={mean:.2f} over {len(valid)} messages ({invalid} invalid), "
                   f"time={runs.seconds[('batch', 'a')]:.0f}s")


def test_criterion_4_is_matches_quadrature():
    rng = np.random.default_rng(4)
    prop = Proposal(M.gaussian(0.0, 200.0), 500_000)
    worst, misses = 0.0, 0
    t0 = time.perf_counter()
    for _ in range(50):
        inc = (M.gaussian(rng.normal(0.0, 3.0), rng.gamma(2.0, 2.0)),
               M.beta(rng.gamma(2.0, 2.0) + 0.5, rng.gamma(2.0, 2.0) + 0.5))
        est = is_project_all(inc, LOGISTIC_SAMPLER, prop, rng)
        for pos in (0, 1):
            ref = quadrature_project(inc, LogisticFactor(), pos).values
            for v, se, r in zip(est[pos].values, est[pos].stderr, ref):
                z = abs(v - r) / se
                worst = max(worst, z)
                misses += z >= 3
    secs = time.perf_counter() - t0
    ok = misses == 0 and secs < 180
    assert verdict(4, "importance sampling vs quadrature", ok,
                   f"{misses} of 200 statistics beyond 3 s.e. (worst {worst:.2f} s.e.), time={secs:.0f}s")


def _sequence_checks(err_rows, sweep_rows):
    by = {}
    for r in err_rows:
        by.setdefault(int(r["problem"]), {})[r["method"]] = r
    gaps = [abs(float(m["kjit"]["test_error"]) - float(m["quadrature"]["test_error"])) for m in by.values()]
    kj = [m["kjit"] for _, m in sorted(by.items())]
    inv = sum(int(r["invocations"]) - int(r["warmup_invocations"]) for r in kj)
    q = sum(int(r["oracle_queries"]) - int(r["warmup_invocations"]) for r in kj)
    # per-sweep query fractions, post-warm-up only
    fr = {}
    for r in sweep_rows:
        n = int(r["post_warmup_invocations"])
        if n:
            fr.setdefault(int(r["problem"]), []).append(int(r["post_warmup_oracle_queries"]) / n)
    first = min(int(r["problem"]) for r in kj if int(r["warmup_invocations"]) == 0)
    last = max(by)
    return gaps, q / inv, float(np.mean(fr[first])), float(np.mean(fr[last])), first, last


def test_criterion_5_jit_logistic(runs):
    res = runs.get("jit-logistic")
    gaps, frac, f_first, f_last, first, last = _sequence_checks(
        read_csv(res.output_dir / "jit_errors.csv"), read_csv(res.output_dir / "jit_sweeps.csv"))
    secs = runs.seconds[("jit-logistic", "a")]
    ok = len(gaps) == 10 and max(gaps) <= 0.02 and frac < 0.25 and f_last <= f_first and secs < 600
    assert verdict(5, "JIT logistic regression", ok,
                   f"max |err gap|={max(gaps):.3f}, post-warm-up query fraction={frac:.3f}, "
                   f"per-sweep fraction problem {last}={f_last:.3f} vs problem {first}={f_first:.3f}, "
                   f"time={secs:.0f}s")


def test_criterion_6_compound_gamma(runs):
    res = runs.get("compound-gamma")
    rows = [r for r in read_csv(res.output_dir / "compound_gamma.csv") if r["phase"] == "eval"]
    good = [float(r["rel_err_shape"]) <= 0.05 and float(r["rel_err_rate"]) <= 0.05 for r in rows]
    frac = float(np.mean(good))
    secs = runs.seconds[("compound-gamma", "a")]
    ok = len(rows) == 20 and frac >= 0.9 and secs < 300
    assert verdict(6, "compound gamma", ok,
                   f"{sum(good)}/{len(rows)} problems within 5% (shape and rate), time={secs:.1f}s")


def test_criterion_7_uncertainty(runs):
    res = runs.get("uncertainty")
    curves = read_csv(res.output_dir / "uncertainty_curves.csv")
    mean = {c: float(np.mean([float(r["log_predictive_variance"]) for r in curves if r["curve"] == c]))
            for c in ("line", "parabola")}
    shift = read_csv(res.output_dir / "uncertainty_shift.csv")
    held = sum(float(r["log_predictive_variance"]) <= float(r["log_predictive_variance_shifted"])
               for r in shift)
    ok = mean["line"] > mean["parabola"] and held == len(shift) > 0
    assert verdict(7, "uncertainty off support", ok,
                   f"mean log var off-support curve={mean['line']:.2f} > on-support={mean['parabola']:.2f}; "
                   f"shifted variance larger at {held}/{len(shift)} training inputs")


def test_criterion_8_distribution_shift(runs):
    res = runs.get("uci")
    sweeps = read_csv(res.output_dir / "uci_sweeps.csv")
    by = {}
    for r in sweeps:
        if int(r["direction"]) == 0 and r["mean_log_variance"] != "nan":
            by.setdefault(int(r["problem"]), {})[int(r["ep_iteration"])] = float(r["mean_log_variance"])
    probs = sorted(by)
    rises = [(by[b][min(by[b])], by[a][max(by[a])]) for a, b in zip(probs, probs[1:])]
    ok = len(rises) == 3 and all(first > last for first, last in rises)
    stand_ins = res.summary["synthetic_stand_ins"]
    detail = ", ".join(f"{f:.2f}>{l:.2f}" for f, l in rises)
    if not stand_ins:
        errs = read_csv(res.output_dir / "uci_errors.csv")
        kj = {r["dataset"]: float(r["test_error"]) for r in errs if r["method"] == "kjit"}
        qd = {r["dataset"]: float(r["test_error"]) for r in errs if r["method"] == "quadrature"}
        gap = max(abs(kj[k] - qd[k]) for k in kj)
        ok = ok and gap <= 0.03
        detail += f"; max |err gap|={gap:.3f}"
    else:
        detail += " (synthetic stand-ins; error-gap clause applies to real files only)"
    assert verdict(8, "distribution shift detection", ok, f"first vs previous last sweep: {detail}")


def test_criterion_9_determinism(runs):
    differing = []
    for name in EXPERIMENTS:
        a, b = runs.get(name, "a"), runs.get(name, "b")
        for p in sorted(a.output_dir.glob("*.csv")):
            if p.read_bytes() != (b.output_dir / p.name).read_bytes():
                differing.append(f"{name}/{p.name}")
    n = sum(len(list(runs.get(x).output_dir.glob("*.csv"))) for x in EXPERIMENTS)
    ok = not differing and n > 0
    assert verdict(9, "determinism", ok,
                   f"{n} CSV artifacts over {len(EXPERIMENTS)} experiments, "
                   f"{len(differing)} differ{': ' + ', '.join(differing) if differing else ''}")
