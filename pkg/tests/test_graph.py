import csv

import numpy as np
import pytest

from kernel_ep.data import classification_error, synthetic_logistic
from kernel_ep.errors import (
    AllMessagesImproper,
    DimensionMismatch,
    EmptyDataset,
    ImproperParameters,
    OperatorFailure,
)
from kernel_ep.expfam import ExpFamMessage as M, Family
from kernel_ep.graph import (
    ConstantFactor,
    DotProductFactor,
    FactorGraph,
    OperatorFactor,
    Variable,
    build_compound_gamma_graph,
    build_logistic_graph,
    collect_training_messages,
    posterior_mean_w,
    precision_likelihood_message,
    run_ep,
)
from kernel_ep.oracle import (
    GaussianLikelihoodFactor,
    ImportanceSamplingOperator,
    MessageResult,
    Proposal,
    QuadratureOperator,
)


class FixedOperator:
    def __init__(self, msg=None, exc=None):
        self.msg, self.exc = msg, exc

    def propose(self, incoming, target_var, cavity, rng=None):
        if self.exc is not None:
            raise self.exc
        return MessageResult(self.msg, used_oracle=False)


@pytest.fixture(scope="module")
def logistic_problem():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(5)
    return w, synthetic_logistic(w, 100, rng), synthetic_logistic(w, 1000, rng)


# -- builders ---------------------------------------------------------------------

def test_logistic_graph_shape():
    rng = np.random.default_rng(1)
    ds = synthetic_logistic(rng.standard_normal(20), 300, rng)
    g = build_logistic_graph(ds.X, ds.y)
    assert sum(f.kind == "logistic" for f in g.factors) == 300
    assert len(g.variables) == 20 + 2 * 300


def test_zero_covariate_gives_zero_mean_z_message():
    g = build_logistic_graph([[0.0]], [1], prior_mean=3.0, prior_var=2.0)
    res = g.factors[1].message(1, g.incoming(1), None)
    assert res.message.mean() == 0.0


def test_bernoulli_messages():
    g = build_logistic_graph([[1.0], [2.0]], [1, 0])
    assert g.factors[0].msg.params() == (2.0, 1.0)
    assert g.factors[3].msg.params() == (1.0, 2.0)


def test_logistic_builder_errors():
    with pytest.raises(DimensionMismatch):
        build_logistic_graph(np.zeros((3, 0)), [0, 1, 0])
    with pytest.raises(EmptyDataset):
        build_logistic_graph(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(DimensionMismatch):
        build_logistic_graph(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ImproperParameters):
        build_logistic_graph(np.zeros((2, 2)), [0, 2])


def test_compound_gamma_graph():
    g = build_compound_gamma_graph([0.0])
    assert g.factors[0].msg.natural == (0.5, 0.0)
    assert precision_likelihood_message(2.0).natural == (0.5, -2.0)
    assert g.factors[-1].pluggable and g.factors[-1].kind == "compound-gamma"
    with pytest.raises(EmptyDataset):
        build_compound_gamma_graph([])
    with pytest.raises(ImproperParameters):
        build_compound_gamma_graph([1.0], s1=-1.0)


def test_family_mismatch_on_edge():
    with pytest.raises(DimensionMismatch):
        FactorGraph([Variable("x", "beta")], [ConstantFactor(0, M.gaussian(0, 1))], [(0, 0)])


# -- run_ep ------------------------------------------------------------------------

def test_zero_iterations_returns_priors():
    g = build_logistic_graph([[1.0, 2.0]], [1], prior_mean=0.5, prior_var=3.0)
    rep = run_ep(g, max_iters=0)
    assert rep.iterations_run == 0
    assert rep.final_beliefs[0] == M.gaussian(0.5, 3.0)


def test_single_prior_factor_fixed_point():
    g = FactorGraph([Variable("x", "gaussian")], [ConstantFactor(0, M.gaussian(0, 1))], [(0, 0)])
    rep = run_ep(g, max_iters=1)
    assert rep.final_beliefs[0].params() == pytest.approx((0.0, 1.0))


def test_conjugate_chain_exact_after_one_sweep():
    # w ~ N(0.3, 2), z = 1.7 w, y ~ N(z, 0.4) observed at 1.1
    x, y, noise, m0, v0 = 1.7, 1.1, 0.4, 0.3, 2.0
    vars_ = [Variable("w", "gaussian", M.gaussian(m0, v0)), Variable("z", "gaussian")]
    lik = GaussianLikelihoodFactor(y, noise)
    factors = [ConstantFactor(1, lik.exact_message()), DotProductFactor([0], 1, np.array([x]))]
    g = FactorGraph(vars_, factors, [(0, 0), (1, 1), (1, 0)])
    rep = run_ep(g, max_iters=1, convergence_tol=0.0)
    prec = 1 / v0 + x * x / noise
    mean = (m0 / v0 + x * y / noise) / prec
    post = rep.final_beliefs[0].params()
    assert post[0] == pytest.approx(mean, abs=1e-8)
    assert post[1] == pytest.approx(1 / prec, abs=1e-8)
    rep2 = run_ep(g, max_iters=5)
    assert rep2.converged and rep2.iterations_run == 1


def test_conjugate_precision_posterior():
    x = np.array([0.3, -1.2, 2.0, 0.1])
    g = FactorGraph([Variable("tau", "gamma", M.gamma(2.0, 3.0))],
                    [ConstantFactor(0, precision_likelihood_message(v)) for v in x],
                    [(f, 0) for f in range(len(x))])
    rep = run_ep(g, 1)
    s, r = rep.final_beliefs[0].params()
    assert s == pytest.approx(2.0 + len(x) / 2, abs=1e-12)
    assert r == pytest.approx(3.0 + np.sum(x * x) / 2, abs=1e-12)


def test_damping():
    target = M.gaussian(2.0, 0.5)
    g = FactorGraph([Variable("x", "gaussian", M.gaussian(0.0, 1.0))],
                    [OperatorFactor([0], [Family.GAUSSIAN], FixedOperator(target))], [(0, 0)])
    run_ep(g, 1, damping=0.5)
    np.testing.assert_allclose(g.messages[(0, 0)].natural, 0.5 * np.array(target.natural))
    g2 = FactorGraph([Variable("x", "gaussian", M.gaussian(0.0, 1.0))],
                     [OperatorFactor([0], [Family.GAUSSIAN], FixedOperator(target))], [(0, 0)])
    run_ep(g2, 1, damping=1.0)
    assert g2.messages[(0, 0)] == target
    with pytest.raises(ImproperParameters):
        run_ep(g2, 1, damping=0.0)


def test_improper_updates_are_skipped():
    bad = M(Family.GAUSSIAN, (0.0, 0.5))
    g = FactorGraph([Variable("x", "gaussian", M.gaussian(0.0, 1.0))],
                    [ConstantFactor(0, M.gaussian(1.0, 1.0)),
                     OperatorFactor([0], [Family.GAUSSIAN], FixedOperator(bad))],
                    [(0, 0), (1, 0)])
    rep = run_ep(g, 2, convergence_tol=0.0)
    assert rep.skipped_updates == 2
    assert g.messages[(1, 0)].is_uniform


def test_all_improper_raises():
    bad = M(Family.GAUSSIAN, (0.0, 0.5))
    g = FactorGraph([Variable("x", "gaussian")],
                    [OperatorFactor([0], [Family.GAUSSIAN], FixedOperator(bad))], [(0, 0)])
    with pytest.raises(AllMessagesImproper):
        run_ep(g, 1)


def test_operator_errors_become_operator_failure():
    g = FactorGraph([Variable("x", "gaussian")],
                    [OperatorFactor([0], [Family.GAUSSIAN], FixedOperator(exc=ValueError("boom")))],
                    [(0, 0)])
    with pytest.raises(OperatorFailure):
        run_ep(g, 1)


def test_beliefs_consistent_after_run(logistic_problem):
    _, train, _ = logistic_problem
    sub = train.subset(np.arange(20))
    g = build_logistic_graph(sub.X, sub.y)
    run_ep(g, 3)
    assert g.consistency_error() < 1e-10
    for v in range(len(g.variables)):
        nat = np.array(g.variables[v].prior.natural)
        for (f, pos), m in g.messages.items():
            if g.factors[f].neighbors[pos] == v:
                nat = nat + m.natural
        np.testing.assert_allclose(g.belief(v).natural, nat, atol=1e-10)


def test_quadrature_ep_classifies_training_set(logistic_problem):
    w, train, _ = logistic_problem
    rep = run_ep(build_logistic_graph(train.X, train.y), 10)
    w_hat = posterior_mean_w(rep, 5)
    # label noise bounds what any classifier can reach; compare with the true weights
    assert classification_error(w_hat, train) <= classification_error(w, train) + 0.02
    assert rep.operator_invocations == 10 * 2 * 100


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_quadrature_ep_matches_true_weights(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(5)
    train = synthetic_logistic(w, 100, rng)
    w_hat = posterior_mean_w(run_ep(build_logistic_graph(train.X, train.y), 10), 5)
    assert classification_error(w_hat, train) <= classification_error(w, train) + 0.02


def test_quadrature_ep_strong_signal_error_below_015():
    rng = np.random.default_rng(10)
    w = rng.standard_normal(5)
    w *= 4.0 / np.linalg.norm(w)
    train = synthetic_logistic(w, 100, rng)
    w_hat = posterior_mean_w(run_ep(build_logistic_graph(train.X, train.y), 10), 5)
    assert classification_error(w_hat, train) < 0.15


@pytest.mark.slow
def test_importance_sampling_close_to_quadrature(logistic_problem):
    _, train, _ = logistic_problem
    quad = posterior_mean_w(run_ep(build_logistic_graph(train.X, train.y), 10), 5)
    iso = ImportanceSamplingOperator(proposal=Proposal(M.gaussian(0.0, 200.0), 500_000), seed=1)
    rep = run_ep(build_logistic_graph(train.X, train.y, operators=iso), 10, rng=np.random.default_rng(2))
    assert np.max(np.abs(posterior_mean_w(rep, 5) - quad)) < 0.05


def test_collect_counts():
    g = build_logistic_graph([[0.5]], [1])
    assert collect_training_messages(g, 0) == []
    log = collect_training_messages(g, 1)
    assert sorted(pos for _, pos, _ in log) == [0, 1]
    g = build_logistic_graph(np.ones((7, 2)), [0, 1] * 3 + [1])
    assert len(collect_training_messages(g, 3)) == 3 * 7 * 2


def test_quadrature_oracle_queried_once_per_tuple():
    g = build_logistic_graph(np.eye(3), [0, 1, 1])
    op = g.factors[2].operators[0]
    rep = run_ep(g, 2, convergence_tol=0.0)
    assert rep.oracle_query_count == rep.operator_invocations == 12
    # the p-direction cavity is unchanged by the z update, so one projection serves both
    assert op.queries <= 12


def test_trace_csv(tmp_path):
    g = build_logistic_graph([[1.0, -1.0], [0.5, 2.0]], [1, 0])
    rep = run_ep(g, 2, convergence_tol=0.0, trace=True)
    rep.to_csv(tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(rows) == 2 * 2 * 2
    assert set(rows[0]) == set(rep.TRACE_FIELDS)
    assert all(r["kind"] == "logistic" for r in rows)
