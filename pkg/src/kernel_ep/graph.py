"""Factor graphs and the EP schedule for the two models used here.

Messages from factors to variables are stored per edge; the message a
variable sends to a factor is never stored, it is the variable's belief
divided by that factor's message (the cavity).  Beliefs are kept as running
natural-parameter sums and recomputed from scratch at the end of each sweep.

Models:

* binary logistic regression, with ``z_i = w . x_i`` handled analytically
  under a fully factorised Gaussian on ``w`` and the logistic factor
  ``p_i = sigmoid(z_i)`` left to a pluggable message operator;
* a Gaussian with unknown precision ``tau`` under a compound gamma prior,
  where the collapsed prior factor is pluggable.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import expfam
from .errors import (
    AllMessagesImproper,
    DimensionMismatch,
    EmptyDataset,
    ImproperParameters,
    NonFiniteInput,
    OperatorFailure,
)
from .expfam import MIN_GAUSSIAN_VARIANCE, ExpFamMessage, Family, SuffStats
from .oracle import CompoundGammaFactor, LogisticFactor, MessageResult, QuadratureOperator


@dataclass
class Variable:
    name: str
    family: Family
    prior: Optional[ExpFamMessage] = None

    def __post_init__(self):
        self.family = Family(self.family)
        if self.prior is None:
            self.prior = ExpFamMessage.uniform(self.family)


class Factor:
    """A factor node; subclasses implement :meth:`message`."""

    kind = "factor"
    pluggable = False

    def __init__(self, neighbors: Sequence[int], families: Sequence[Family]):
        self.neighbors = tuple(int(v) for v in neighbors)
        self.families = tuple(Family(f) for f in families)

    def message(self, pos: int, incoming: Tuple[ExpFamMessage, ...], rng) -> Optional[MessageResult]:
        """Message towards neighbour ``pos`` given the cavity messages ``incoming``.

        Returning None means no usable update (the old message is kept).
        """
        raise NotImplementedError


class ConstantFactor(Factor):
    """A factor whose message never changes (priors, observed likelihoods)."""

    kind = "constant"

    def __init__(self, var: int, msg: ExpFamMessage):
        super().__init__([var], [msg.family])
        self.msg = msg

    def message(self, pos, incoming, rng):
        return MessageResult(self.msg, used_oracle=False)


class DotProductFactor(Factor):
    """Deterministic z = w . x with independent Gaussian messages on each w_j."""

    kind = "dot"

    def __init__(self, w_vars: Sequence[int], z_var: int, x: np.ndarray):
        super().__init__(list(w_vars) + [z_var], [Family.GAUSSIAN] * (len(w_vars) + 1))
        self.x = np.asarray(x, dtype=float)

    def message(self, pos, incoming, rng):
        d = len(self.x)
        w_msgs = incoming[:d]
        if not all(m.is_proper for m in w_msgs):
            return None
        mv = np.array([m.params() for m in w_msgs])
        mean_terms = self.x * mv[:, 0]
        var_terms = self.x ** 2 * mv[:, 1]
        if pos == d:
            var = max(float(var_terms.sum()), MIN_GAUSSIAN_VARIANCE)
            return MessageResult(ExpFamMessage.gaussian(float(mean_terms.sum()), var),
                                 used_oracle=False)
        z_cav = incoming[d]
        if not z_cav.is_proper:
            return MessageResult(ExpFamMessage.uniform(Family.GAUSSIAN), used_oracle=False)
        mz, vz = z_cav.params()
        xj = self.x[pos]
        rest_var = vz + var_terms.sum() - var_terms[pos]
        rest_mean = mz - (mean_terms.sum() - mean_terms[pos])
        prec = xj * xj / rest_var
        return MessageResult(ExpFamMessage(Family.GAUSSIAN, (xj * rest_mean / rest_var, -0.5 * prec)),
                             used_oracle=False)


class OperatorFactor(Factor):
    """A factor whose messages come from message operators.

    ``operators`` maps neighbour position to an operator exposing
    ``propose(incoming, target_var, cavity, rng)``; a single operator is used
    for every direction.
    """

    pluggable = True

    def __init__(self, neighbors, families, operators, kind="operator"):
        super().__init__(neighbors, families)
        if not isinstance(operators, dict):
            operators = {pos: operators for pos in range(len(self.neighbors))}
        self.operators = operators
        self.kind = kind

    def message(self, pos, incoming, rng):
        op = self.operators[pos]
        try:
            return op.propose(incoming, pos, incoming[pos], rng)
        except OperatorFailure:
            raise
        except Exception as exc:
            raise OperatorFailure(f"{self.kind} operator failed: {exc}") from exc


@dataclass
class FactorGraph:
    variables: List[Variable]
    factors: List[Factor]
    schedule: List[Tuple[int, int]]
    messages: Dict[Tuple[int, int], ExpFamMessage] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self._edges: List[List[Tuple[int, int]]] = [[] for _ in self.variables]
        for f, fac in enumerate(self.factors):
            for pos, v in enumerate(fac.neighbors):
                if fac.families[pos] is not self.variables[v].family:
                    raise DimensionMismatch(f"factor {f} expects {fac.families[pos].value} on "
                                            f"variable {self.variables[v].name}")
                self._edges[v].append((f, pos))
                self.messages.setdefault((f, pos), ExpFamMessage.uniform(self.variables[v].family))
        self.refresh_beliefs()

    def refresh_beliefs(self) -> None:
        self._belief = []
        for v, var in enumerate(self.variables):
            nat = np.array(var.prior.natural)
            for edge in self._edges[v]:
                nat = nat + self.messages[edge].natural
            self._belief.append(nat)

    def belief(self, v: int) -> ExpFamMessage:
        return ExpFamMessage(self.variables[v].family, tuple(self._belief[v]))

    def beliefs(self) -> List[ExpFamMessage]:
        return [self.belief(v) for v in range(len(self.variables))]

    def cavity(self, f: int, pos: int) -> ExpFamMessage:
        v = self.factors[f].neighbors[pos]
        nat = self._belief[v] - self.messages[(f, pos)].natural
        return ExpFamMessage(self.variables[v].family, tuple(nat))

    def incoming(self, f: int) -> Tuple[ExpFamMessage, ...]:
        return tuple(self.cavity(f, pos) for pos in range(len(self.factors[f].neighbors)))

    def set_message(self, f: int, pos: int, msg: ExpFamMessage) -> float:
        old = self.messages[(f, pos)]
        v = self.factors[f].neighbors[pos]
        delta = np.array(msg.natural) - np.array(old.natural)
        self._belief[v] = self._belief[v] + delta
        self.messages[(f, pos)] = msg
        return float(np.max(np.abs(delta)))

    def consistency_error(self) -> float:
        """Largest gap between stored beliefs and prior + sum of factor messages."""
        stored = [b.copy() for b in self._belief]
        self.refresh_beliefs()
        err = max(float(np.max(np.abs(a - b))) for a, b in zip(stored, self._belief))
        self._belief = stored
        return err


@dataclass
class EpRunReport:
    iterations_run: int
    converged: bool
    final_beliefs: List[ExpFamMessage]
    message_log: Optional[List[Tuple[Tuple[ExpFamMessage, ...], int, SuffStats]]] = None
    oracle_query_count: int = 0
    operator_invocations: int = 0
    skipped_updates: int = 0
    trace: List[Dict[str, Any]] = field(default_factory=list)

    TRACE_FIELDS = ("iteration", "factor", "kind", "target", "incoming", "outgoing",
                    "log_variance", "used_oracle")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.TRACE_FIELDS, lineterminator="\n")
            writer.writeheader()
            for row in self.trace:
                writer.writerow(row)


def run_ep(g: FactorGraph, max_iters: int = 10, damping: float = 1.0,
           convergence_tol: float = 1e-6, rng: Optional[np.random.Generator] = None,
           log_messages: bool = False, trace: bool = False) -> EpRunReport:
    """Run the graph's schedule for up to ``max_iters`` sweeps.

    Each factor message is computed from the current cavities and blended
    into the old one in natural parameters with weight ``damping``.
    Improper proposals are skipped.
    """
    if not 0.0 < damping <= 1.0:
        raise ImproperParameters("damping must lie in (0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    report = EpRunReport(0, False, [], [] if log_messages else None)
    for it in range(max_iters):
        max_change = 0.0
        accepted = 0
        for f, pos in g.schedule:
            fac = g.factors[f]
            if fac.pluggable:
                for op in fac.operators.values():
                    ctx = getattr(op, "context", None)
                    if ctx is not None:
                        ctx["ep_iteration"] = it
            incoming = g.incoming(f)
            result = fac.message(pos, incoming, rng)
            if fac.pluggable:
                report.operator_invocations += 1
                if result is not None and result.used_oracle:
                    report.oracle_query_count += 1
                if log_messages and result is not None and result.stats is not None:
                    report.message_log.append((incoming, pos, result.stats))
            if result is None or not result.message.is_proper:
                report.skipped_updates += 1
                if trace and fac.pluggable:
                    report.trace.append(_trace_row(it, f, fac, pos, incoming, None, result))
                continue
            old = g.messages[(f, pos)]
            if damping < 1.0:
                nat = damping * np.array(result.message.natural) + (1.0 - damping) * np.array(old.natural)
                new = ExpFamMessage(old.family, tuple(nat))
            else:
                new = result.message
            max_change = max(max_change, g.set_message(f, pos, new))
            accepted += 1
            if trace and fac.pluggable:
                report.trace.append(_trace_row(it, f, fac, pos, incoming, new, result))
        g.refresh_beliefs()
        report.iterations_run = it + 1
        if g.schedule and accepted == 0:
            raise AllMessagesImproper(f"iteration {it} produced no usable message")
        if max_change < convergence_tol:
            report.converged = True
            break
    report.final_beliefs = g.beliefs()
    return report


def _trace_row(it, f, fac, pos, incoming, new, result):
    logv = result.log_variances if result is not None else None
    return {
        "iteration": it, "factor": f, "kind": fac.kind, "target": pos,
        "incoming": ";".join(m.to_text() for m in incoming),
        "outgoing": new.to_text() if new is not None else "",
        "log_variance": "" if logv is None else ";".join(repr(float(v)) for v in logv),
        "used_oracle": int(bool(result is not None and result.used_oracle)),
    }


def collect_training_messages(g: FactorGraph, iterations: int,
                              rng: Optional[np.random.Generator] = None,
                              damping: float = 1.0):
    """(incoming tuple, target position, projected-belief statistics) per operator call."""
    if iterations <= 0:
        return []
    report = run_ep(g, iterations, damping, convergence_tol=0.0, rng=rng, log_messages=True)
    return report.message_log


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

def build_logistic_graph(X, y, prior_mean=0.0, prior_var=1.0, operators=None) -> FactorGraph:
    """Binary logistic regression y_i ~ Bernoulli(sigmoid(w . x_i)).

    ``operators`` drives the logistic factors: a single operator, or a dict
    {0: operator towards z, 1: operator towards p}.  Defaults to quadrature.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[1] < 1:
        raise DimensionMismatch("X must be an (n, d) array with d >= 1")
    n, d = X.shape
    if n < 1:
        raise EmptyDataset("no observations")
    if y.shape != (n,):
        raise DimensionMismatch(f"y has shape {y.shape}, expected ({n},)")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("non-finite covariates")
    if not np.all((y == 0) | (y == 1)):
        raise ImproperParameters("labels must be 0 or 1")
    prior_mean = np.broadcast_to(np.asarray(prior_mean, dtype=float), (d,))
    prior_var = np.broadcast_to(np.asarray(prior_var, dtype=float), (d,))
    if operators is None:
        operators = QuadratureOperator(LogisticFactor())

    variables = [Variable(f"w{j}", Family.GAUSSIAN, ExpFamMessage.gaussian(prior_mean[j], prior_var[j]))
                 for j in range(d)]
    factors: List[Factor] = []
    schedule: List[Tuple[int, int]] = []
    w_vars = list(range(d))
    for i in range(n):
        z = len(variables)
        variables.append(Variable(f"z{i}", Family.GAUSSIAN))
        p = len(variables)
        variables.append(Variable(f"p{i}", Family.BETA))
        bern = len(factors)
        yi = int(y[i])
        factors.append(ConstantFactor(p, ExpFamMessage.beta(yi + 1.0, 2.0 - yi)))
        factors[-1].kind = "bernoulli"
        dot = len(factors)
        factors.append(DotProductFactor(w_vars, z, X[i]))
        logi = len(factors)
        factors.append(OperatorFactor([z, p], [Family.GAUSSIAN, Family.BETA], operators,
                                      kind="logistic"))
        schedule += [(bern, 0), (dot, d), (logi, 0), (logi, 1)] + [(dot, j) for j in range(d)]
    return FactorGraph(variables, factors, schedule, meta={"model": "logistic", "n": n, "d": d})


def build_compound_gamma_graph(observations, s1: float = 1.0, r1: float = 1.0, s2: float = 1.0,
                               operator=None) -> FactorGraph:
    """x_i ~ N(0, precision tau), tau under the collapsed compound gamma prior."""
    x = np.asarray(observations, dtype=float).reshape(-1)
    if x.size < 1:
        raise EmptyDataset("no observations")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("non-finite observations")
    cg = CompoundGammaFactor(s1, r1, s2)
    if operator is None:
        operator = QuadratureOperator(cg)
    variables = [Variable("tau", Family.GAMMA)]
    factors: List[Factor] = []
    for xi in x:
        factors.append(ConstantFactor(0, precision_likelihood_message(xi)))
        factors[-1].kind = "gaussian-likelihood"
    factors.append(OperatorFactor([0], [Family.GAMMA], operator, kind="compound-gamma"))
    schedule = [(f, 0) for f in range(len(factors))]
    return FactorGraph(variables, factors, schedule,
                       meta={"model": "compound-gamma", "n": x.size, "params": (s1, r1, s2)})


def precision_likelihood_message(x: float) -> ExpFamMessage:
    """N(x; 0, 1/tau) as a function of tau: shape +1/2, rate +x^2/2."""
    return ExpFamMessage(Family.GAMMA, (0.5, -0.5 * float(x) ** 2))


def posterior_mean_w(report: EpRunReport, d: int) -> np.ndarray:
    return np.array([report.final_beliefs[j].mean() for j in range(d)])
