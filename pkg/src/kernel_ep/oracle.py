"""Trusted (slow) message operators.

Two ways of computing the expected sufficient statistics of a factor's
tilted belief::

    b(x_f) = f(x_f) * prod_W m_{W->f}(x_W)

* :func:`is_project` -- self-normalised importance sampling driven by a
  forward sampler, usable for black-box factors;
* :func:`quadrature_project` -- adaptive composite Gauss-Legendre
  quadrature for factors that reduce to a one-dimensional integral.

Both are wrapped as message operators (:class:`QuadratureOperator`,
:class:`ImportanceSamplingOperator`) that the graph module can plug into a
factor and that :class:`kernel_ep.kjit.JitOperator` consults as its oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import minimize_scalar
from scipy.special import expit, gammaln, log_expit, logsumexp

from . import expfam
from .errors import (
    AllZeroWeights,
    ArityMismatch,
    DegenerateStats,
    DegenerateWeights,
    FamilyMismatch,
    ImproperInput,
    ImproperParameters,
    QuadratureNonConvergence,
)
from .expfam import ExpFamMessage, Family, SuffStats

MessageTuple = Tuple[ExpFamMessage, ...]

ESS_FLOOR = 10.0
QUAD_TOL = 1e-10
DEFAULT_PROPOSAL_VAR = 200.0
DEFAULT_PARTICLES = 500_000


def family_stats(family: Family, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if family is Family.GAUSSIAN:
        return x, x * x
    if family is Family.BETA:
        return np.log(x), np.log1p(-x)
    return np.log(x), x


def log_density_from_stats(m: ExpFamMessage, u1, u2):
    """log m(x) given the sufficient statistics of x; avoids forming x."""
    e1, e2 = m.natural
    out = e1 * u1 + e2 * u2 - m.log_partition()
    if m.family is Family.GAUSSIAN:
        out = out - 0.5 * math.log(2.0 * math.pi)
    return out


def check_tuple(incoming: Sequence[ExpFamMessage], families: Sequence[Family]) -> None:
    if len(incoming) != len(families):
        raise ArityMismatch(f"expected {len(families)} messages, got {len(incoming)}")
    for m, fam in zip(incoming, families):
        if m.family is not fam:
            raise FamilyMismatch(f"expected {fam.value} message, got {m.family.value}")


# ---------------------------------------------------------------------------
# Importance sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForwardSampler:
    """Forward model x_in -> x_out of a directed factor.

    ``draw(x_in, rng)`` returns output samples; ``out_stats(x_in, x_out)``
    returns the sufficient statistics of the output (given access to the
    inputs so deterministic maps can be evaluated stably).
    """

    in_family: Family
    out_family: Family
    draw: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    out_stats: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]

    @property
    def families(self) -> Tuple[Family, Family]:
        return (self.in_family, self.out_family)


def _logistic_stats(z, p):
    return log_expit(z), log_expit(-z)


LOGISTIC_SAMPLER = ForwardSampler(
    in_family=Family.GAUSSIAN,
    out_family=Family.BETA,
    draw=lambda z, rng: expit(z),
    out_stats=_logistic_stats,
)


@dataclass(frozen=True)
class Proposal:
    message: ExpFamMessage
    n_particles: int = DEFAULT_PARTICLES

    def __post_init__(self):
        if not self.message.is_proper:
            raise ImproperInput("proposal must be a proper distribution")
        if self.n_particles < 1:
            raise ImproperParameters("need at least one particle")


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise AllZeroWeights("all importance weights are zero")
    w = w / w.max()
    return float(w.sum() ** 2 / np.dot(w, w))


def normalized_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    return np.exp(lw - logsumexp(lw))


def is_project_all(incoming: MessageTuple, sampler: ForwardSampler, proposal: Proposal,
                   rng: np.random.Generator) -> Tuple[SuffStats, SuffStats]:
    """Importance estimates for both the input and the output variable."""
    check_tuple(incoming, sampler.families)
    m_in, m_out = incoming
    if not (m_in.is_proper and m_out.is_proper):
        raise ImproperInput("importance sampling needs proper incoming messages")
    if proposal.message.family is not sampler.in_family:
        raise FamilyMismatch("proposal must live on the factor input")
    x_in = expfam.sample(proposal.message, proposal.n_particles, rng)
    x_out = sampler.draw(x_in, rng)
    u_in = family_stats(sampler.in_family, x_in)
    u_out = sampler.out_stats(x_in, x_out)
    log_w = (log_density_from_stats(m_in, *u_in) + log_density_from_stats(m_out, *u_out)
             - expfam.log_pdf(proposal.message, x_in))
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    if not np.any(np.isfinite(log_w)):
        raise DegenerateWeights("no particle received positive weight")
    w = normalized_weights(log_w)
    ess = 1.0 / np.dot(w, w)
    if ess < ESS_FLOOR:
        raise DegenerateWeights(f"effective sample size {ess:.2f} below {ESS_FLOOR}")
    out = []
    for fam, (u1, u2) in ((sampler.in_family, u_in), (sampler.out_family, u_out)):
        keep = w > 0
        vals, errs = [], []
        for u in (u1, u2):
            uk = u[keep]
            wk = w[keep]
            est = float(np.dot(wk, uk))
            # delta-method standard error of a self-normalised estimate
            errs.append(float(math.sqrt(np.dot(wk * wk, (uk - est) ** 2))))
            vals.append(est)
        stats = SuffStats(fam, tuple(vals), tuple(errs))
        if fam is Family.GAUSSIAN and not stats.is_valid:
            raise DegenerateStats(f"importance estimate has non-positive variance: {stats.values}")
        out.append(stats)
    return out[0], out[1]


def is_project(incoming: MessageTuple, sampler: ForwardSampler, proposal: Proposal,
               target_var: int, rng: np.random.Generator) -> SuffStats:
    """Self-normalised importance estimate of the tilted belief's statistics.

    ``target_var`` is 0 for the factor input and 1 for its output.
    """
    return is_project_all(incoming, sampler, proposal, rng)[target_var]


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

@dataclass
class Tilted1D:
    """A tilted belief reduced to one integration variable ``t``."""

    log_density: Callable[[np.ndarray], np.ndarray]
    center: float
    scale: float
    stats: List[Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]]


class AnalyticFactor:
    """A factor whose tilted belief reduces to a 1D integral."""

    families: Tuple[Family, ...] = ()

    def tilted(self, incoming: MessageTuple) -> Tilted1D:
        raise NotImplementedError


class LogisticFactor(AnalyticFactor):
    """p = sigmoid(z); neighbours (z: Gaussian, p: Beta)."""

    families = (Family.GAUSSIAN, Family.BETA)
    sampler = LOGISTIC_SAMPLER

    def tilted(self, incoming):
        check_tuple(incoming, self.families)
        m_z, m_p = incoming
        if not m_z.is_proper:
            raise ImproperInput("logistic factor needs a proper Gaussian message on z")
        mean, var = m_z.params()
        a1, b1 = m_p.natural  # alpha - 1, beta - 1

        def logdens(z):
            return -0.5 * (z - mean) ** 2 / var + a1 * log_expit(z) + b1 * log_expit(-z)

        return Tilted1D(
            logdens, mean, math.sqrt(var),
            [lambda z: (z, z * z), lambda z: (log_expit(z), log_expit(-z))],
        )

    def __repr__(self):
        return "LogisticFactor()"


class CompoundGammaFactor(AnalyticFactor):
    """Gamma(tau; s2, r2) with r2 ~ Gamma(s1, r1) integrated out.

    The density of tau is proportional to tau**(s2-1) / (r1 + tau)**(s1+s2).
    Integration runs over u = ln(tau).
    """

    families = (Family.GAMMA,)

    def __init__(self, s1: float = 1.0, r1: float = 1.0, s2: float = 1.0):
        if min(s1, r1, s2) <= 0:
            raise ImproperParameters("compound gamma parameters must be positive")
        self.s1, self.r1, self.s2 = float(s1), float(r1), float(s2)

    def log_density(self, tau):
        s1, r1, s2 = self.s1, self.r1, self.s2
        return (gammaln(s1 + s2) - gammaln(s1) - gammaln(s2) + s1 * np.log(r1)
                + (s2 - 1.0) * np.log(tau) - (s1 + s2) * np.log(r1 + tau))

    def tilted(self, incoming):
        check_tuple(incoming, self.families)
        (m,) = incoming
        e1, e2 = m.natural  # shape - 1, -rate
        s1, r1, s2 = self.s1, self.r1, self.s2
        if e2 >= 0.0 and s1 <= 1.0:
            raise DegenerateStats("E[tau] diverges without a positive rate on the incoming message")
        if s2 + e1 <= 0.0:
            raise DegenerateStats("tilted compound-gamma density is not normalisable at tau -> 0")

        def logdens(u):
            return (s2 + e1) * u - (s1 + s2) * np.logaddexp(math.log(r1), u) + e2 * np.exp(u)

        if m.is_proper:
            shape, rate = m.params()
            center, scale = math.log(shape / rate), 1.0 / math.sqrt(shape)
        else:
            center, scale = math.log(r1), 1.0
        return Tilted1D(logdens, center, min(scale, 1.0), [lambda u: (u, np.exp(u))])

    def __repr__(self):
        return f"CompoundGammaFactor(s1={self.s1}, r1={self.r1}, s2={self.s2})"


class GaussianLikelihoodFactor(AnalyticFactor):
    """Observation y ~ N(x, noise_var) of a Gaussian variable x (conjugate)."""

    families = (Family.GAUSSIAN,)

    def __init__(self, y: float, noise_var: float):
        self.y, self.noise_var = float(y), float(noise_var)

    def exact_message(self) -> ExpFamMessage:
        return ExpFamMessage.gaussian(self.y, self.noise_var)

    def tilted(self, incoming):
        check_tuple(incoming, self.families)
        (m,) = incoming
        e1, e2 = m.natural
        y, s2 = self.y, self.noise_var
        lik = self.exact_message()
        post = expfam.multiply(m, lik)
        mean, var = post.params()

        def logdens(x):
            return e1 * x + e2 * x * x - 0.5 * (x - y) ** 2 / s2

        return Tilted1D(logdens, mean, math.sqrt(var), [lambda x: (x, x * x)])


_GL_CACHE = {}


def _gauss_legendre(n):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = leggauss(n)
    return _GL_CACHE[n]


def _safe(logdens, t):
    with np.errstate(all="ignore"):
        v = np.asarray(logdens(t), dtype=float)
    return np.where(np.isnan(v), -np.inf, v)


def _find_region(logdens, center, scale, drop=50.0):
    grid = center + scale * np.linspace(-60.0, 60.0, 2401)
    vals = _safe(logdens, grid)
    k = int(np.argmax(vals))
    if not np.isfinite(vals[k]):
        raise QuadratureNonConvergence("tilted density vanishes on the search grid")
    dt = grid[1] - grid[0]
    lo_b, hi_b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(lambda t: -float(_safe(logdens, np.array([t]))[0]),
                          bounds=(lo_b, hi_b), method="bounded",
                          options={"xatol": 1e-12 * max(1.0, abs(grid[k])) + 1e-14 * dt})
    mode = float(res.x) if -res.fun >= vals[k] else float(grid[k])
    top = float(_safe(logdens, np.array([mode]))[0])
    cutoff = top - drop

    def edge(direction):
        r = dt
        f = lambda rr: float(_safe(logdens, np.array([mode + direction * rr]))[0])
        if f(r) > cutoff:
            inner = r
            for _ in range(200):
                r *= 2.0
                if f(r) <= cutoff:
                    break
            else:
                raise QuadratureNonConvergence("tilted density has no visible tail")
            lo, hi = inner, r
        else:
            lo, hi = 0.0, r
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if f(mid) > cutoff:
                lo = mid
            else:
                hi = mid
        return hi

    return mode, top, mode - edge(-1.0), mode + edge(1.0)


def integrate_tilted(tilted: Tilted1D, tol: float = QUAD_TOL, max_level: int = 12):
    """Normaliser-free expectations of each statistic under the tilted density.

    Composite 16-node Gauss-Legendre panels, doubled until every expectation
    changes by less than ``tol`` (absolute, with a relative floor near 1e-13).
    """
    mode, top, lo, hi = _find_region(tilted.log_density, tilted.center, tilted.scale)
    nodes, weights = _gauss_legendre(16)
    prev = None
    n_panels = 16
    for _ in range(max_level):
        edges = np.linspace(lo, hi, n_panels + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        t = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        w = (half[:, None] * weights[None, :]).ravel()
        dens = np.exp(_safe(tilted.log_density, t) - top) * w
        z = dens.sum()
        if not z > 0:
            raise QuadratureNonConvergence("tilted density integrates to zero")
        cur = []
        for fn in tilted.stats:
            u1, u2 = fn(t)
            cur.append((float(np.dot(dens, u1) / z), float(np.dot(dens, u2) / z)))
        flat = np.array(cur).ravel()
        if not np.all(np.isfinite(flat)):
            raise QuadratureNonConvergence("non-finite quadrature estimate")
        if prev is not None:
            if np.all(np.abs(flat - prev) <= np.maximum(tol, 1e-13 * np.abs(flat))):
                return cur
        prev = flat
        n_panels *= 2
    raise QuadratureNonConvergence(f"no convergence after {n_panels // 2} panels")


def quadrature_project(incoming: MessageTuple, factor: AnalyticFactor, target_var: int,
                       tol: float = QUAD_TOL) -> SuffStats:
    tilted = factor.tilted(incoming)
    vals = integrate_tilted(tilted, tol)
    return SuffStats(factor.families[target_var], vals[target_var])


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

@dataclass
class MessageResult:
    message: ExpFamMessage
    stats: Optional[SuffStats] = None
    log_variances: Optional[np.ndarray] = None
    used_oracle: bool = True


class OracleOperator:
    """Operator that always computes the projected belief exactly (or by MC)."""

    families: Tuple[Family, ...] = ()
    is_oracle = True

    def __init__(self):
        self.queries = 0

    def stats(self, incoming: MessageTuple, target_var: int,
              rng: Optional[np.random.Generator] = None) -> SuffStats:
        raise NotImplementedError

    def propose(self, incoming, target_var, cavity, rng=None) -> MessageResult:
        s = self.stats(incoming, target_var, rng)
        belief = expfam.project_from_suffstats(s.family, s)
        return MessageResult(expfam.divide(belief, cavity), s, None, True)


class QuadratureOperator(OracleOperator):
    def __init__(self, factor: AnalyticFactor, tol: float = QUAD_TOL):
        super().__init__()
        self.factor = factor
        self.families = factor.families
        self.tol = tol
        self._last = None

    def stats(self, incoming, target_var, rng=None):
        key = tuple(m.natural for m in incoming)
        if self._last is None or self._last[0] != key:
            self.queries += 1
            vals = integrate_tilted(self.factor.tilted(tuple(incoming)), self.tol)
            self._last = (key, vals)
        return SuffStats(self.families[target_var], self._last[1][target_var])


class ImportanceSamplingOperator(OracleOperator):
    """Importance-sampling oracle; one draw serves both directions of a tuple."""

    def __init__(self, sampler: ForwardSampler = LOGISTIC_SAMPLER,
                 proposal: Optional[Proposal] = None, seed: Optional[int] = None):
        super().__init__()
        self.sampler = sampler
        self.families = sampler.families
        self.proposal = proposal or Proposal(ExpFamMessage.gaussian(0.0, DEFAULT_PROPOSAL_VAR))
        self.rng = np.random.default_rng(seed)
        self._last = None

    def stats(self, incoming, target_var, rng=None):
        key = tuple(m.natural for m in incoming)
        if self._last is None or self._last[0] != key:
            self.queries += 1
            est = is_project_all(tuple(incoming), self.sampler, self.proposal, rng or self.rng)
            self._last = (key, est)
        return self._last[1][target_var]
