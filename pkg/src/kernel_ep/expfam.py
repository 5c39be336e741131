"""One-dimensional exponential-family messages (Gaussian, Beta, Gamma).

Messages are stored by their natural parameters so that the products and
quotients EP performs are plain vector additions.  Moment parameters are
derived on demand.

==========  ============================  =========================
family      natural parameters            sufficient statistics
==========  ============================  =========================
Gaussian    (precision*mean, -precision/2)  (x, x**2)
Beta        (alpha - 1, beta - 1)           (ln x, ln(1 - x))
Gamma       (shape - 1, -rate)              (ln x, x)
==========  ============================  =========================
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.special import betaln, digamma, gammaln, polygamma, xlog1py, xlogy

from .errors import (
    DegenerateStats,
    FamilyMismatch,
    ImproperInput,
    ImproperParameters,
    NoConvergence,
    NonFiniteInput,
    OutOfSupport,
    ParseError,
)

MIN_GAUSSIAN_VARIANCE = 1e-12
ROOT_TOL = 1e-10
ROOT_MAXITER = 100


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    BETA = "beta"
    GAMMA = "gamma"


def _trigamma(x):
    return polygamma(1, x)


@dataclass(frozen=True)
class ExpFamMessage:
    """An EP message in natural parameters; may be improper."""

    family: Family
    natural: Tuple[float, float]

    def __post_init__(self):
        fam = Family(self.family)
        nat = (float(self.natural[0]), float(self.natural[1]))
        if not all(math.isfinite(v) for v in nat):
            raise NonFiniteInput(f"non-finite natural parameters {nat}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "natural", nat)

    # -- constructors -----------------------------------------------------
    @classmethod
    def gaussian(cls, mean: float, var: float) -> "ExpFamMessage":
        return from_moments(Family.GAUSSIAN, mean, var)

    @classmethod
    def beta(cls, alpha: float, beta: float) -> "ExpFamMessage":
        return from_moments(Family.BETA, alpha, beta)

    @classmethod
    def gamma(cls, shape: float, rate: float) -> "ExpFamMessage":
        return from_moments(Family.GAMMA, shape, rate)

    @classmethod
    def uniform(cls, family) -> "ExpFamMessage":
        return cls(Family(family), (0.0, 0.0))

    # -- flags ------------------------------------------------------------
    @property
    def is_uniform(self) -> bool:
        return self.natural == (0.0, 0.0)

    @property
    def is_proper(self) -> bool:
        e1, e2 = self.natural
        if self.family is Family.GAUSSIAN:
            return e2 < 0.0
        if self.family is Family.BETA:
            return e1 > -1.0 and e2 > -1.0
        return e1 > -1.0 and e2 < 0.0

    # -- moment views -----------------------------------------------------
    def params(self) -> Tuple[float, float]:
        """Moment parameters: (mean, var), (alpha, beta) or (shape, rate)."""
        self._require_proper()
        e1, e2 = self.natural
        if self.family is Family.GAUSSIAN:
            prec = -2.0 * e2
            return e1 / prec, 1.0 / prec
        if self.family is Family.BETA:
            return e1 + 1.0, e2 + 1.0
        return e1 + 1.0, -e2

    def mean(self) -> float:
        a, b = self.params()
        if self.family is Family.GAUSSIAN:
            return a
        if self.family is Family.BETA:
            return a / (a + b)
        return a / b

    def variance(self) -> float:
        a, b = self.params()
        if self.family is Family.GAUSSIAN:
            return b
        if self.family is Family.BETA:
            s = a + b
            return a * b / (s * s * (s + 1.0))
        return a / (b * b)

    def log_partition(self) -> float:
        a, b = self.params()
        if self.family is Family.GAUSSIAN:
            return 0.5 * a * a / b + 0.5 * math.log(b)
        if self.family is Family.BETA:
            return float(betaln(a, b))
        return float(gammaln(a)) - a * math.log(b)

    def _require_proper(self):
        if not self.is_proper:
            raise ImproperInput(f"improper message {self.to_text()}")

    # -- algebra ----------------------------------------------------------
    def __mul__(self, other: "ExpFamMessage") -> "ExpFamMessage":
        return multiply(self, other)

    def __truediv__(self, other: "ExpFamMessage") -> "ExpFamMessage":
        return divide(self, other)

    # -- text form --------------------------------------------------------
    def to_text(self) -> str:
        e1, e2 = self.natural
        return f"{self.family.value}:{e1!r},{e2!r}"

    @classmethod
    def from_text(cls, text: str) -> "ExpFamMessage":
        try:
            fam, rest = text.strip().split(":", 1)
            p1, p2 = rest.split(",")
            return cls(Family(fam), (float(p1), float(p2)))
        except (ValueError, KeyError) as exc:
            raise ParseError(f"cannot parse message {text!r}") from exc

    def __repr__(self):
        if self.is_proper:
            a, b = self.params()
            return f"ExpFamMessage({self.family.value}, {a:.6g}, {b:.6g})"
        return f"ExpFamMessage({self.to_text()}, improper)"


@dataclass(frozen=True)
class SuffStats:
    """Expected sufficient statistics of a one-dimensional belief.

    ``stderr`` is filled in by Monte-Carlo estimators only.
    """

    family: Family
    values: Tuple[float, float]
    stderr: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "values", (float(self.values[0]), float(self.values[1])))

    @property
    def is_valid(self) -> bool:
        s1, s2 = self.values
        if not (math.isfinite(s1) and math.isfinite(s2)):
            return False
        if self.family is Family.GAUSSIAN:
            return s2 - s1 * s1 > 0.0
        if self.family is Family.BETA:
            return s1 < 0.0 and s2 < 0.0 and math.exp(s1) + math.exp(s2) < 1.0
        return s2 > 0.0 and s1 < math.log(s2)

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


def from_moments(family, p1: float, p2: float) -> ExpFamMessage:
    """Build a message from (mean, var), (alpha, beta) or (shape, rate)."""
    family = Family(family)
    if not (math.isfinite(p1) and math.isfinite(p2)):
        raise NonFiniteInput(f"non-finite moment parameters ({p1}, {p2})")
    if family is Family.GAUSSIAN:
        if p2 <= 0:
            raise ImproperParameters(f"Gaussian variance must be positive, got {p2}")
        prec = 1.0 / p2
        return ExpFamMessage(family, (prec * p1, -0.5 * prec))
    if p1 <= 0 or p2 <= 0:
        raise ImproperParameters(f"{family.value} parameters must be positive, got ({p1}, {p2})")
    if family is Family.BETA:
        return ExpFamMessage(family, (p1 - 1.0, p2 - 1.0))
    return ExpFamMessage(family, (p1 - 1.0, -p2))


def multiply(a: ExpFamMessage, b: ExpFamMessage) -> ExpFamMessage:
    if a.family is not b.family:
        raise FamilyMismatch(f"{a.family.value} * {b.family.value}")
    return ExpFamMessage(a.family, (a.natural[0] + b.natural[0], a.natural[1] + b.natural[1]))


def divide(numerator: ExpFamMessage, denominator: ExpFamMessage) -> ExpFamMessage:
    if numerator.family is not denominator.family:
        raise FamilyMismatch(f"{numerator.family.value} / {denominator.family.value}")
    n, d = numerator.natural, denominator.natural
    return ExpFamMessage(numerator.family, (n[0] - d[0], n[1] - d[1]))


def to_suffstats(m: ExpFamMessage) -> SuffStats:
    """Analytic expected sufficient statistics of a proper message."""
    a, b = m.params()
    if m.family is Family.GAUSSIAN:
        return SuffStats(m.family, (a, b + a * a))
    if m.family is Family.BETA:
        dab = digamma(a + b)
        return SuffStats(m.family, (digamma(a) - dab, digamma(b) - dab))
    return SuffStats(m.family, (digamma(a) - math.log(b), a / b))


def project_from_suffstats(family, s) -> ExpFamMessage:
    """Moment-match: the family member whose expected statistics equal ``s``."""
    family = Family(family)
    if isinstance(s, SuffStats):
        if s.family is not family:
            raise FamilyMismatch(f"statistics for {s.family.value}, asked for {family.value}")
        s1, s2 = s.values
    else:
        s1, s2 = float(s[0]), float(s[1])
    if not (math.isfinite(s1) and math.isfinite(s2)):
        raise DegenerateStats(f"non-finite statistics ({s1}, {s2})")
    if family is Family.GAUSSIAN:
        var = s2 - s1 * s1
        if var <= 0.0:
            raise DegenerateStats(f"Gaussian statistics imply variance {var}")
        return from_moments(family, s1, max(var, MIN_GAUSSIAN_VARIANCE))
    if family is Family.GAMMA:
        shape = _solve_gamma_shape(s1, s2)
        return from_moments(family, shape, shape / s2)
    alpha, beta = _solve_beta(s1, s2)
    return from_moments(family, alpha, beta)


def _solve_gamma_shape(mean_log: float, mean: float) -> float:
    # ln(shape) - digamma(shape) = ln E[x] - E[ln x]; left side decreases from inf to 0.
    if mean <= 0.0:
        raise DegenerateStats(f"Gamma statistics need E[x] > 0, got {mean}")
    target = math.log(mean) - mean_log
    if not target > 0.0:
        raise DegenerateStats(f"Gamma statistics violate Jensen: ln E[x] - E[ln x] = {target}")

    def h(s):
        return math.log(s) - digamma(s) - target

    # Minka's closed-form approximation as the starting point.
    s = (3.0 - target + math.sqrt((target - 3.0) ** 2 + 24.0 * target)) / (12.0 * target)
    lo, hi = 0.0, math.inf
    for _ in range(ROOT_MAXITER):
        val = h(s)
        if val > 0:
            lo = s
        else:
            hi = s
        deriv = 1.0 / s - _trigamma(s)
        step = val / deriv
        new = s - step
        if not (lo < new < hi):
            # bisection in log space on the current bracket
            if lo == 0.0:
                new = 0.5 * s
            elif math.isinf(hi):
                new = 2.0 * s
            else:
                new = math.sqrt(lo * hi)
        if abs(new - s) <= ROOT_TOL * s:
            return new
        s = new
    raise NoConvergence("Gamma moment matching did not converge")


def _solve_beta(mean_log_x: float, mean_log_1mx: float) -> Tuple[float, float]:
    # Maximise the concave (a-1) L1 + (b-1) L2 - ln B(a, b) by damped Newton.
    l1, l2 = mean_log_x, mean_log_1mx
    slack = 1.0 - math.exp(l1) - math.exp(l2) if (l1 < 0 and l2 < 0) else -1.0
    if not slack > 0.0:
        raise DegenerateStats(f"Beta statistics ({l1}, {l2}) are not attainable")

    def objective(a, b):
        return (a - 1.0) * l1 + (b - 1.0) * l2 - betaln(a, b)

    # digamma(x) ~ ln(x - 1/2) gives a closed-form starting point.
    scale = 0.5 / slack
    a, b = 0.5 + scale * math.exp(l1), 0.5 + scale * math.exp(l2)
    f = objective(a, b)
    for _ in range(ROOT_MAXITER):
        dab = digamma(a + b)
        g = np.array([l1 - digamma(a) + dab, l2 - digamma(b) + dab])
        if np.max(np.abs(g)) <= 16 * np.finfo(float).eps * max(1.0, abs(dab)):
            return a, b  # gradient is at round-off level
        tab = _trigamma(a + b)
        hess = np.array([[tab - _trigamma(a), tab], [tab, tab - _trigamma(b)]])
        step = -np.linalg.solve(hess, g)
        t = 1.0
        while True:
            na, nb = a + t * step[0], b + t * step[1]
            if na > 0 and nb > 0:
                nf = objective(na, nb)
                if nf >= f - 1e-12 * abs(f) or t < 1e-8:
                    break
            t *= 0.5
            if t < 1e-12:
                raise NoConvergence("Beta moment matching line search failed")
        done = abs(na - a) <= ROOT_TOL * a and abs(nb - b) <= ROOT_TOL * b
        a, b, f = na, nb, nf
        if done:
            return a, b
    raise NoConvergence("Beta moment matching did not converge")


def kl_divergence(p: ExpFamMessage, q: ExpFamMessage) -> float:
    """KL[p || q] in closed form for two proper messages of one family."""
    if p.family is not q.family:
        raise FamilyMismatch(f"KL between {p.family.value} and {q.family.value}")
    p._require_proper()
    q._require_proper()
    if p.natural == q.natural:
        return 0.0
    a1, b1 = p.params()
    a2, b2 = q.params()
    if p.family is Family.GAUSSIAN:
        x = (b1 - b2) / b2
        kl = 0.5 * ((x - math.log1p(x)) + (a1 - a2) ** 2 / b2)
    elif p.family is Family.BETA:
        kl = (betaln(a2, b2) - betaln(a1, b1) + (a1 - a2) * digamma(a1)
              + (b1 - b2) * digamma(b1) + (a2 - a1 + b2 - b1) * digamma(a1 + b1))
    else:
        kl = ((a1 - a2) * digamma(a1) - gammaln(a1) + gammaln(a2)
              + a2 * (math.log(b1) - math.log(b2)) + a1 * (b2 - b1) / b1)
    return max(float(kl), 0.0)


def sample(m: ExpFamMessage, n: int, rng: np.random.Generator) -> np.ndarray:
    a, b = m.params()
    if m.family is Family.GAUSSIAN:
        return rng.normal(a, math.sqrt(b), size=n)
    if m.family is Family.BETA:
        return rng.beta(a, b, size=n)
    return rng.gamma(a, 1.0 / b, size=n)


def log_pdf(m: ExpFamMessage, x):
    """Log density; ``x`` may be a scalar or an array."""
    a, b = m.params()
    xs = np.asarray(x, dtype=float)
    if m.family is Family.GAUSSIAN:
        out = -0.5 * np.log(2 * np.pi * b) - 0.5 * (xs - a) ** 2 / b
    elif m.family is Family.BETA:
        if np.any((xs < 0) | (xs > 1)):
            raise OutOfSupport(f"Beta density evaluated outside [0, 1]: {x}")
        out = xlogy(a - 1.0, xs) + xlog1py(b - 1.0, -xs) - betaln(a, b)
    else:
        if np.any(xs < 0):
            raise OutOfSupport(f"Gamma density evaluated at negative value: {x}")
        out = a * math.log(b) + xlogy(a - 1.0, xs) - b * xs - gammaln(a)
    return float(out) if np.ndim(out) == 0 else out
