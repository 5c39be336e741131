"""Kernels on tuples of messages and their random Fourier features.

The main object is :class:`FeatureMap`, the frozen two-stage feature map

    phi(r) = sqrt(2/D_in)  [E_{x~r} cos(omega_i . x + b_i)]_i        (stage 1)
    psi(r) = sqrt(2/D_out) [cos(nu_i . phi(r) + c_i)]_i              (stage 2)

where ``r`` is the product of the messages in a tuple.  ``omega`` is drawn
from the spectral density of a Gaussian kernel with per-coordinate widths
``widths`` and ``nu`` from that of a Gaussian kernel of width ``gamma2`` on
R^{D_in}, so that ``psi(r) . psi(s)`` approximates

    kappa(r, s) = exp(-||mu_r - mu_s||^2 / (2 gamma2)).

Stage-1 expectations factorise across the tuple, so each entry is the real
part of ``exp(j b_i) prod_l cf_l(omega_il)`` with ``cf_l`` the characteristic
function of message ``l``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.special import betaln, roots_genlaguerre, roots_jacobi, xlog1py, xlogy

from .errors import (
    ArityMismatch,
    DegeneratePairsWarning,
    DimensionOverflow,
    FamilyMismatch,
    ImproperMessage,
    ImproperParameters,
    IoFailure,
    NonFiniteInput,
    VersionMismatch,
)
from .expfam import ExpFamMessage, Family

MessageTuple = Tuple[ExpFamMessage, ...]

CF_NODES = 64
FORMAT_VERSION = "kernel_ep.featuremap/1"
MAX_PRODUCT_DIM = 10_000_000
MEDIAN_SUBSAMPLE = 500


# ---------------------------------------------------------------------------
# quadrature rules for non-Gaussian messages
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4096)
def beta_nodes(alpha: float, beta: float, n: int = CF_NODES) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes on [0, 1] and normalised weights integrating against Beta(alpha, beta)."""
    if min(alpha, beta) < 1.0 or alpha + beta <= 200.0:
        t, w = roots_jacobi(n, beta - 1.0, alpha - 1.0)
        x = 0.5 * (1.0 + t)
    else:
        # concentrated: Gauss-Legendre on a +-12 sd window, density as weight
        mean = alpha / (alpha + beta)
        sd = math.sqrt(alpha * beta / ((alpha + beta) ** 2 * (alpha + beta + 1.0)))
        lo, hi = max(0.0, mean - 12 * sd), min(1.0, mean + 12 * sd)
        t, w = leggauss(n)
        x = 0.5 * (lo + hi) + 0.5 * (hi - lo) * t
        logd = xlogy(alpha - 1.0, x) + xlog1py(beta - 1.0, -x) - betaln(alpha, beta)
        w = w * np.exp(logd - logd.max())
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=4096)
def gamma_nodes(shape: float, rate: float, n: int = CF_NODES) -> Tuple[np.ndarray, np.ndarray]:
    t, w = roots_genlaguerre(n, shape - 1.0)
    x, w = t / rate, w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gaussian_nodes(mean: float, var: float, n: int = CF_NODES):
    t, w = hermegauss(n)
    return mean + math.sqrt(var) * t, w / w.sum()


def message_nodes(m: ExpFamMessage, n: int = CF_NODES):
    a, b = m.params()
    if m.family is Family.GAUSSIAN:
        return gaussian_nodes(a, b, n)
    if m.family is Family.BETA:
        return beta_nodes(a, b, n)
    return gamma_nodes(a, b, n)


def characteristic_function(messages: Sequence[ExpFamMessage], omega: np.ndarray,
                            n_nodes: int = CF_NODES) -> np.ndarray:
    """cf of each message at each frequency; shape (len(messages), len(omega)).

    Gaussian and Gamma cfs are closed form; Beta uses ``n_nodes``-point
    quadrature.
    """
    omega = np.asarray(omega, dtype=float)
    out = np.empty((len(messages), omega.size), dtype=complex)
    fam = messages[0].family if messages else None
    if fam is Family.GAUSSIAN:
        mv = np.array([m.params() for m in messages])
        out[:] = np.exp(1j * np.outer(mv[:, 0], omega) - 0.5 * np.outer(mv[:, 1], omega * omega))
        return out
    if fam is Family.GAMMA:
        sr = np.array([m.params() for m in messages])
        out[:] = np.exp(-sr[:, :1] * np.log(1.0 - 1j * np.outer(1.0 / sr[:, 1], omega)))
        return out
    cache: Dict[Tuple[float, float], np.ndarray] = {}
    for i, m in enumerate(messages):
        key = m.natural
        if key not in cache:
            x, w = beta_nodes(*m.params(), n_nodes)
            cache[key] = np.exp(1j * np.outer(omega, x)) @ w
        out[i] = cache[key]
    return out


# ---------------------------------------------------------------------------
# tuples
# ---------------------------------------------------------------------------

def as_tuples(tuples) -> List[MessageTuple]:
    """Accept a single tuple or a sequence of tuples."""
    if isinstance(tuples, ExpFamMessage):
        return [(tuples,)]
    tuples = list(tuples)
    if tuples and isinstance(tuples[0], ExpFamMessage):
        return [tuple(tuples)]
    return [tuple(t) for t in tuples]


def _check_tuples(tuples: List[MessageTuple], families: Sequence[Family]) -> None:
    for t in tuples:
        if len(t) != len(families):
            raise ArityMismatch(f"tuple of {len(t)} messages, map expects {len(families)}")
        for m, fam in zip(t, families):
            if m.family is not fam:
                raise FamilyMismatch(f"expected {fam.value}, got {m.family.value}")
            if not m.is_proper:
                raise ImproperMessage(f"improper message {m.to_text()} in tuple")


def _gaussian_arrays(tuples: List[MessageTuple]):
    mv = np.array([[m.params() for m in t] for t in tuples])
    return mv[..., 0], mv[..., 1]


# ---------------------------------------------------------------------------
# the two-stage map
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureMap:
    widths: np.ndarray          # (c,) inner Gaussian kernel widths sigma_l^2
    gamma2: float               # outer Gaussian width
    omega: np.ndarray           # (D_in, c)
    b: np.ndarray               # (D_in,)
    nu: np.ndarray              # (D_out, D_in)
    c: np.ndarray               # (D_out,)
    families: Tuple[Family, ...]
    seed: Optional[int] = None

    @classmethod
    def create(cls, families: Sequence, widths, gamma2: float, d_in: int, d_out: int,
               seed: Optional[int] = None) -> "FeatureMap":
        families = tuple(Family(f) for f in families)
        widths = np.asarray(widths, dtype=float).reshape(-1)
        if widths.size != len(families):
            raise ArityMismatch("one kernel width per tuple component")
        if not (np.all(widths > 0) and gamma2 > 0):
            raise ImproperParameters("kernel widths must be positive")
        if d_in < 1 or d_out < 1:
            raise ImproperParameters("feature dimensions must be positive")
        rng = np.random.default_rng(seed)
        omega = rng.standard_normal((d_in, widths.size)) / np.sqrt(widths)
        b = rng.uniform(0.0, 2.0 * np.pi, d_in)
        nu = rng.standard_normal((d_out, d_in)) / math.sqrt(gamma2)
        c = rng.uniform(0.0, 2.0 * np.pi, d_out)
        return cls(widths, float(gamma2), omega, b, nu, c, families, seed)

    def __post_init__(self):
        for name in ("widths", "omega", "b", "nu", "c"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "families", tuple(Family(f) for f in self.families))

    @property
    def arity(self) -> int:
        return len(self.families)

    @property
    def d_in(self) -> int:
        return self.omega.shape[0]

    @property
    def d_out(self) -> int:
        return self.nu.shape[0]

    def stage1(self, tuples) -> np.ndarray:
        return stage1_features(tuples, self)

    def stage2(self, phi) -> np.ndarray:
        return stage2_features(phi, self)

    def transform(self, tuples) -> np.ndarray:
        return stage2_features(stage1_features(tuples, self), self)

    def equals(self, other: "FeatureMap") -> bool:
        return (self.families == other.families and self.gamma2 == other.gamma2
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("widths", "omega", "b", "nu", "c")))

    # -- persistence ------------------------------------------------------
    def to_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {
            prefix + "widths": self.widths, prefix + "gamma2": np.array(self.gamma2),
            prefix + "omega": self.omega, prefix + "b": self.b,
            prefix + "nu": self.nu, prefix + "c": self.c,
            prefix + "families": np.array([f.value for f in self.families]),
            prefix + "seed": np.array(-1 if self.seed is None else self.seed),
        }

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "") -> "FeatureMap":
        families = tuple(Family(str(f)) for f in arrays[prefix + "families"])
        omega = np.asarray(arrays[prefix + "omega"])
        widths = np.asarray(arrays[prefix + "widths"])
        if omega.ndim != 2 or omega.shape[1] != len(families) or widths.size != len(families):
            raise VersionMismatch("feature map arrays disagree with the declared arity")
        seed = int(arrays[prefix + "seed"])
        return cls(widths, float(arrays[prefix + "gamma2"]), omega,
                   np.asarray(arrays[prefix + "b"]), np.asarray(arrays[prefix + "nu"]),
                   np.asarray(arrays[prefix + "c"]), families, None if seed < 0 else seed)

    def save(self, path) -> None:
        try:
            np.savez(path, format=np.array(FORMAT_VERSION), **self.to_arrays())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "FeatureMap":
        try:
            with np.load(path, allow_pickle=False) as data:
                if str(data["format"]) != FORMAT_VERSION:
                    raise VersionMismatch(f"unknown feature map format {data['format']}")
                return cls.from_arrays(data)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc


def _is_single(tuples) -> bool:
    if isinstance(tuples, ExpFamMessage):
        return True
    seq = list(tuples) if not isinstance(tuples, tuple) else tuples
    return len(seq) > 0 and isinstance(seq[0], ExpFamMessage)


def stage1_features(tuples, fmap: FeatureMap) -> np.ndarray:
    """Expected random Fourier features of the tuple product.

    Returns shape (D_in,) for a single tuple, (N, D_in) for a list.
    """
    single = _is_single(tuples)
    ts = as_tuples(tuples)
    _check_tuples(ts, fmap.families)
    prod = np.exp(1j * fmap.b)[None, :].repeat(len(ts), axis=0)
    for l in range(fmap.arity):
        prod = prod * characteristic_function([t[l] for t in ts], fmap.omega[:, l])
    phi = math.sqrt(2.0 / fmap.d_in) * prod.real
    return phi[0] if single else phi


def stage2_features(phi, fmap: FeatureMap) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise NonFiniteInput("stage-1 features contain non-finite values")
    if phi.shape[-1] != fmap.d_in:
        raise ArityMismatch(f"expected {fmap.d_in} stage-1 features, got {phi.shape[-1]}")
    return math.sqrt(2.0 / fmap.d_out) * np.cos(phi @ fmap.nu.T + fmap.c)


# ---------------------------------------------------------------------------
# exact kernels
# ---------------------------------------------------------------------------

def _component_inner(r: ExpFamMessage, s: ExpFamMessage, width: float, n_nodes: int) -> float:
    if r.family is Family.GAUSSIAN and s.family is Family.GAUSSIAN:
        (mr, vr), (ms, vs) = r.params(), s.params()
        tot = vr + vs + width
        return math.sqrt(width / tot) * math.exp(-0.5 * (mr - ms) ** 2 / tot)
    xr, wr = message_nodes(r, n_nodes)
    xs, ws = message_nodes(s, n_nodes)
    k = np.exp(-0.5 * np.subtract.outer(xr, xs) ** 2 / width)
    return float(wr @ k @ ws)


def embedding_inner(r: MessageTuple, s: MessageTuple, widths, n_nodes: int = 128) -> float:
    """<mu_r, mu_s> = E_{x~r} E_{y~s} k(x - y) for the product Gaussian kernel k."""
    widths = np.asarray(widths, dtype=float).reshape(-1)
    if len(r) != len(s) or len(r) != widths.size:
        raise ArityMismatch("tuples and widths disagree in arity")
    for m in (*r, *s):
        if not m.is_proper:
            raise ImproperMessage(f"improper message {m.to_text()}")
    out = 1.0
    for a, b, w in zip(r, s, widths):
        out *= _component_inner(a, b, float(w), n_nodes)
    return out


def embedding_gram(tuples: Sequence[MessageTuple], widths, n_nodes: int = 128) -> np.ndarray:
    """Matrix of embedding inner products; vectorised when every message is Gaussian."""
    ts = as_tuples(tuples)
    widths = np.asarray(widths, dtype=float).reshape(-1)
    if all(m.family is Family.GAUSSIAN for t in ts for m in t):
        _check_tuples(ts, [Family.GAUSSIAN] * widths.size)
        mean, var = _gaussian_arrays(ts)
        gram = np.ones((len(ts), len(ts)))
        for l, w in enumerate(widths):
            tot = var[:, None, l] + var[None, :, l] + w
            gram *= np.sqrt(w / tot) * np.exp(-0.5 * (mean[:, None, l] - mean[None, :, l]) ** 2 / tot)
        return gram
    n = len(ts)
    gram = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            gram[i, j] = gram[j, i] = embedding_inner(ts[i], ts[j], widths, n_nodes)
    return gram


def exact_gaussian_embedding_kernel(r: MessageTuple, s: MessageTuple, widths, gamma2: float,
                                    n_nodes: int = 128) -> float:
    """kappa(r, s) = exp(-||mu_r - mu_s||^2 / (2 gamma2)) evaluated exactly."""
    if gamma2 <= 0:
        raise ImproperParameters("gamma2 must be positive")
    r, s = tuple(as_tuples(r)[0]), tuple(as_tuples(s)[0])
    d2 = (embedding_inner(r, r, widths, n_nodes) - 2.0 * embedding_inner(r, s, widths, n_nodes)
          + embedding_inner(s, s, widths, n_nodes))
    return math.exp(-max(d2, 0.0) / (2.0 * gamma2))


def gaussian_embedding_kernel_matrix(tuples, widths, gamma2: float, n_nodes: int = 128) -> np.ndarray:
    gram = embedding_gram(tuples, widths, n_nodes)
    diag = np.diag(gram)
    d2 = np.maximum(diag[:, None] - 2.0 * gram + diag[None, :], 0.0)
    return np.exp(-d2 / (2.0 * gamma2))


# ---------------------------------------------------------------------------
# alternative kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MVFeatureMap:
    """Random features of the product Gaussian kernel on (means, variances)."""

    mean_widths: np.ndarray
    var_widths: np.ndarray
    omega: np.ndarray    # (D, 2c)
    b: np.ndarray        # (D,)

    @classmethod
    def create(cls, mean_widths, var_widths, d: int, seed: Optional[int] = None) -> "MVFeatureMap":
        wm = np.asarray(mean_widths, dtype=float).reshape(-1)
        wv = np.asarray(var_widths, dtype=float).reshape(-1)
        if wm.size != wv.size:
            raise ArityMismatch("need one mean width and one variance width per message")
        if not (np.all(wm > 0) and np.all(wv > 0)):
            raise ImproperParameters("MV kernel widths must be positive")
        rng = np.random.default_rng(seed)
        scales = np.concatenate([wm, wv])
        omega = rng.standard_normal((d, scales.size)) / scales
        b = rng.uniform(0.0, 2.0 * np.pi, d)
        return cls(wm, wv, omega, b)

    @property
    def d(self) -> int:
        return self.omega.shape[0]

    def transform(self, tuples) -> np.ndarray:
        return mv_kernel_features(tuples, self)


def mean_variance_vector(t: MessageTuple) -> np.ndarray:
    for m in t:
        if not m.is_proper:
            raise ImproperMessage(f"improper message {m.to_text()}")
    return np.array([m.mean() for m in t] + [m.variance() for m in t])


def mv_kernel(r: MessageTuple, s: MessageTuple, mean_widths, var_widths) -> float:
    scales = np.concatenate([np.ravel(mean_widths), np.ravel(var_widths)])
    diff = (mean_variance_vector(r) - mean_variance_vector(s)) / scales
    return float(np.exp(-0.5 * diff @ diff))


def mv_kernel_features(tuples, fmap: MVFeatureMap) -> np.ndarray:
    single = _is_single(tuples)
    ts = as_tuples(tuples)
    for t in ts:
        if 2 * len(t) != fmap.omega.shape[1]:
            raise ArityMismatch("tuple arity does not match the MV feature map")
    x = np.array([mean_variance_vector(t) for t in ts])
    feats = math.sqrt(2.0 / fmap.d) * np.cos(x @ fmap.omega.T + fmap.b)
    return feats[0] if single else feats


def expected_product_features(tuples, fmap: FeatureMap) -> np.ndarray:
    """Random features of the expected product kernel <mu_r, mu_s> (Gaussian messages)."""
    for t in as_tuples(tuples):
        for m in t:
            if m.family is not Family.GAUSSIAN:
                raise FamilyMismatch("expected product features need Gaussian messages")
    return stage1_features(tuples, fmap)


def _per_message_features(tuples, maps: Sequence[FeatureMap]):
    ts = as_tuples(tuples)
    if any(len(t) != len(maps) for t in ts):
        raise ArityMismatch("one feature map per tuple component")
    for fm in maps:
        if fm.arity != 1:
            raise ArityMismatch("per-message maps must have arity 1")
    return [stage1_features([(t[l],) for t in ts], maps[l]) for l in range(len(maps))]


def sum_embedding_features(tuples, maps: Sequence[FeatureMap]) -> np.ndarray:
    """Concatenated per-message features; inner product approximates the sum kernel."""
    single = _is_single(tuples)
    feats = np.concatenate(_per_message_features(tuples, maps), axis=1)
    return feats[0] if single else feats


def product_embedding_features(tuples, maps: Sequence[FeatureMap]) -> np.ndarray:
    """Kronecker product of per-message features (product of expected product kernels)."""
    dim = int(np.prod([fm.d_in for fm in maps]))
    if dim > MAX_PRODUCT_DIM:
        raise DimensionOverflow(f"product feature dimension {dim} exceeds {MAX_PRODUCT_DIM}")
    single = _is_single(tuples)
    parts = _per_message_features(tuples, maps)
    feats = parts[0]
    for p in parts[1:]:
        feats = np.einsum("ni,nj->nij", feats, p).reshape(feats.shape[0], -1)
    return feats[0] if single else feats


# ---------------------------------------------------------------------------
# median heuristic
# ---------------------------------------------------------------------------

def median_heuristic(tuples: Sequence[MessageTuple], d_in: int = 500, seed: Optional[int] = None,
                     max_pairs_tuples: int = MEDIAN_SUBSAMPLE) -> Tuple[np.ndarray, float]:
    """Kernel widths from message variances and the median embedding distance.

    Inner widths are the average variance of each tuple component; the outer
    width is the median of pairwise squared embedding distances (distinct
    pairs), estimated with ``d_in`` stage-1 features on at most
    ``max_pairs_tuples`` tuples.
    """
    ts = as_tuples(tuples)
    if len(ts) < 2:
        raise ImproperParameters("median heuristic needs at least two tuples")
    families = tuple(m.family for m in ts[0])
    _check_tuples(ts, families)
    widths = np.array([[m.variance() for m in t] for t in ts]).mean(axis=0)
    if not np.all(widths > 0):
        raise ImproperParameters("average message variance is zero")
    rng = np.random.default_rng(seed)
    if len(ts) > max_pairs_tuples:
        idx = np.sort(rng.choice(len(ts), max_pairs_tuples, replace=False))
        ts = [ts[i] for i in idx]
    probe = FeatureMap.create(families, widths, 1.0, d_in, 1, seed=rng.integers(2**32))
    phi = stage1_features(ts, probe)
    sq = np.sum(phi * phi, axis=1)
    d2 = np.maximum(sq[:, None] - 2.0 * phi @ phi.T + sq[None, :], 0.0)
    iu = np.triu_indices(len(ts), k=1)
    gamma2 = float(np.median(d2[iu]))
    if not gamma2 > 0.0:
        warnings.warn("all pairwise embedding distances are zero; using gamma2 = 1",
                      DegeneratePairsWarning, stacklevel=2)
        gamma2 = 1.0
    return widths, gamma2
