"""Just-in-time learned message operator.

A :class:`JitOperator` sends the messages of one factor towards one of its
neighbours.  It maps the tuple of incoming messages through a two-stage
random feature map and predicts the regression target with Bayesian linear
regression.  Whenever the log predictive variance of any output exceeds its
threshold, the oracle is consulted instead and the answer is folded into the
regressor with a rank-one update.  The first ``minibatch_size`` invocations
always go to the oracle; they are used to pick kernel widths (median
heuristic) and batch-fit the regressor.

Two regression targets are supported:

``"belief"``
    expected sufficient statistics of the projected belief; the outgoing
    message is ``project(prediction) / cavity``.
``"outgoing"``
    natural parameters of the outgoing message itself.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import expfam
from .bayes import DEFAULT_SIGMA_02, DEFAULT_SIGMA_Y2, RegressorState, batch_fit, online_update, predict
from .errors import (
    DegenerateStats,
    IoFailure,
    NoConvergence,
    OperatorFailure,
    PreconditionError,
    VersionMismatch,
)
from .expfam import ExpFamMessage, Family, SuffStats
from .features import FeatureMap, median_heuristic
from .oracle import MessageResult, MessageTuple, OracleOperator

FORMAT_VERSION = "kernel_ep.jit-operator/1"
TARGET_MODES = ("belief", "outgoing")


@dataclass
class OperatorRecord:
    incoming: MessageTuple
    targets: np.ndarray
    features: Optional[np.ndarray] = None


@dataclass
class JitStats:
    invocations: int = 0
    oracle_queries: int = 0
    warmup_invocations: int = 0
    variance_trace: List[float] = field(default_factory=list)
    trace: List[Dict[str, Any]] = field(default_factory=list)


class JitOperator:
    """Uncertainty-gated learned operator for one outgoing direction of a factor.

    Parameters
    ----------
    families : sequence of Family
        Families of the factor's neighbours, in tuple order.
    target_var : int
        Index of the neighbour this operator sends to.
    oracle : OracleOperator
        Trusted operator consulted in warm-up and when uncertain.
    threshold : float
        Threshold on the log predictive variance, shared by every output
        unless ``thresholds`` overrides it per output.
    """

    def __init__(self, families: Sequence, target_var: int, oracle: Optional[OracleOperator],
                 *, d_in: int = 300, d_out: int = 500, sigma_y2: float = DEFAULT_SIGMA_Y2,
                 sigma_02: float = DEFAULT_SIGMA_02, threshold: float = -8.5,
                 thresholds: Optional[Sequence[float]] = None, minibatch_size: int = 300,
                 target_mode: str = "belief", seed: int = 0):
        if target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        self.families = tuple(Family(f) for f in families)
        self.target_var = int(target_var)
        self.target_family = self.families[self.target_var]
        self.oracle = oracle
        self.d_in, self.d_out = int(d_in), int(d_out)
        self.sigma_y2, self.sigma_02 = float(sigma_y2), float(sigma_02)
        self.thresholds = np.full(2, float(threshold)) if thresholds is None else np.asarray(
            thresholds, dtype=float)
        self.minibatch_size = int(minibatch_size)
        self.target_mode = target_mode
        self.seed = int(seed)
        self.feature_map: Optional[FeatureMap] = None
        self.regressor: Optional[RegressorState] = None
        self.warmup_buffer: List[OperatorRecord] = []
        self.stats = JitStats()
        self.context: Dict[str, Any] = {}
        self.is_oracle = False

    # -- state ------------------------------------------------------------
    @property
    def in_warmup(self) -> bool:
        return self.regressor is None

    def features(self, incoming) -> np.ndarray:
        return self.feature_map.transform(incoming)

    def predict(self, incoming):
        """Predicted targets and their predictive variances for one tuple or a batch."""
        if self.in_warmup:
            raise PreconditionError("operator is still in warm-up")
        return predict(self.regressor, self.features(incoming))

    # -- target conversion ------------------------------------------------
    def _targets_from_stats(self, stats: SuffStats, cavity: ExpFamMessage) -> np.ndarray:
        if self.target_mode == "belief":
            return np.array(stats.values)
        belief = expfam.project_from_suffstats(self.target_family, stats)
        return np.array(expfam.divide(belief, cavity).natural)

    def _message_from_targets(self, y, cavity: ExpFamMessage) -> ExpFamMessage:
        if self.target_mode == "belief":
            belief = expfam.project_from_suffstats(
                self.target_family, SuffStats(self.target_family, tuple(y)))
            return expfam.divide(belief, cavity)
        return ExpFamMessage(self.target_family, tuple(y))

    def _ask_oracle(self, incoming, cavity, rng):
        if self.oracle is None:
            raise OperatorFailure("operator has no oracle attached")
        try:
            stats = self.oracle.stats(incoming, self.target_var, rng)
        except Exception as exc:
            raise OperatorFailure(f"oracle failed: {exc}") from exc
        self.stats.oracle_queries += 1
        return stats, self._targets_from_stats(stats, cavity)

    # -- the operator -----------------------------------------------------
    def propose_message(self, incoming: MessageTuple, cavity: ExpFamMessage,
                        rng: Optional[np.random.Generator] = None) -> MessageResult:
        incoming = tuple(incoming)
        self.stats.invocations += 1
        if self.in_warmup:
            self.stats.warmup_invocations += 1
            stats, y = self._ask_oracle(incoming, cavity, rng)
            self.warmup_buffer.append(OperatorRecord(incoming, y))
            if len(self.warmup_buffer) >= self.minibatch_size:
                self.warmup_fit(self.warmup_buffer)
            return MessageResult(self._message_from_targets(y, cavity), stats, None, True)

        x = self.features(incoming)
        mean, var = predict(self.regressor, x)
        log_var = np.log(var)
        uncertain = bool(np.any(log_var > self.thresholds))
        message = None
        if not uncertain:
            try:
                message = self._message_from_targets(mean, cavity)
            except (DegenerateStats, NoConvergence):
                message = None  # invalid prediction: fall back to the oracle
        used = message is None
        stats = None
        if used:
            stats, y = self._ask_oracle(incoming, cavity, rng)
            online_update(self.regressor, x, y)
            message = self._message_from_targets(y, cavity)
        self.stats.variance_trace.append(float(log_var[0]))
        self.stats.trace.append(dict(self.context, invocation=self.stats.invocations,
                                     log_variance=float(log_var[0]), used_oracle=used))
        return MessageResult(message, stats, log_var, used)

    def propose(self, incoming, target_var, cavity, rng=None) -> MessageResult:
        if target_var != self.target_var:
            raise PreconditionError(f"operator sends to neighbour {self.target_var}, not {target_var}")
        return self.propose_message(incoming, cavity, rng)

    def warmup_fit(self, collected: Sequence[OperatorRecord], widths=None,
                   gamma2: Optional[float] = None) -> "JitOperator":
        """Build the feature map and batch-fit the regressor.

        Kernel widths default to the median heuristic on the collected tuples.
        """
        collected = list(collected)
        if len(collected) < self.minibatch_size or len(collected) < 2:
            raise PreconditionError(
                f"warm-up needs {self.minibatch_size} records, got {len(collected)}")
        tuples = [r.incoming for r in collected]
        if widths is None or gamma2 is None:
            mw, mg = median_heuristic(tuples, d_in=self.d_in, seed=self.seed)
            widths = mw if widths is None else widths
            gamma2 = mg if gamma2 is None else gamma2
        self.feature_map = FeatureMap.create(self.families, widths, gamma2, self.d_in,
                                             self.d_out, seed=self.seed + 1)
        X = self.feature_map.transform(tuples)
        Y = np.array([r.targets for r in collected])
        for r, x in zip(collected, X):
            r.features = x
        self.regressor = batch_fit(X.T, Y.T, self.sigma_02, self.sigma_y2)
        self.warmup_buffer = []
        return self

    # -- persistence ------------------------------------------------------
    def config(self) -> Dict[str, Any]:
        return {
            "families": [f.value for f in self.families], "target_var": self.target_var,
            "d_in": self.d_in, "d_out": self.d_out, "sigma_y2": self.sigma_y2,
            "sigma_02": self.sigma_02, "thresholds": self.thresholds.tolist(),
            "minibatch_size": self.minibatch_size, "target_mode": self.target_mode,
            "seed": self.seed, "invocations": self.stats.invocations,
            "oracle_queries": self.stats.oracle_queries,
            "warmup_invocations": self.stats.warmup_invocations,
        }


def save_operator(op: JitOperator, path) -> None:
    if op.in_warmup:
        raise PreconditionError("cannot save an operator before warm-up completes")
    reg = op.regressor
    arrays = dict(op.feature_map.to_arrays("fm_"))
    arrays.update(sigma_w=reg.sigma_w, xy=reg.xy, mu_w=reg.mu_w,
                  n_seen=np.array(reg.n_seen))
    try:
        np.savez(path, format=np.array(FORMAT_VERSION), config=np.array(json.dumps(op.config())),
                 **arrays)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_operator(path, oracle: Optional[OracleOperator] = None,
                  arity: Optional[int] = None) -> JitOperator:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read operator file {path}: {exc}") from exc
    with data:
        if "format" not in data or str(data["format"]) != FORMAT_VERSION:
            raise VersionMismatch(f"{path} is not a {FORMAT_VERSION} file")
        cfg = json.loads(str(data["config"]))
        fmap = FeatureMap.from_arrays(data, "fm_")
        if len(cfg["families"]) != fmap.arity or (arity is not None and arity != fmap.arity):
            raise VersionMismatch(
                f"operator arity {fmap.arity} does not match expected {arity or len(cfg['families'])}")
        op = JitOperator(cfg["families"], cfg["target_var"], oracle, d_in=cfg["d_in"],
                         d_out=cfg["d_out"], sigma_y2=cfg["sigma_y2"], sigma_02=cfg["sigma_02"],
                         thresholds=cfg["thresholds"], minibatch_size=cfg["minibatch_size"],
                         target_mode=cfg["target_mode"], seed=cfg["seed"])
        op.feature_map = fmap
        op.regressor = RegressorState(np.array(data["sigma_w"]), np.array(data["xy"]),
                                      np.array(data["mu_w"]), cfg["sigma_y2"], cfg["sigma_02"],
                                      int(data["n_seen"]))
        op.stats.invocations = cfg["invocations"]
        op.stats.oracle_queries = cfg["oracle_queries"]
        op.stats.warmup_invocations = cfg["warmup_invocations"]
    return op
