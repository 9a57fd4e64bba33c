"""Crude and importance-sampled rate estimators with relative half-width
tracking, plus the sample-size planner.

Estimates are built from streaming accumulators holding a count and exactly
rounded partial sums, so merging per-worker partials does not depend on the
order of the merge.
"""

import math
import time
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np

from .errors import EmptyStream, IncompatibleTargets, InvalidInput, MissingTerms, NonFiniteWeight
from .scenario import Scenario
from .sim import step_log_ratio


# ---------------------------------------------------------------- normal quantile

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00)


def norm_ppf(p):
    """Inverse standard-normal CDF by Acklam's rational approximation.

    The raw approximation is good to about 1e-9 relative; one Halley step on
    ``erfc`` takes it to machine precision.
    """
    if not 0.0 < p < 1.0:
        raise InvalidInput("quantile level must lie in (0, 1)")
    lo = 0.02425
    if p < lo:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - lo:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def z_value(beta):
    """Two-sided critical value z_{beta/2} = Phi^{-1}(1 - beta/2)."""
    if not 0 < beta < 1:
        raise InvalidInput("beta must lie in (0, 1)")
    return norm_ppf(1.0 - beta / 2.0)


@dataclass(frozen=True)
class PlannerInput:
    P: float
    b: float = 0.2
    beta: float = 0.05

    def __post_init__(self):
        if not (0 < self.P <= 1 and self.b > 0 and 0 < self.beta < 1):
            raise InvalidInput("need 0 < P <= 1, b > 0 and 0 < beta < 1")


def required_n(p: PlannerInput):
    """Smallest n with (1-P)/P * z^2 / b^2 <= n."""
    z = z_value(p.beta)
    bound = (1.0 - p.P) / p.P * z * z / (p.b * p.b)
    return int(math.ceil(bound - 1e-9 * max(1.0, bound)))


# ---------------------------------------------------------------- accumulation

@dataclass
class RateAccumulator:
    """Streaming sums of estimator summands ``w_i * I_i`` and of the raw ratios ``w_i``."""

    n: int = 0
    sum_parts: List[float] = field(default_factory=list)
    sumsq_parts: List[float] = field(default_factory=list)
    w_parts: List[float] = field(default_factory=list)
    w_min: float = math.inf
    w_max: float = -math.inf
    hits: int = 0

    def add(self, indicators, log_ratios=None):
        ind = np.asarray(indicators, dtype=float).ravel()
        if log_ratios is None:
            w = np.ones_like(ind)
        else:
            lr = np.asarray(log_ratios, dtype=float).ravel()
            if lr.shape != ind.shape:
                raise InvalidInput("indicators and log ratios must align")
            if not np.all(np.isfinite(lr)):
                raise NonFiniteWeight("non-finite log likelihood ratio")
            with np.errstate(over="ignore"):
                w = np.exp(lr)
        if ind.size == 0:
            return self
        vals = w * ind
        if not np.all(np.isfinite(vals)):
            raise NonFiniteWeight("likelihood ratio overflowed")
        self.n += ind.size
        self.sum_parts.append(math.fsum(vals))
        self.sumsq_parts.append(math.fsum(vals * vals))
        self.w_parts.append(math.fsum(w))
        self.w_min = min(self.w_min, float(w.min()))
        self.w_max = max(self.w_max, float(w.max()))
        self.hits += int(np.count_nonzero(ind))
        return self

    def merge(self, other):
        return RateAccumulator(
            self.n + other.n,
            self.sum_parts + other.sum_parts,
            self.sumsq_parts + other.sumsq_parts,
            self.w_parts + other.w_parts,
            min(self.w_min, other.w_min),
            max(self.w_max, other.w_max),
            self.hits + other.hits,
        )

    def report(self, beta=0.05, mode="is", omega_target=None, wall_clock=0.0):
        if self.n == 0:
            raise EmptyStream("no scenarios consumed")
        n = self.n
        s = math.fsum(self.sum_parts)
        ss = math.fsum(self.sumsq_parts)
        est = s / n
        sample_var = max(0.0, (ss - s * s / n) / (n - 1)) if n > 1 else 0.0
        var = sample_var / n
        se = math.sqrt(var)
        z = z_value(beta)
        omega = z * se / est if est > 0 else math.inf
        n_eff = s * s / ss if ss > 0 else 0.0
        return EstimationReport(
            mode=mode, n=n, estimate=est, variance=var, sample_variance=sample_var, std_error=se,
            omega=omega, beta=beta, z=z, hits=self.hits, n_eff=n_eff,
            weight_min=self.w_min, weight_max=self.w_max, weight_mean=math.fsum(self.w_parts) / n,
            omega_target=omega_target, wall_clock=wall_clock,
        )


@dataclass(frozen=True)
class EstimationReport:
    mode: str
    n: int
    estimate: float
    variance: float  # of the estimator (sample variance / n)
    sample_variance: float  # of one summand
    std_error: float
    omega: float  # relative half-width at confidence 1 - beta
    beta: float
    z: float
    hits: int
    n_eff: float  # (sum w I)^2 / sum (w I)^2
    weight_min: float
    weight_max: float
    weight_mean: float
    omega_target: Optional[float] = None
    wall_clock: float = 0.0

    def ci(self):
        half = self.z * self.std_error
        return self.estimate - half, self.estimate + half

    def to_dict(self, timing=False):
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.setdefault("wall_clock", 0.0)
        return cls(**d)


def _iter_chunks(stream):
    if isinstance(stream, np.ndarray):
        yield stream
        return
    for item in stream:
        yield np.atleast_1d(np.asarray(item, dtype=float))


def crude_estimate(outcomes, beta=0.05):
    """Sample mean of collision indicators."""
    t0 = time.perf_counter()
    acc = RateAccumulator()
    for chunk in _iter_chunks(outcomes):
        acc.add(chunk)
    return acc.report(beta, mode="crude", wall_clock=time.perf_counter() - t0)


def is_estimate(indicators, log_ratios, beta=0.05):
    """Importance-sampled estimate: mean of ``exp(log_ratio) * indicator``.

    Both arguments are arrays or parallel iterables of chunks.
    """
    t0 = time.perf_counter()
    acc = RateAccumulator()
    if isinstance(indicators, np.ndarray) or isinstance(log_ratios, np.ndarray):
        acc.add(indicators, log_ratios)
    else:
        for ind, lr in zip(indicators, log_ratios):
            acc.add(ind, lr)
    return acc.report(beta, mode="is", wall_clock=time.perf_counter() - t0)


def scenario_log_ratio(sc: Scenario):
    """log p(X)/q(X) of one scenario, accumulated in log space over the steps taken."""
    if sc.initial_log_terms is None or len(sc.log_ratio_terms) != len(sc.maneuvers):
        raise MissingTerms("scenario lacks the log density terms")
    lp0, lq0 = sc.initial_log_terms
    zp0, zq0 = sc.initial_log_mass
    total = (lp0 - zp0) - (lq0 - zq0)
    masses = sc.step_log_mass or ((0.0, 0.0),) * len(sc.log_ratio_terms)
    for terms, mass in zip(sc.log_ratio_terms, masses):
        total += step_log_ratio(*terms, *mass)
    return float(total)


@dataclass(frozen=True)
class TracePoint:
    n: int
    estimate: float
    omega: float


def convergence_trace(indicators, log_ratios=None, checkpoint_interval=1000, beta=0.05):
    """Running ``(n, estimate, omega)`` every ``checkpoint_interval`` scenarios.

    A final partial checkpoint is emitted if the stream ends between checkpoints.
    """
    if checkpoint_interval < 1:
        raise InvalidInput("checkpoint_interval must be >= 1")
    ind_chunks = _iter_chunks(indicators)
    lr_chunks = _iter_chunks(log_ratios) if log_ratios is not None else None
    acc = RateAccumulator()
    trace = []
    pending_i, pending_l = [], []
    filled = 0

    def flush():
        nonlocal filled
        ind = np.concatenate(pending_i)
        lr = np.concatenate(pending_l) if lr_chunks is not None else None
        acc.add(ind, lr)
        r = acc.report(beta)
        trace.append(TracePoint(r.n, r.estimate, r.omega))
        pending_i.clear()
        pending_l.clear()
        filled = 0

    for ind in ind_chunks:
        lr = next(lr_chunks) if lr_chunks is not None else None
        pos = 0
        while pos < ind.size:
            take = min(checkpoint_interval - filled, ind.size - pos)
            pending_i.append(ind[pos:pos + take])
            if lr is not None:
                pending_l.append(lr[pos:pos + take])
            filled += take
            pos += take
            if filled == checkpoint_interval:
                flush()
    if filled:
        flush()
    return trace


def first_crossing(trace, omega_target):
    """n of the first checkpoint with omega below the target, or None."""
    for pt in trace:
        if pt.omega < omega_target:
            return pt.n
    return None


def compare_reports(crude: EstimationReport, trim: EstimationReport):
    """Rate gap, test-count reduction and per-summand variance ratio of two runs."""
    if crude.beta != trim.beta or crude.omega_target != trim.omega_target:
        raise IncompatibleTargets("reports were produced under different confidence targets")
    ratio = crude.n / trim.n
    return {
        "crude_estimate": crude.estimate,
        "trimflow_estimate": trim.estimate,
        "rate_gap": trim.estimate - crude.estimate,
        "relative_rate_gap": (trim.estimate - crude.estimate) / crude.estimate if crude.estimate > 0 else math.inf,
        "crude_n": crude.n,
        "trimflow_n": trim.n,
        "test_count_ratio": ratio,
        "reduction": 1.0 - trim.n / crude.n,
        "variance_ratio": crude.sample_variance / trim.sample_variance if trim.sample_variance > 0 else math.inf,
        "beta": crude.beta,
        "omega_target": crude.omega_target,
    }
