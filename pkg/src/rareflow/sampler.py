"""Stepwise accept-reject sampling of leader maneuvers from the flow-defined
conditional ``q(m | s) = q_ms(m, s) / q_s(s)``, plus initial-scene sampling.

Densities are evaluated in normalised coordinates. Candidates are drawn
uniformly over the observed maneuver range and accepted under a grid-searched
envelope; every candidate whose conditional density exceeds the envelope is
counted so a run with an under-estimated envelope can be rejected.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateFlow, InvalidInput, MaxRejectionsExceeded, NonFinite
from .flow import Flow, flow_log_pdf, flow_sample
from .gmm import Gmm, gmm_conditional, gmm_log_pdf, gmm_marginal, gmm_sample
from .scenario import (MANEUVER_DIM, SCENE_DIMS, DataSummary, Maneuver, Normalizer, Scene,
                       denormalize, normalize)

MAX_VIOLATION_RATE = 1e-3
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class FlowDensity:
    """Density-model view of a trained flow."""

    def __init__(self, flow: Flow):
        self.flow = flow
        self.dim = flow.dim

    def log_pdf(self, x):
        return flow_log_pdf(self.flow, x)

    def sample(self, rng, n):
        return flow_sample(self.flow, rng, n)


class GmmDensity:
    """Density-model view of a Gaussian mixture."""

    def __init__(self, gmm: Gmm):
        self.gmm = gmm
        self.dim = gmm.dim

    def log_pdf(self, x):
        return gmm_log_pdf(self.gmm, x)

    def sample(self, rng, n):
        return gmm_sample(self.gmm, rng, n)


def as_density(model):
    if isinstance(model, Flow):
        return FlowDensity(model)
    if isinstance(model, Gmm):
        return GmmDensity(model)
    return model


@dataclass(frozen=True)
class SamplerConfig:
    m_min: float
    m_max: float
    envelope_grid: int = 64
    envelope_margin: float = 1.2
    max_rejections: int = 10_000

    def __post_init__(self):
        if not self.m_min < self.m_max:
            raise InvalidInput("m_min must be < m_max")
        if self.envelope_margin < 1 or self.envelope_grid < 16 or self.max_rejections < 1:
            raise InvalidInput("need margin >= 1, grid >= 16 and max_rejections >= 1")


@dataclass(frozen=True)
class StepDraw:
    maneuver: Maneuver
    rejections: int
    log_q_ms: float
    log_q_s: float
    log_p_ms: float
    log_p_s: float
    log_zp: float = 0.0
    log_zq: float = 0.0


@dataclass
class SamplerDiagnostics:
    candidates: int = 0
    accepted: int = 0
    violations: int = 0

    @property
    def acceptance_rate(self):
        return self.accepted / self.candidates if self.candidates else float("nan")

    @property
    def candidates_per_acceptance(self):
        return self.candidates / self.accepted if self.accepted else float("inf")

    @property
    def violation_rate(self):
        return self.violations / self.candidates if self.candidates else 0.0

    @property
    def valid(self):
        return self.violation_rate < MAX_VIOLATION_RATE

    def merge(self, other):
        return SamplerDiagnostics(self.candidates + other.candidates, self.accepted + other.accepted,
                                  self.violations + other.violations)

    def to_dict(self):
        return {
            "candidates": self.candidates,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "candidates_per_acceptance": self.candidates_per_acceptance,
            "envelope_violations": self.violations,
            "envelope_violation_rate": self.violation_rate,
            "valid": self.valid,
        }


# ---------------------------------------------------------------- core (normalised units)

def _joint(s, m):
    return np.column_stack([s, m])


def envelope_batch(s, q_ms, q_s, lo, hi, grid=64, margin=1.2):
    """Envelope of the conditional on ``[lo, hi]`` for each row of ``s``.

    Returns ``(M, log_mass, log_q_s)`` where ``M`` is ``margin`` times the grid
    maximum of ``q_ms(m, s) / q_s(s)`` and ``log_mass`` is the log of its
    trapezoidal integral over the interval.
    """
    s = np.atleast_2d(np.asarray(s, float))
    q_ms, q_s = as_density(q_ms), as_density(q_s)
    n = s.shape[0]
    lq_s = np.asarray(q_s.log_pdf(s), float).reshape(n)
    mg = np.linspace(lo, hi, grid)
    pts = np.column_stack([np.repeat(s, grid, axis=0), np.tile(mg, n)])
    lcond = np.asarray(q_ms.log_pdf(pts), float).reshape(n, grid) - lq_s[:, None]
    if not np.all(np.isfinite(lcond[np.isfinite(lq_s)])):
        raise NonFinite("non-finite conditional density on the envelope grid")
    top = lcond.max(axis=1)
    M = margin * np.exp(top)
    rel = np.exp(lcond - top[:, None])
    mass = _trapezoid(rel, mg, axis=1)
    with np.errstate(divide="ignore"):
        log_mass = top + np.log(mass)
    return M, log_mass, lq_s


def accept_reject_batch(s, q_ms, lq_s, M, lo, hi, rng, max_rejections=10_000, diag=None):
    """Draw one maneuver per row of ``s`` from ``q_ms(., s) / q_s(s)`` on [lo, hi].

    Returns ``(m, log_q_ms, rejections)``.
    """
    s = np.atleast_2d(np.asarray(s, float))
    q_ms = as_density(q_ms)
    n = s.shape[0]
    M = np.asarray(M, float).reshape(n)
    if np.any(~(M > 0)) or np.any(~np.isfinite(M)):
        raise MaxRejectionsExceeded("envelope is zero or non-finite; acceptance is impossible")
    m_out = np.empty(n)
    lq_out = np.empty(n)
    rej = np.zeros(n, dtype=int)
    pending = np.arange(n)
    while pending.size:
        cand = rng.uniform(lo, hi, size=pending.size)
        u = rng.uniform(0.0, M[pending])
        lq = np.asarray(q_ms.log_pdf(_joint(s[pending], cand)), float).reshape(pending.size)
        cond = np.exp(lq - lq_s[pending])
        ok = u <= cond
        if diag is not None:
            diag.candidates += pending.size
            diag.accepted += int(ok.sum())
            diag.violations += int(np.sum(cond > M[pending]))
        acc = pending[ok]
        m_out[acc] = cand[ok]
        lq_out[acc] = lq[ok]
        pending = pending[~ok]
        rej[pending] += 1
        if pending.size and rej[pending].max() >= max_rejections:
            raise MaxRejectionsExceeded(f"no acceptance after {max_rejections} candidates")
    return m_out, lq_out, rej


# ---------------------------------------------------------------- physical-unit API

def _norm_bounds(cfg: SamplerConfig, normalizer: Optional[Normalizer]):
    if normalizer is None:
        return cfg.m_min, cfg.m_max
    sh, sc = normalizer.shift[MANEUVER_DIM], normalizer.scale[MANEUVER_DIM]
    return (cfg.m_min - sh) / sc, (cfg.m_max - sh) / sc


def sample_initial_states(flow_s, rng, n, normalizer: Optional[Normalizer] = None,
                          summary: Optional[DataSummary] = None, max_rejections=10_000):
    """Draw ``n`` initial scenes from the state flow, redrawing those outside the data box.

    Returns ``(scenes, normalised_scenes, draws)`` where ``draws`` counts all
    flow samples consumed (for the in-box acceptance fraction).
    """
    q_s = as_density(flow_s)
    scene_norm = normalizer.subset(SCENE_DIMS) if normalizer is not None else None
    out_phys, out_norm = [], []
    have = draws = 0
    rounds = 0
    while have < n:
        need = n - have
        z = q_s.sample(rng, need)
        x = denormalize(z, scene_norm) if scene_norm is not None else z
        ok = summary.in_box(x) if summary is not None else np.ones(need, bool)
        ok &= np.all(np.isfinite(x), axis=1)
        draws += need
        out_phys.append(x[ok])
        out_norm.append(z[ok])
        have += int(ok.sum())
        rounds += 1
        if rounds > max_rejections:
            raise DegenerateFlow("state flow keeps sampling outside the data box")
    return np.concatenate(out_phys)[:n], np.concatenate(out_norm)[:n], draws


def sample_initial_state(flow_s, rng, normalizer=None, summary=None, max_rejections=10_000):
    """One initial scene from the state flow (see :func:`sample_initial_states`)."""
    x, _, _ = sample_initial_states(flow_s, rng, 1, normalizer, summary, max_rejections)
    return Scene.from_array(x[0])


def conditional_envelope(s: Scene, flow_ms, flow_s, cfg: SamplerConfig, normalizer=None):
    """Envelope M(s) in the units of the maneuver coordinate the flows were fit in."""
    s_arr = s.as_array()[None]
    if normalizer is not None:
        s_arr = normalize(s_arr, normalizer.subset(SCENE_DIMS))
    lo, hi = _norm_bounds(cfg, normalizer)
    M, _, _ = envelope_batch(s_arr, flow_ms, flow_s, lo, hi, cfg.envelope_grid, cfg.envelope_margin)
    return float(M[0])


class TrimFlowSource:
    """Maneuver source that samples the flow conditional and records the
    per-step log densities the likelihood ratio needs.

    Call it with an (N, 4) array of physical scenes (batch rollout) or with a
    single :class:`Scene` (scalar rollout).
    """

    def __init__(self, flow_ms, flow_s, gmm: Gmm, cfg: SamplerConfig, rng, normalizer: Optional[Normalizer] = None):
        self.q_ms = as_density(flow_ms)
        self.q_s = as_density(flow_s)
        self.gmm = gmm
        self.gmm_s = gmm_marginal(gmm, SCENE_DIMS)
        self.cfg = cfg
        self.rng = rng
        self.normalizer = normalizer
        self.scene_norm = normalizer.subset(SCENE_DIMS) if normalizer is not None else None
        self.lo, self.hi = _norm_bounds(cfg, normalizer)
        self.diag = SamplerDiagnostics()

    def draw(self, scenes):
        """Vectorised step; returns ``(m_physical, terms, rejections)``."""
        scenes = np.atleast_2d(np.asarray(scenes, float))
        s = normalize(scenes, self.scene_norm) if self.scene_norm is not None else scenes
        M, log_zq, lq_s = envelope_batch(s, self.q_ms, self.q_s, self.lo, self.hi,
                                         self.cfg.envelope_grid, self.cfg.envelope_margin)
        m, lq_ms, rej = accept_reject_batch(s, self.q_ms, lq_s, M, self.lo, self.hi, self.rng,
                                            self.cfg.max_rejections, self.diag)
        lp_ms = gmm_log_pdf(self.gmm, _joint(s, m))
        lp_s = gmm_log_pdf(self.gmm_s, s)
        log_zp = gmm_conditional(self.gmm, MANEUVER_DIM, s).log_mass(self.lo, self.hi)
        terms = {"log_p_ms": lp_ms, "log_p_s": lp_s, "log_q_ms": lq_ms, "log_q_s": lq_s,
                 "log_zp": log_zp, "log_zq": log_zq}
        if self.normalizer is not None:
            m = m * self.normalizer.scale[MANEUVER_DIM] + self.normalizer.shift[MANEUVER_DIM]
        return m, terms, rej

    def __call__(self, states, t=None):
        if isinstance(states, Scene):
            m, terms, _ = self.draw(states.as_array()[None])
            return Maneuver(float(m[0])), {k: float(v[0]) for k, v in terms.items()}
        m, terms, _ = self.draw(states)
        return m, terms


def sample_maneuver(s: Scene, flows, cfg: SamplerConfig, rng, gmm: Gmm, normalizer=None, diag=None):
    """One accept-reject draw for scene ``s``; ``flows`` is ``(flow_ms, flow_s)``."""
    src = TrimFlowSource(flows[0], flows[1], gmm, cfg, rng, normalizer)
    m, terms, rej = src.draw(s.as_array()[None])
    if diag is not None:
        diag.candidates += src.diag.candidates
        diag.accepted += src.diag.accepted
        diag.violations += src.diag.violations
    return StepDraw(Maneuver(float(m[0])), int(rej[0]), float(terms["log_q_ms"][0]), float(terms["log_q_s"][0]),
                    float(terms["log_p_ms"][0]), float(terms["log_p_s"][0]),
                    float(terms["log_zp"][0]), float(terms["log_zq"][0]))


def trimflow_maneuver_source(flows, gmm: Gmm, cfg: SamplerConfig, rng, normalizer=None):
    """Rollout-ready source for the flow pair ``(flow_ms, flow_s)``."""
    return TrimFlowSource(flows[0], flows[1], gmm, cfg, rng, normalizer)


class NaturalisticSource:
    """Maneuvers from the mixture's exact conditional, truncated to the data range."""

    def __init__(self, gmm: Gmm, cfg: SamplerConfig, rng, normalizer: Optional[Normalizer] = None):
        self.gmm = gmm
        self.rng = rng
        self.normalizer = normalizer
        self.scene_norm = normalizer.subset(SCENE_DIMS) if normalizer is not None else None
        self.lo, self.hi = _norm_bounds(cfg, normalizer)

    def __call__(self, states, t=None):
        scalar = isinstance(states, Scene)
        arr = states.as_array()[None] if scalar else np.atleast_2d(np.asarray(states, float))
        s = normalize(arr, self.scene_norm) if self.scene_norm is not None else arr
        m = gmm_conditional(self.gmm, MANEUVER_DIM, s).sample_truncated(self.rng, self.lo, self.hi)
        if self.normalizer is not None:
            m = m * self.normalizer.scale[MANEUVER_DIM] + self.normalizer.shift[MANEUVER_DIM]
        if scalar:
            return Maneuver(float(m[0])), None
        return m, None


def sample_naturalistic_initial(gmm: Gmm, rng, n, normalizer=None, summary=None, max_rounds=10_000):
    """Initial scenes from the scene marginal, redrawn until inside the data box.

    Returns ``(scenes, normalised_scenes, draws)``.
    """
    return sample_initial_states(GmmDensity(gmm_marginal(gmm, SCENE_DIMS)), rng, n, normalizer, summary,
                                 max_rounds)
