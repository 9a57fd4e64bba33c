"""One-leader / one-follower longitudinal kinematics with a capped IDM follower.

The follower (the system under test) runs the Intelligent Driver Model whose
braking is limited to ``b_m``; the leader applies the sampled maneuvers.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInput, NonPositiveGap
from .risk import ttc_array
from .scenario import Maneuver, Scenario, Scene

TERM_KEYS = ("log_p_ms", "log_p_s", "log_q_ms", "log_q_s")
MASS_KEYS = ("log_zp", "log_zq")


@dataclass(frozen=True)
class IdmParams:
    v0: float = 33.3
    T_hw: float = 1.5
    a_max: float = 1.5
    b_comf: float = 1.67
    s0: float = 2.0
    delta: float = 4.0
    b_m: float = 4.5  # hard deceleration cap; math.inf disables it

    def __post_init__(self):
        vals = (self.v0, self.T_hw, self.a_max, self.b_comf, self.s0, self.delta, self.b_m)
        if not all(v > 0 for v in vals):
            raise InvalidInput("IDM parameters must be positive")
        if self.b_m < self.b_comf:
            raise InvalidInput("b_m must be >= b_comf")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0
    T: int = 10
    stop_on_collision: bool = True

    def __post_init__(self):
        if not (self.dt > 0 and self.T >= 1):
            raise InvalidInput("need dt > 0 and T >= 1")


def idm_accel_array(v, v_lead, gap, p: IdmParams):
    """Vectorised capped IDM acceleration; ``gap`` must be positive."""
    v = np.asarray(v, float)
    dv = v - np.asarray(v_lead, float)
    gap = np.asarray(gap, float)
    s_star = p.s0 + np.maximum(0.0, v * p.T_hw + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / gap) ** 2)
    return np.maximum(raw, -p.b_m)


def idm_accel(s: Scene, p: IdmParams):
    if s.gap <= 0:
        raise NonPositiveGap("IDM is undefined once the gap has closed")
    return float(idm_accel_array(s.v_av, s.v_lead, s.gap, p))


def step_arrays(states, m, cfg: SimConfig, p: IdmParams):
    """Advance an (N, 4) batch of scenes by one step of semi-implicit Euler.

    Scenes whose gap has already closed brake at the cap (or stand still when
    uncapped) instead of evaluating IDM.
    """
    states = np.asarray(states, float)
    v, vl, gap = states[:, 0], states[:, 1], states[:, 2]
    m = np.asarray(m, float)
    live = gap > 0
    brake = -p.b_m if math.isfinite(p.b_m) else -v / cfg.dt
    acc = np.where(live, idm_accel_array(v, vl, np.where(live, gap, 1.0), p), brake)
    v_new = np.maximum(0.0, v + acc * cfg.dt)
    vl_new = np.maximum(0.0, vl + m * cfg.dt)
    gap_new = gap + (vl_new - v_new) * cfg.dt
    return np.column_stack([v_new, vl_new, gap_new, m])


def step(s: Scene, m: Maneuver, cfg: SimConfig, p: IdmParams):
    out = step_arrays(s.as_array()[None], np.array([m.a_cmd]), cfg, p)[0]
    return Scene.from_array(out)


def rollout(s1: Scene, maneuver_source: Callable, cfg: SimConfig, p: IdmParams,
            initial_terms=None, initial_log_mass=(0.0, 0.0)):
    """Roll one scenario forward for up to ``cfg.T`` steps.

    ``maneuver_source(scene, t)`` returns ``(Maneuver, terms)`` where ``terms``
    is None or a mapping with the four log densities (``TERM_KEYS``) and
    optionally the two truncation log masses (``MASS_KEYS``).
    """
    scenes = [s1]
    maneuvers = []
    terms_seq, mass_seq = [], []
    collided = s1.gap <= 0
    s = s1
    if not collided:
        for t in range(cfg.T):
            m, terms = maneuver_source(s, t)
            maneuvers.append(m)
            if terms is not None:
                terms_seq.append(tuple(float(terms[k]) for k in TERM_KEYS))
                mass_seq.append(tuple(float(terms.get(k, 0.0)) for k in MASS_KEYS))
            s = step(s, m, cfg, p)
            scenes.append(s)
            if s.gap <= 0:
                collided = True
                if cfg.stop_on_collision:
                    break
    arr = np.array([sc.as_array() for sc in scenes])
    min_ttc = float(np.min(ttc_array(arr[:, 0], arr[:, 1], arr[:, 2])))
    if collided and scenes[-1].gap > 0:
        # contact happened mid-run and the vehicles separated again
        first = next(i for i, sc in enumerate(scenes) if sc.gap <= 0)
        scenes, maneuvers = scenes[:first + 1], maneuvers[:first]
        terms_seq, mass_seq = terms_seq[:first], mass_seq[:first]
    return Scenario(
        initial=s1,
        maneuvers=tuple(maneuvers),
        scenes=tuple(scenes),
        collided=bool(collided),
        min_ttc=min_ttc,
        log_ratio_terms=tuple(terms_seq),
        initial_log_terms=None if initial_terms is None else tuple(map(float, initial_terms)),
        step_log_mass=tuple(mass_seq) if terms_seq else (),
        initial_log_mass=tuple(map(float, initial_log_mass)),
    )


@dataclass
class BatchRollout:
    """Outcome of a vectorised rollout of N scenarios.

    ``step_log_ratio`` is the summed per-step log likelihood ratio over the
    steps each scenario actually took (zero when the source gives no terms).
    """

    collided: np.ndarray
    min_ttc: np.ndarray
    n_steps: np.ndarray
    step_log_ratio: np.ndarray
    first_contact: np.ndarray  # step index of first contact, -1 if none
    states: Optional[np.ndarray] = None  # (T+1, N, 4) when recorded
    maneuvers: Optional[np.ndarray] = None  # (T, N), NaN after stopping


def step_log_ratio(log_p_ms, log_p_s, log_q_ms, log_q_s, log_zp=0.0, log_zq=0.0):
    """log of p(m|s) / q(m|s) for one step, with optional truncation masses."""
    return (log_p_ms - log_p_s - log_zp) - (log_q_ms - log_q_s - log_zq)


def rollout_batch(s1, source, cfg: SimConfig, p: IdmParams, record=False):
    """Vectorised counterpart of :func:`rollout` for an (N, 4) array of initial scenes.

    ``source(states, t)`` receives the (n_active, 4) scenes still running and
    returns ``(m, terms)`` with ``m`` of shape (n_active,).
    """
    states = np.array(s1, dtype=float)
    N = states.shape[0]
    active = states[:, 2] > 0
    collided = ~active
    first_contact = np.where(collided, 0, -1)
    n_steps = np.zeros(N, dtype=int)
    lr = np.zeros(N)
    min_ttc = ttc_array(states[:, 0], states[:, 1], states[:, 2])
    hist = [states.copy()] if record else None
    mans = np.full((cfg.T, N), np.nan) if record else None
    for t in range(cfg.T):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            if record:
                hist.append(states.copy())
            continue
        m, terms = source(states[idx], t)
        m = np.asarray(m, float)
        if terms is not None:
            lr[idx] += step_log_ratio(*(terms[k] for k in TERM_KEYS),
                                      *(terms.get(k, 0.0) for k in MASS_KEYS))
        new = step_arrays(states[idx], m, cfg, p)
        states[idx] = new
        n_steps[idx] += 1
        if record:
            mans[t, idx] = m
            hist.append(states.copy())
        min_ttc[idx] = np.minimum(min_ttc[idx], ttc_array(new[:, 0], new[:, 1], new[:, 2]))
        hit = idx[new[:, 2] <= 0]
        newly = hit[~collided[hit]]
        first_contact[newly] = t + 1
        collided[hit] = True
        if cfg.stop_on_collision:
            active[hit] = False
    return BatchRollout(collided, min_ttc, n_steps, lr, first_contact,
                        np.array(hist) if record else None, mans)
