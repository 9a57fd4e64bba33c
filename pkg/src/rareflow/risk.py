"""Time-to-collision, the smooth risk weight exp(-ttc) and the hard collision flag."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class RiskConfig:
    ttc_cap: float = 100.0  # TTC above this is reported as "infinite"
    risky_ttc_threshold: float = 10.0  # diagnostic threshold on min TTC

    def __post_init__(self):
        if not (self.ttc_cap > 0 and self.risky_ttc_threshold > 0):
            raise InvalidInput("RiskConfig values must be positive")


def ttc_array(v_av, v_lead, gap):
    """Vectorised constant-velocity time-to-collision.

    gap / (v_av - v_lead) while closing with positive gap, +inf when not
    closing, 0 once the gap has closed.
    """
    v_av = np.asarray(v_av, dtype=float)
    v_lead = np.asarray(v_lead, dtype=float)
    gap = np.asarray(gap, dtype=float)
    closing = v_av - v_lead
    out = np.full(np.broadcast(v_av, v_lead, gap).shape, np.inf)
    mask = (closing > 0) & (gap > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.divide(gap, closing, out=np.full_like(out, np.inf), where=mask)
    out = np.where(mask, ratio, out)
    out = np.where(gap <= 0, 0.0, out)
    return out


def risk_weight_array(v_av, v_lead, gap):
    return np.exp(-ttc_array(v_av, v_lead, gap))


def ttc(s):
    """Time-to-collision of a single scene, in seconds (may be ``inf``)."""
    return float(ttc_array(s.v_av, s.v_lead, s.gap))


def risk_weight(s):
    """Risk indicator D(s) = exp(-ttc(s)), in [0, 1]."""
    return float(np.exp(-ttc(s)))


def is_collision(s):
    return bool(s.gap <= 0)


def scene_risk_weights(scenes):
    """D(s) for an (N, >=3) array whose first columns are v_av, v_lead, gap."""
    scenes = np.asarray(scenes, dtype=float)
    return risk_weight_array(scenes[..., 0], scenes[..., 1], scenes[..., 2])
