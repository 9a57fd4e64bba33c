"""Scene / maneuver / scenario value types, the z-score normalizer and data summaries.

Joint sample vectors are laid out as ``(v_av, v_lead, gap, a_lead, m)``: the
four scene coordinates first, the maneuver last.
"""

import csv
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConstantDimension, DimensionMismatch, InvalidInput
from .risk import ttc

SCENE_FIELDS = ("v_av", "v_lead", "gap", "a_lead")
JOINT_FIELDS = SCENE_FIELDS + ("m",)
SCENE_DIM = len(SCENE_FIELDS)
JOINT_DIM = len(JOINT_FIELDS)
SCENE_DIMS = tuple(range(SCENE_DIM))
MANEUVER_DIM = SCENE_DIM

SCENARIO_CSV_COLUMNS = ("step", "v_av", "v_lead", "gap", "a_lead", "a_cmd", "ttc", "collided")


@dataclass(frozen=True)
class Scene:
    v_av: float
    v_lead: float
    gap: float
    a_lead: float

    def as_array(self):
        return np.array([self.v_av, self.v_lead, self.gap, self.a_lead], dtype=float)

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (SCENE_DIM,):
            raise DimensionMismatch(f"scene vector must have shape ({SCENE_DIM},), got {x.shape}")
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class Maneuver:
    a_cmd: float


@dataclass(frozen=True)
class Scenario:
    """One rollout: s_1, the maneuvers applied and every scene traversed.

    ``log_ratio_terms[t]`` is ``(log p_ms, log p_s, log q_ms, log q_s)`` at step t
    and ``initial_log_terms`` is ``(log p_s(s_1), log q_s(s_1))``. The optional
    ``*_log_mass`` entries hold ``(log Z_p, log Z_q)`` truncation masses of the
    bounded sampling laws; they default to zero (no truncation).
    """

    initial: Scene
    maneuvers: Tuple[Maneuver, ...]
    scenes: Tuple[Scene, ...]
    collided: bool
    min_ttc: float
    log_ratio_terms: Tuple[Tuple[float, float, float, float], ...] = ()
    initial_log_terms: Optional[Tuple[float, float]] = None
    step_log_mass: Tuple[Tuple[float, float], ...] = ()
    initial_log_mass: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if len(self.scenes) != len(self.maneuvers) + 1:
            raise InvalidInput("a scenario needs exactly one more scene than maneuvers")
        if self.scenes[0] != self.initial:
            raise InvalidInput("first scene must be the initial scene")
        if self.collided and self.scenes[-1].gap > 0:
            raise InvalidInput("collided scenario must end with gap <= 0")
        if self.log_ratio_terms and len(self.log_ratio_terms) != len(self.maneuvers):
            raise InvalidInput("log_ratio_terms must match the maneuver count")
        if self.step_log_mass and len(self.step_log_mass) != len(self.maneuvers):
            raise InvalidInput("step_log_mass must match the maneuver count")


@dataclass(frozen=True)
class Normalizer:
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        shift = np.asarray(self.shift, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        if shift.shape != scale.shape or shift.ndim != 1:
            raise DimensionMismatch("shift and scale must be 1-D of equal length")
        if not np.all(scale > 0):
            raise ConstantDimension("every scale must be positive")
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self):
        return self.shift.shape[0]

    def subset(self, dims):
        dims = list(dims)
        return Normalizer(self.shift[dims], self.scale[dims])

    def log_jacobian(self):
        """log |d z / d x| of the normalising map (constant)."""
        return -float(np.sum(np.log(self.scale)))

    def to_dict(self):
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["shift"], float), np.asarray(d["scale"], float))


def fit_normalizer(samples):
    """Per-dimension z-score normalizer (sample mean, sample std with ddof=1)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise DimensionMismatch("samples must be a 2-D table")
    if x.shape[0] < 2:
        raise ConstantDimension("need at least two samples to estimate a spread")
    scale = x.std(axis=0, ddof=1)
    if np.any(scale == 0) or not np.all(np.isfinite(scale)):
        bad = [int(i) for i in np.flatnonzero(~(scale > 0))]
        raise ConstantDimension(f"constant dimension(s): {bad}")
    return Normalizer(x.mean(axis=0), scale)


def _check_dim(x, n):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (n.dim,):
        raise DimensionMismatch(f"expected trailing dimension {n.dim}, got shape {x.shape}")
    return x


def normalize(x, n: Normalizer):
    x = _check_dim(x, n)
    return (x - n.shift) / n.scale


def denormalize(z, n: Normalizer):
    z = _check_dim(z, n)
    return z * n.scale + n.shift


@dataclass(frozen=True)
class DataSummary:
    m_min: float
    m_max: float
    scene_min: np.ndarray
    scene_max: np.ndarray
    count: int

    def __post_init__(self):
        if not self.m_min < self.m_max:
            raise InvalidInput("m_min must be < m_max")
        object.__setattr__(self, "scene_min", np.asarray(self.scene_min, float))
        object.__setattr__(self, "scene_max", np.asarray(self.scene_max, float))

    def in_box(self, scenes):
        """Boolean mask of scenes (N, 4) inside the observed data box."""
        scenes = np.asarray(scenes, dtype=float)
        return np.all((scenes >= self.scene_min) & (scenes <= self.scene_max), axis=-1)

    def to_dict(self):
        return {
            "m_min": self.m_min,
            "m_max": self.m_max,
            "scene_min": self.scene_min.tolist(),
            "scene_max": self.scene_max.tolist(),
            "count": self.count,
            "fields": list(SCENE_FIELDS),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["m_min"]), float(d["m_max"]), d["scene_min"], d["scene_max"], int(d["count"]))


def summarize(samples):
    """DataSummary of a joint (N, 5) sample table."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[1] != JOINT_DIM:
        raise DimensionMismatch(f"samples must be (N, {JOINT_DIM})")
    m = x[:, MANEUVER_DIM]
    s = x[:, :SCENE_DIM]
    return DataSummary(float(m.min()), float(m.max()), s.min(axis=0), s.max(axis=0), int(x.shape[0]))


def write_scenario_csv(path, scenario: Scenario):
    """One row per traversed scene; ``a_cmd`` is blank on the final scene."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCENARIO_CSV_COLUMNS)
        for t, sc in enumerate(scenario.scenes):
            a_cmd = "" if t >= len(scenario.maneuvers) else "%.17g" % scenario.maneuvers[t].a_cmd
            w.writerow([t, "%.17g" % sc.v_av, "%.17g" % sc.v_lead, "%.17g" % sc.gap,
                        "%.17g" % sc.a_lead, a_cmd, "%.17g" % ttc(sc), int(sc.gap <= 0)])
