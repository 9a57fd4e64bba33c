"""Track loading (HighD column schema), car-following pair extraction and a
synthetic naturalistic generator with a known density.
"""

import csv
import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import jsonio
from .errors import DataError, InvalidInput, MissingColumn, NoPairsFound, TooManyMalformed
from .gmm import Gmm
from .scenario import JOINT_FIELDS, summarize

log = logging.getLogger(__name__)

DEFAULT_COLUMNS = {
    "frame": "frame",
    "id": "id",
    "x": "x",
    "speed": "xVelocity",
    "accel": "xAcceleration",
    "preceding_id": "precedingId",
}
HIGHD_FRAME_RATE = 25.0
MAX_MALFORMED_FRACTION = 0.01


@dataclass
class TrackTable:
    """Column arrays of parsed track rows."""

    frame: np.ndarray
    id: np.ndarray
    x: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    preceding_id: np.ndarray
    malformed: int = 0

    def __len__(self):
        return self.frame.shape[0]


def load_tracks_csv(path, columns: Optional[Dict[str, str]] = None):
    """Parse a track CSV. Malformed rows are skipped; more than 1% is an error.

    :param path: CSV file with a header row.
    :param columns: mapping from field name (``frame``, ``id``, ``x``, ``speed``,
        ``accel``, ``preceding_id``) to the column name used in the file.
    """
    mapping = dict(DEFAULT_COLUMNS)
    mapping.update(columns or {})
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    rows = {k: [] for k in mapping}
    bad = total = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for key, col in mapping.items():
            if col not in header:
                raise MissingColumn(f"missing required column {col!r} (for {key})")
        for rec in reader:
            total += 1
            try:
                vals = {k: float(rec[c]) for k, c in mapping.items()}
                if not all(np.isfinite(v) for v in vals.values()):
                    raise ValueError
                if vals["frame"] < 0 or vals["id"] < 0 or vals["preceding_id"] < 0:
                    raise ValueError
            except (TypeError, ValueError):
                bad += 1
                continue
            for k, v in vals.items():
                rows[k].append(v)
    if total and bad / total > MAX_MALFORMED_FRACTION:
        raise TooManyMalformed(f"{bad} of {total} rows malformed")
    if bad:
        log.warning("skipped %d malformed row(s) in %s", bad, path)
    ints = ("frame", "id", "preceding_id")
    return TrackTable(**{k: np.asarray(v, dtype=int if k in ints else float) for k, v in rows.items()},
                      malformed=bad)


def extract_car_following(tracks: TrackTable, min_duration=25, frame_rate=HIGHD_FRAME_RATE, step_stride=25):
    """(N, 5) table of ``(v_av, v_lead, gap, a_lead, m)`` from follower/leader pairs.

    A pair must persist for ``min_duration`` consecutive frames. Samples are
    taken every ``step_stride`` frames; the maneuver of a sample is the leader
    acceleration one stride later. ``x`` is taken as the front of the follower
    and the rear of the leader, so ``gap = x_leader - x_follower``.
    """
    if step_stride < 1 or min_duration < 1:
        raise InvalidInput("stride and duration must be >= 1")
    lookup = {}
    for i in range(len(tracks)):
        lookup[(int(tracks.id[i]), int(tracks.frame[i]))] = i
    order = np.lexsort((tracks.frame, tracks.id))
    out = []
    # group consecutive frames of the same (follower, leader) pair
    runs = []
    cur = None
    for i in order:
        vid, fr, lead = int(tracks.id[i]), int(tracks.frame[i]), int(tracks.preceding_id[i])
        if lead == 0 or (lead, fr) not in lookup:
            cur = None
            continue
        if cur is not None and cur[0] == vid and cur[1] == lead and cur[3] == fr - 1:
            cur[2].append(i)
            cur[3] = fr
        else:
            cur = [vid, lead, [i], fr]
            runs.append(cur)
    for vid, lead, idx, _ in runs:
        if len(idx) < min_duration:
            continue
        for j in range(0, len(idx) - step_stride, step_stride):
            f_i, f_next = idx[j], idx[j + step_stride]
            l_i = lookup[(lead, int(tracks.frame[f_i]))]
            l_next = lookup[(lead, int(tracks.frame[f_next]))]
            gap = tracks.x[l_i] - tracks.x[f_i]
            if gap <= 0:
                continue
            out.append((tracks.speed[f_i], tracks.speed[l_i], gap, tracks.accel[l_i], tracks.accel[l_next]))
    if not out:
        raise NoPairsFound("no car-following pair persisted long enough")
    return np.asarray(out, dtype=float)


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthConfig:
    """Generating law for synthetic car-following samples.

    ``(v_av, v_lead, gap)`` follows a Gaussian mixture; the leader acceleration
    is a stationary mean-reverting process ``a' = target + rho (a - target) +
    noise * eps`` whose current value is ``a_lead`` and whose next value is the
    maneuver ``m``.
    """

    weights: Tuple[float, ...] = (0.55, 0.38, 0.07)
    means: Tuple[Tuple[float, float, float], ...] = (
        (30.0, 30.0, 50.0),
        (20.0, 20.5, 28.0),
        (26.0, 18.0, 20.0),
    )
    # per component: (sd v_av, sd v_lead, sd gap, corr(v_av, v_lead), corr(v_av, gap))
    spreads: Tuple[Tuple[float, float, float, float, float], ...] = (
        (3.0, 3.0, 10.0, 0.9, 0.3),
        (3.0, 3.0, 5.0, 0.85, 0.3),
        (3.0, 3.0, 5.0, 0.5, 0.2),
    )
    accel_target: float = 0.0
    accel_rho: float = 0.7
    accel_noise: float = 0.5
    n_samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidInput("n_samples must be positive")
        if not (len(self.weights) == len(self.means) == len(self.spreads)):
            raise InvalidInput("weights, means and spreads must have equal length")
        if abs(sum(self.weights) - 1.0) > 1e-10 or min(self.weights) < 0:
            raise InvalidInput("weights must be a probability vector")
        if not 0 <= self.accel_rho < 1 or self.accel_noise < 0:
            raise InvalidInput("need 0 <= rho < 1 and noise >= 0")

    def generating_gmm(self):
        """Exact 5-D density of ``(v_av, v_lead, gap, a_lead, m)``; None without noise."""
        if self.accel_noise == 0:
            return None
        s2 = self.accel_noise ** 2 / (1.0 - self.accel_rho ** 2)
        acc = np.array([[s2, self.accel_rho * s2], [self.accel_rho * s2, s2]])
        means, covs = [], []
        for mu, sp in zip(self.means, self.spreads):
            sv, sl, sg, r_vl, r_vg = sp
            c3 = np.array([
                [sv * sv, r_vl * sv * sl, r_vg * sv * sg],
                [r_vl * sv * sl, sl * sl, r_vg * r_vl * sl * sg],
                [r_vg * sv * sg, r_vg * r_vl * sl * sg, sg * sg],
            ])
            cov = np.zeros((5, 5))
            cov[:3, :3] = c3
            cov[3:, 3:] = acc
            covs.append(cov)
            means.append(list(mu) + [self.accel_target, self.accel_target])
        return Gmm(np.asarray(self.weights, float), np.asarray(means), np.asarray(covs))


def synth_naturalistic(cfg: SynthConfig = SynthConfig(), rng=None):
    """Draw ``cfg.n_samples`` joint samples and return ``(samples, generating_gmm)``.

    Physically invalid draws (non-positive gap, negative speed) are redrawn;
    with the default parameters that affects about 2e-6 of the mass, so the
    generating mixture is the sampling density for all practical purposes.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    K = len(cfg.weights)
    s2 = cfg.accel_noise ** 2 / (1.0 - cfg.accel_rho ** 2)
    chunks, have = [], 0
    while have < cfg.n_samples:
        n = cfg.n_samples - have
        comp = rng.choice(K, size=n, p=np.asarray(cfg.weights, float))
        base = np.empty((n, 3))
        for k in range(K):
            sel = comp == k
            if not sel.any():
                continue
            sv, sl, sg, r_vl, r_vg = cfg.spreads[k]
            c3 = np.array([
                [sv * sv, r_vl * sv * sl, r_vg * sv * sg],
                [r_vl * sv * sl, sl * sl, r_vg * r_vl * sl * sg],
                [r_vg * sv * sg, r_vg * r_vl * sl * sg, sg * sg],
            ])
            L = np.linalg.cholesky(c3)
            base[sel] = np.asarray(cfg.means[k]) + rng.standard_normal((sel.sum(), 3)) @ L.T
        a = cfg.accel_target + np.sqrt(s2) * rng.standard_normal(n)
        m = cfg.accel_target + cfg.accel_rho * (a - cfg.accel_target) + cfg.accel_noise * rng.standard_normal(n)
        block = np.column_stack([base, a, m])
        ok = (block[:, 2] > 0) & (block[:, 0] >= 0) & (block[:, 1] >= 0)
        chunks.append(block[ok])
        have += int(ok.sum())
    return np.concatenate(chunks)[: cfg.n_samples], cfg.generating_gmm()


def write_samples_csv(path, samples):
    jsonio.write_csv(path, JOINT_FIELDS, (tuple(float(v) for v in row) for row in samples))


def read_samples_csv(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != JOINT_FIELDS:
            raise DataError(f"samples file must have header {','.join(JOINT_FIELDS)}")
        data = np.asarray([[float(v) for v in row] for row in reader], dtype=float)
    if data.size == 0:
        raise DataError("samples file has no rows")
    return data


def write_summary_json(path, samples):
    jsonio.dump(summarize(samples).to_dict(), path)
