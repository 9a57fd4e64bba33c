"""End-to-end orchestration: training-set construction, flow training and the
chunked crude / TrimFlow estimation runs.

Every chunk of rollouts owns an RNG stream derived from ``(seed, chunk_index)``
so results do not depend on how chunks are spread over worker processes.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import InvalidInput
from .estimator import EstimationReport, RateAccumulator, TracePoint
from .flow import Flow, TrainConfig, flow_log_pdf, make_flow, train_flow
from .gmm import Gmm, gmm_log_pdf, gmm_marginal, gmm_sample
from .risk import RiskConfig, scene_risk_weights
from .sampler import (FlowDensity, GmmDensity, NaturalisticSource, SamplerConfig, SamplerDiagnostics,
                      TrimFlowSource, sample_initial_states)
from .scenario import SCENE_DIM, SCENE_DIMS, DataSummary, Normalizer, denormalize
from .sim import IdmParams, SimConfig, rollout_batch

log = logging.getLogger(__name__)

BOX_STREAM = 2 ** 31 - 1  # chunk index reserved for box-mass estimation


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class FlowBuildConfig:
    n_train: int = 100_000
    min_weight: float = 1e-8
    n_layers: int = 8
    hidden: Tuple[int, ...] = (512, 512)
    train: TrainConfig = TrainConfig()


def training_set(gmm: Gmm, normalizer: Normalizer, rng, n, min_weight=1e-8):
    """Joint samples from the naturalistic mixture with their risk weights D(s).

    Samples whose weight falls below ``min_weight`` are dropped; they carry no
    measurable share of the weighted loss.
    """
    x = gmm_sample(gmm, rng, n)
    w = scene_risk_weights(denormalize(x, normalizer)[:, :SCENE_DIM])
    keep = w >= min_weight
    if not keep.any():
        raise InvalidInput("no training sample carries a risk weight above min_weight")
    return x[keep], w[keep]


def train_trimflow(gmm: Gmm, normalizer: Normalizer, cfg: FlowBuildConfig = FlowBuildConfig(), seed=0):
    """Train the joint (m, s) flow and the state flow on the same weighted draw.

    Returns ``(flow_ms, flow_s, trace_ms, trace_s)``.
    """
    ss = np.random.SeedSequence(seed)
    data_ss, init_ss, train_ss = ss.spawn(3)
    x, w = training_set(gmm, normalizer, np.random.default_rng(data_ss), cfg.n_train, cfg.min_weight)
    log.info("training on %d weighted samples (ESS %.0f)", x.shape[0], w.sum() ** 2 / (w ** 2).sum())
    init_seeds = init_ss.generate_state(2)
    train_seeds = train_ss.generate_state(2)
    dim = x.shape[1]
    flow_ms = make_flow(dim, cfg.n_layers, cfg.hidden, seed=int(init_seeds[0]), clamp=cfg.train.clamp)
    flow_s = make_flow(SCENE_DIM, cfg.n_layers, cfg.hidden, seed=int(init_seeds[1]), clamp=cfg.train.clamp)
    t = cfg.train
    flow_ms, trace_ms = train_flow(flow_ms, x, w, TrainConfig(t.epochs, t.batch_size, t.lr, int(train_seeds[0]),
                                                               t.clamp))
    flow_s, trace_s = train_flow(flow_s, x[:, :SCENE_DIM], w, TrainConfig(t.epochs, t.batch_size, t.lr,
                                                                           int(train_seeds[1]), t.clamp))
    return flow_ms, flow_s, trace_ms, trace_s


# ---------------------------------------------------------------- estimation

@dataclass
class Setup:
    gmm: Gmm
    normalizer: Normalizer
    summary: DataSummary
    sim: SimConfig = SimConfig()
    idm: IdmParams = IdmParams()
    sampler: Optional[SamplerConfig] = None
    risk: RiskConfig = RiskConfig()
    flow_ms: Optional[Flow] = None
    flow_s: Optional[Flow] = None

    def __post_init__(self):
        if self.sampler is None:
            self.sampler = SamplerConfig(self.summary.m_min, self.summary.m_max)


@dataclass(frozen=True)
class EstimateConfig:
    mode: str = "crude"  # "crude" | "trimflow"
    n: Optional[int] = 10_000
    omega_target: Optional[float] = None
    checkpoint_interval: int = 1000
    beta: float = 0.05
    seed: int = 0
    workers: int = 1
    box_samples: int = 200_000

    def __post_init__(self):
        if self.mode not in ("crude", "trimflow"):
            raise InvalidInput(f"unknown mode {self.mode!r}")
        if self.n is None and self.omega_target is None:
            raise InvalidInput("need a scenario budget n or an omega target")
        if self.n is not None and self.n < 1:
            raise InvalidInput("n must be >= 1")
        if self.checkpoint_interval < 1 or self.workers < 1:
            raise InvalidInput("checkpoint_interval and workers must be >= 1")


@dataclass
class ChunkResult:
    acc: RateAccumulator
    diag: SamplerDiagnostics
    risky: int
    n: int


@dataclass
class RunResult:
    report: EstimationReport
    trace: List[TracePoint]
    diagnostics: SamplerDiagnostics
    risky_fraction: float
    risky_ttc_threshold: float = 10.0
    box_log_mass: Tuple[float, float] = (0.0, 0.0)

    def to_dict(self, timing=False):
        d = {"report": self.report.to_dict(timing), "risky_fraction": self.risky_fraction,
             "risky_ttc_threshold": self.risky_ttc_threshold}
        if self.report.mode == "trimflow":
            d["sampler"] = self.diagnostics.to_dict()
            d["initial_box_log_mass"] = {"naturalistic": self.box_log_mass[0], "trimflow": self.box_log_mass[1]}
        return d


def chunk_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def box_log_mass(density, normalizer: Normalizer, summary: DataSummary, rng, n):
    """log of the fraction of ``density`` draws whose scene lies in the data box."""
    z = density.sample(rng, n)
    frac = summary.in_box(denormalize(z, normalizer.subset(SCENE_DIMS))).mean()
    if frac <= 0:
        raise InvalidInput("no draw landed inside the data box")
    return float(np.log(frac))


def _run_chunk(setup: Setup, mode, index, size, seed, box_masses):
    rng = chunk_rng(seed, index)
    acc = RateAccumulator()
    diag = SamplerDiagnostics()
    if mode == "crude":
        s1, _, _ = sample_initial_states(GmmDensity(gmm_marginal(setup.gmm, SCENE_DIMS)), rng, size,
                                         setup.normalizer, setup.summary)
        src = NaturalisticSource(setup.gmm, setup.sampler, rng, setup.normalizer)
        r = rollout_batch(s1, src, setup.sim, setup.idm)
        acc.add(r.collided)
    else:
        s1, s1n, _ = sample_initial_states(FlowDensity(setup.flow_s), rng, size, setup.normalizer, setup.summary)
        lp0 = gmm_log_pdf(gmm_marginal(setup.gmm, SCENE_DIMS), s1n)
        lq0 = flow_log_pdf(setup.flow_s, s1n)
        src = TrimFlowSource(setup.flow_ms, setup.flow_s, setup.gmm, setup.sampler, rng, setup.normalizer)
        r = rollout_batch(s1, src, setup.sim, setup.idm)
        lr = (lp0 - box_masses[0]) - (lq0 - box_masses[1]) + r.step_log_ratio
        acc.add(r.collided, lr)
        diag = src.diag
    risky = int(np.sum(r.min_ttc < setup.risk.risky_ttc_threshold))
    return ChunkResult(acc, diag, risky, size)


def _chunk_job(args):
    return _run_chunk(*args)


def run_estimate(setup: Setup, cfg: EstimateConfig):
    """Roll out chunks of ``checkpoint_interval`` scenarios until the budget is met.

    With ``omega_target`` set the run stops at the first checkpoint whose
    relative half-width falls below it (capped by ``n`` when both are given).
    """
    t0 = time.perf_counter()
    if cfg.mode == "trimflow" and (setup.flow_ms is None or setup.flow_s is None):
        raise InvalidInput("trimflow mode needs both trained flows")
    box = (0.0, 0.0)
    if cfg.mode == "trimflow":
        brng = chunk_rng(cfg.seed, BOX_STREAM)
        box = (box_log_mass(GmmDensity(gmm_marginal(setup.gmm, SCENE_DIMS)), setup.normalizer, setup.summary,
                            brng, cfg.box_samples),
               box_log_mass(FlowDensity(setup.flow_s), setup.normalizer, setup.summary, brng, cfg.box_samples))
    size = cfg.checkpoint_interval
    n_chunks = math.ceil(cfg.n / size) if cfg.n is not None else None
    sizes = lambda i: size if n_chunks is None or i < n_chunks - 1 else cfg.n - size * (n_chunks - 1)

    acc = RateAccumulator()
    diag = SamplerDiagnostics()
    risky = 0
    trace = []
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        i = 0
        done = False
        while not done and (n_chunks is None or i < n_chunks):
            wave = range(i, i + cfg.workers if n_chunks is None else min(i + cfg.workers, n_chunks))
            jobs = [(setup, cfg.mode, j, sizes(j), cfg.seed, box) for j in wave]
            results = list(pool.map(_chunk_job, jobs)) if pool else [_chunk_job(j) for j in jobs]
            for res in results:
                acc = acc.merge(res.acc)
                diag = diag.merge(res.diag)
                risky += res.risky
                rep = acc.report(cfg.beta)
                trace.append(TracePoint(rep.n, rep.estimate, rep.omega))
                log.debug("n=%d estimate=%.4g omega=%.3g", rep.n, rep.estimate, rep.omega)
                if cfg.omega_target is not None and rep.omega < cfg.omega_target:
                    done = True
                    break
            i += len(wave)
    finally:
        if pool:
            pool.shutdown()
    report = acc.report(cfg.beta, mode=cfg.mode, omega_target=cfg.omega_target,
                        wall_clock=time.perf_counter() - t0)
    return RunResult(report, trace, diag, risky / report.n, setup.risk.risky_ttc_threshold, box)
