"""Command-line front end: ``rareflow {ingest,fit,train,estimate,plan,compare}``.

Configuration is a JSON file (``--config``) merged over built-in defaults, with
dotted ``--set key=value`` overrides applied last. ``RAREFLOW_SEED`` in the
environment overrides the configured seed. Exit codes: 0 success, 2 invalid
configuration, 3 data error, 4 numerical failure.
"""

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from . import jsonio
from .data_io import (SynthConfig, extract_car_following, load_tracks_csv, read_samples_csv, synth_naturalistic,
                      write_samples_csv, write_summary_json)
from .errors import DataError, InvalidInput, RareFlowError
from .estimator import EstimationReport, PlannerInput, compare_reports, required_n, z_value
from .flow import TrainConfig, load_flow, save_flow
from .gmm import Gmm, GmmConfig, fit_gmm, gmm_log_pdf
from .pipeline import EstimateConfig, FlowBuildConfig, Setup, run_estimate, train_trimflow
from .risk import RiskConfig
from .sampler import SamplerConfig
from .scenario import SCENE_DIMS, DataSummary, Normalizer, fit_normalizer, normalize
from .sim import IdmParams, SimConfig

log = logging.getLogger("rareflow")

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "paths": {
        "tracks": None,
        "samples": "run/samples.csv",
        "summary": "run/summary.json",
        "gmm": "run/gmm.json",
        "flow_ms": "run/flow_ms.json",
        "flow_s": "run/flow_s.json",
        "reports": "run/reports",
    },
    "data": {
        "columns": {},
        "min_duration": 25,
        "frame_rate": 25.0,
        "step_stride": 25,
        "synth": {"n_samples": 100000},
    },
    "gmm": {"K": 10, "max_iter": 500, "tol": 1e-6, "restarts": 3, "reg": 1e-6},
    "flow": {"n_train": 100000, "min_weight": 1e-8, "n_layers": 8, "hidden": [512, 512],
             "epochs": 60, "batch_size": 256, "lr": 1e-3, "clamp": 5.0},
    "sim": {"dt": 1.0, "T": 10, "stop_on_collision": True},
    "idm": {"v0": 33.3, "T_hw": 1.5, "a_max": 1.5, "b_comf": 1.67, "s0": 2.0, "delta": 4.0, "b_m": 4.5},
    "sampler": {"envelope_grid": 64, "envelope_margin": 1.2, "max_rejections": 10000},
    "estimator": {"n": 10000, "omega_target": None, "checkpoint_interval": 1000, "beta": 0.05,
                  "box_samples": 200000},
    "risk": {"ttc_cap": 100.0, "risky_ttc_threshold": 10.0},
}


# ---------------------------------------------------------------- config handling

def _merge(base, over, where=""):
    for k, v in over.items():
        if k not in base:
            raise InvalidInput(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and k != "columns":
            if not isinstance(v, dict):
                raise InvalidInput(f"config key {where + k!r} must be an object")
            _merge(base[k], v, where + k + ".")
        else:
            base[k] = v
    return base


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, item):
    if "=" not in item:
        raise InvalidInput(f"--set expects key=value, got {item!r}")
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise InvalidInput(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node and not (len(parts) > 1 and parts[-2] in ("columns", "synth")):
        raise InvalidInput(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(text)


def load_config(path=None, overrides=(), env=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        try:
            user = jsonio.load(path)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise InvalidInput("config must be a JSON object")
        _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    env = os.environ if env is None else env
    if env.get("RAREFLOW_SEED") not in (None, ""):
        try:
            cfg["seed"] = int(env["RAREFLOW_SEED"])
        except ValueError as exc:
            raise InvalidInput("RAREFLOW_SEED must be an integer") from exc
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise InvalidInput("seed must be a non-negative integer")
    return cfg


def _build(cls, section, name):
    try:
        return cls(**section)
    except TypeError as exc:
        raise InvalidInput(f"bad {name} config: {exc}") from exc


def _ensure_parent(path):
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)


def _emit(obj):
    sys.stdout.write(jsonio.dumps(obj))


# ---------------------------------------------------------------- commands

def cmd_ingest(cfg):
    paths, data = cfg["paths"], cfg["data"]
    if paths["tracks"]:
        tracks = load_tracks_csv(paths["tracks"], data["columns"])
        samples = extract_car_following(tracks, data["min_duration"], data["frame_rate"], data["step_stride"])
        source = {"tracks": paths["tracks"], "malformed_rows": tracks.malformed}
    else:
        synth = dict(data["synth"])
        synth.setdefault("seed", cfg["seed"])
        for k in ("weights", "means", "spreads"):
            if k in synth:
                synth[k] = tuple(tuple(r) if isinstance(r, list) else r for r in synth[k])
        sc = _build(SynthConfig, synth, "data.synth")
        samples, _ = synth_naturalistic(sc)
        source = {"synthetic": True, "seed": sc.seed}
    for p in (paths["samples"], paths["summary"]):
        _ensure_parent(p)
    write_samples_csv(paths["samples"], samples)
    write_summary_json(paths["summary"], samples)
    out = {"samples": paths["samples"], "summary": paths["summary"], "count": int(samples.shape[0])}
    out.update(source)
    return out


def cmd_fit(cfg):
    paths = cfg["paths"]
    x = read_samples_csv(paths["samples"])
    g_cfg = dict(cfg["gmm"])
    K = g_cfg.pop("K")
    if not isinstance(K, int) or K < 1:
        raise InvalidInput("gmm.K must be a positive integer")
    nz = fit_normalizer(x)
    z = normalize(x, nz)
    g = fit_gmm(z, K, _build(GmmConfig, dict(g_cfg, seed=cfg["seed"]), "gmm"))
    mean_ll = float(np.mean(gmm_log_pdf(g, z)))
    doc = g.to_dict()
    doc.update({
        "normalizer": nz.to_dict(),
        "scene_marginal_dims": list(SCENE_DIMS),
        "mean_log_likelihood_normalized": mean_ll,
        "mean_log_likelihood": mean_ll + nz.log_jacobian(),
        "em_iterations": len(g.history),
    })
    _ensure_parent(paths["gmm"])
    jsonio.dump(doc, paths["gmm"])
    return {"gmm": paths["gmm"], "K": K, "mean_log_likelihood": doc["mean_log_likelihood"],
            "em_iterations": doc["em_iterations"]}


def _load_gmm(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    d = jsonio.load(path)
    if "normalizer" not in d:
        raise DataError(f"{path} lacks the normalizer written by the fit command")
    return Gmm.from_dict(d), Normalizer.from_dict(d["normalizer"])


def cmd_train(cfg):
    paths, f = cfg["paths"], dict(cfg["flow"])
    g, nz = _load_gmm(paths["gmm"])
    train = _build(TrainConfig, {k: f.pop(k) for k in ("epochs", "batch_size", "lr", "clamp")}, "flow")
    build = _build(FlowBuildConfig, dict(f, hidden=tuple(f["hidden"]), train=train), "flow")
    flow_ms, flow_s, trace_ms, trace_s = train_trimflow(g, nz, build, seed=cfg["seed"])
    out = {}
    for key, flow, trace in (("flow_ms", flow_ms, trace_ms), ("flow_s", flow_s, trace_s)):
        path = paths[key]
        _ensure_parent(path)
        save_flow(flow, path)
        loss_path = os.path.splitext(path)[0] + "_loss.csv"
        jsonio.write_csv(loss_path, ("epoch", "loss"), ((i, float(v)) for i, v in enumerate(trace)))
        out[key] = {"model": path, "loss_trace": loss_path, "final_loss": float(trace[-1]) if trace else None}
    return out


def _setup(cfg, with_flows):
    paths = cfg["paths"]
    g, nz = _load_gmm(paths["gmm"])
    if not os.path.exists(paths["summary"]):
        raise FileNotFoundError(paths["summary"])
    summ = DataSummary.from_dict(jsonio.load(paths["summary"]))
    sampler = _build(SamplerConfig, dict(cfg["sampler"], m_min=summ.m_min, m_max=summ.m_max), "sampler")
    flows = {}
    if with_flows:
        for key in ("flow_ms", "flow_s"):
            if not os.path.exists(paths[key]):
                raise FileNotFoundError(paths[key])
            flows[key] = load_flow(paths[key])
    idm = dict(cfg["idm"])
    if idm.get("b_m") in ("inf", "Infinity", None):
        idm["b_m"] = float("inf")
    return Setup(g, nz, summ,
                 sim=_build(SimConfig, cfg["sim"], "sim"),
                 idm=_build(IdmParams, idm, "idm"),
                 sampler=sampler,
                 risk=_build(RiskConfig, cfg["risk"], "risk"),
                 **flows)


def cmd_estimate(cfg, mode):
    e = cfg["estimator"]
    ecfg = _build(EstimateConfig, dict(e, mode=mode, seed=cfg["seed"], workers=cfg["workers"]), "estimator")
    res = run_estimate(_setup(cfg, mode == "trimflow"), ecfg)
    rdir = cfg["paths"]["reports"]
    os.makedirs(rdir, exist_ok=True)
    report_path = os.path.join(rdir, f"{mode}_report.json")
    trace_path = os.path.join(rdir, f"{mode}_trace.csv")
    jsonio.dump(res.to_dict(timing=False), report_path)
    jsonio.write_csv(trace_path, ("n", "estimate", "omega"),
                     ((p.n, float(p.estimate), float(p.omega)) for p in res.trace))
    if mode == "trimflow" and not res.diagnostics.valid:
        log.warning("envelope violation rate %.2e exceeds the validity threshold", res.diagnostics.violation_rate)
    out = res.to_dict(timing=False)
    out.update({"report_path": report_path, "trace_path": trace_path, "wall_clock": res.report.wall_clock})
    return out


def cmd_plan(P, b, beta):
    p = PlannerInput(P, b, beta)
    return {"P": p.P, "b": p.b, "beta": p.beta, "z": z_value(p.beta), "required_n": required_n(p)}


def _load_report(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    d = jsonio.load(path)
    d = d.get("report", d)
    try:
        return EstimationReport.from_dict(d)
    except TypeError as exc:
        raise DataError(f"{path} is not an estimation report") from exc


def cmd_compare(crude_path, trim_path):
    return compare_reports(_load_report(crude_path), _load_report(trim_path))


# ---------------------------------------------------------------- entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="rareflow", description="Rare-event rate estimation for car-following "
                                                             "scenarios with flow-based importance sampling.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted key, JSON value)")
        return p

    with_config(sub.add_parser("ingest", help="load tracks or synthesize samples"))
    with_config(sub.add_parser("fit", help="fit the naturalistic mixture"))
    with_config(sub.add_parser("train", help="train the two proposal flows"))
    p = with_config(sub.add_parser("estimate", help="estimate the collision rate"))
    p.add_argument("--mode", choices=("crude", "trimflow"), default="crude")
    p.add_argument("--n", type=int, help="scenario budget")
    p.add_argument("--omega-target", type=float, help="stop at the first checkpoint with omega below this")
    p = sub.add_parser("plan", help="crude-MC sample size for a target relative half-width")
    p.add_argument("--P", type=float, required=True)
    p.add_argument("--b", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=0.05)
    p = sub.add_parser("compare", help="compare a crude and a TrimFlow report")
    p.add_argument("crude")
    p.add_argument("trimflow")
    p.add_argument("--out", help="write the comparison JSON here as well")
    return ap


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "plan":
        return cmd_plan(args.P, args.b, args.beta)
    if args.command == "compare":
        out = cmd_compare(args.crude, args.trimflow)
        if args.out:
            _ensure_parent(args.out)
            jsonio.dump(out, args.out)
        return out
    cfg = load_config(args.config, args.overrides)
    if args.command == "ingest":
        return cmd_ingest(cfg)
    if args.command == "fit":
        return cmd_fit(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.n is not None or args.omega_target is not None:
        cfg["estimator"]["n"] = args.n
        cfg["estimator"]["omega_target"] = args.omega_target
    return cmd_estimate(cfg, args.mode)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    verbose = sum(a.count("v") for a in argv if a.startswith("-") and set(a[1:]) == {"v"})
    logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run(argv)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return DataError.exit_code
    except RareFlowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    _emit(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
