"""Command-line front end.

Seed precedence: --seed beats the RWRELAB_SEED environment variable, which
beats the config file, which beats the built-in default.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import experiments
from .environment import (
    disorder_of,
    environment_to_csv,
    imbalance_of,
    sample_environment,
    validate_environment,
)
from .mgf import directed_log_mgf, directed_log_mgf_annealed, legendre_transform, mean_step_transform
from .rate import estimate_quenched_rate
from .tilting import build_tilt, simulate_tilted, tilt_identity_check
from .walk import simulate_annealed_batch, simulate_quenched_batch


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="json config file")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default="out", help="output directory")


def _resolve_cfg(args) -> dict:
    cfg = experiments.load_config(args.config)
    env_seed = os.environ.get("RWRELAB_SEED")
    if env_seed is not None:
        cfg["master_seed"] = int(env_seed)
    if args.seed is not None:
        cfg["master_seed"] = int(args.seed)
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = int(args.threads)
    return cfg


def _emit_kv(pairs) -> None:
    for k, v in pairs:
        if isinstance(v, float):
            v = repr(v)
        print(f"{k}={v}")


def _cmd_env(args) -> int:
    cfg = _resolve_cfg(args)
    law = experiments.law_from_config(cfg)
    r = args.radius
    window = (-np.full(law.d, r, dtype=np.int64), np.full(law.d, r, dtype=np.int64))
    env = sample_environment(law, window, cfg["master_seed"])
    report = validate_environment(env)
    _emit_kv(
        [
            ("sites", report["sites"]),
            ("ok", report["ok"]),
            ("clamp_count", report["clamp_count"]),
            ("disorder", disorder_of(env)),
            ("disorder_law", disorder_of(law)),
            ("imbalance", imbalance_of(law, np.ones(law.d, dtype=np.int64))),
        ]
    )
    if args.csv:
        environment_to_csv(env, args.csv)
        print(f"csv={args.csv}")
    return 0 if report["ok"] else 1


def _cmd_simulate(args) -> int:
    cfg = _resolve_cfg(args)
    law = experiments.law_from_config(cfg)
    seed = cfg["master_seed"]
    start = np.zeros(law.d, dtype=np.int64)
    if args.mode == "quenched":
        r = args.steps + 2
        env = sample_environment(
            law, (start - r, start + r), seed, boundary="mean-fill"
        )
        ends = simulate_quenched_batch(env, start, args.steps, args.replicas, seed)
    elif args.mode == "annealed":
        ends = simulate_annealed_batch(law, start, args.steps, args.replicas, seed)
    else:
        tilt = build_tilt(law.d, law.mean, np.full(law.d, args.z / law.d))
        sim = simulate_tilted(tilt, args.steps, args.replicas, seed)
        ends = sim["endpoints"]
        _emit_kv(
            [
                ("target_velocity", np.array2string(tilt.z, separator=",")),
                ("renewals_mean", float(sim["renewal_counts"].mean())),
                ("undecided", sim["undecided_total"]),
            ]
        )
    vel = ends.mean(axis=0) / args.steps
    _emit_kv(
        [
            ("mode", args.mode),
            ("steps", args.steps),
            ("replicas", args.replicas),
            ("velocity", np.array2string(vel, separator=",")),
        ]
    )
    return 0


def _cmd_rate(args) -> int:
    cfg = _resolve_cfg(args)
    law = experiments.law_from_config(cfg)
    est = estimate_quenched_rate(
        law, args.eta, args.u, args.n, args.replicas, cfg["master_seed"]
    )
    _emit_kv(
        [
            ("eta", args.eta),
            ("rate", est.extrapolated),
            ("ci", est.ci),
            ("truncated_fraction", est.truncated_fraction),
            ("unreachable", est.unreachable_count),
        ]
    )
    for i, u in enumerate(est.u_values):
        for k, n in enumerate(est.n_values):
            print(f"rate[u={u},N={n}]={est.mean[i, k]!r}")
    return 0


def _cmd_mgf(args) -> int:
    cfg = _resolve_cfg(args)
    law = experiments.law_from_config(cfg)
    s = np.ones(law.d, dtype=np.int64)
    theta = np.asarray(args.theta, dtype=np.float64)[: law.d - 1]
    ann = directed_log_mgf_annealed(law, s, theta, args.n, args.replicas, cfg["master_seed"])
    exact = mean_step_transform(law.d, law.mean, s, theta)
    env = sample_environment(
        law, (np.zeros(law.d, dtype=np.int64), np.full(law.d, args.n, dtype=np.int64)),
        cfg["master_seed"],
    )
    _emit_kv(
        [
            ("n", args.n),
            ("quenched", directed_log_mgf(env, s, theta, args.n)),
            ("annealed", ann.value),
            ("annealed_ci", ann.ci),
            ("iid_exact", exact),
        ]
    )
    return 0


def _cmd_legendre(args) -> int:
    cfg = _resolve_cfg(args)
    law = experiments.law_from_config(cfg)
    if law.d != 2:
        print("legendre grid demo is wired for d=2 (theta is 1-dimensional)", file=sys.stderr)
        return 2
    s = np.ones(law.d, dtype=np.int64)
    thetas = np.linspace(args.theta_lo, args.theta_hi, args.points).reshape(-1, 1)
    vals = np.array([mean_step_transform(law.d, law.mean, s, th) for th in thetas])
    xs = np.asarray(args.x, dtype=np.float64).reshape(-1, 1)
    conj = legendre_transform(thetas, vals, xs)
    for i in range(xs.shape[0]):
        print(
            f"conjugate[x={xs[i,0]!r}]={conj.star[i]!r} "
            f"argmax={conj.argmax[i,0]!r} edge={bool(conj.edge[i])}"
        )
    return 0


def _cmd_tilt(args) -> int:
    cfg = _resolve_cfg(args)
    law = experiments.law_from_config(cfg)
    z = np.asarray(args.z, dtype=np.float64)
    if z.size == 1 and law.d > 1:
        z = np.full(law.d, float(z) / law.d)
    tilt = build_tilt(law.d, law.mean, z)
    _emit_kv(
        [
            ("z", np.array2string(tilt.z, separator=",")),
            ("scale", tilt.scale),
            ("decay", tilt.decay),
            ("step_law", np.array2string(tilt.u, separator=",")),
            ("theta", np.array2string(tilt.theta, separator=",")),
        ]
    )
    if args.check_n:
        chk = tilt_identity_check(law, z, np.zeros(law.d), args.check_n, "annealed")
        _emit_kv([("transfer_gap", chk["max_path_gap"]), ("paths", chk["paths"])])
        return 0 if chk["max_path_gap"] <= 1e-10 else 1
    return 0


def _cmd_suite(args) -> int:
    cfg = _resolve_cfg(args)
    res = experiments.run_identity_suite(cfg, args.out)
    for c in res["checks"]:
        print(f"{'PASS' if c['ok'] else 'FAIL'} {c['check']} value={c['value']!r} bound={c['bound']!r}")
    print(f"status={res['summary']['status']} gate={res['gate']}")
    return 0 if res["summary"]["status"] == "green" else 1


def _cmd_experiment(args) -> int:
    cfg = _resolve_cfg(args)
    res = experiments.run_experiment(args.name, cfg, args.out, gate_override=args.gate_override)
    summary = res["summary"]
    print(json.dumps(experiments._canonical(summary), sort_keys=True))
    if "paths" in res:
        print(f"json={res['paths']['json']}")
        print(f"csv={res['paths']['csv']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rwrelab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("env", help="sample a window and validate it")
    _add_common(p)
    p.add_argument("--radius", type=int, default=8)
    p.add_argument("--csv", default=None, help="write kernels to this csv")
    p.set_defaults(fn=_cmd_env)

    p = sub.add_parser("simulate", help="batch walks, velocity summary")
    _add_common(p)
    p.add_argument("--mode", choices=["quenched", "annealed", "tilted"], default="quenched")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--replicas", type=int, default=200)
    p.add_argument("--z", type=float, default=0.3, help="tilted mode target speed")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("rate", help="quenched decay-rate estimate")
    _add_common(p)
    p.add_argument("--eta", type=float, default=0.4)
    p.add_argument("--u", type=float, action="append", default=None)
    p.add_argument("--n", type=int, action="append", default=None)
    p.add_argument("--replicas", type=int, default=24)
    p.set_defaults(fn=_cmd_rate)

    p = sub.add_parser("mgf", help="directed boundary transforms")
    _add_common(p)
    p.add_argument("--theta", type=float, nargs="*", default=[0.0])
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--replicas", type=int, default=64)
    p.set_defaults(fn=_cmd_mgf)

    p = sub.add_parser("legendre", help="conjugate of the mean boundary transform")
    _add_common(p)
    p.add_argument("--theta-lo", type=float, default=-3.0)
    p.add_argument("--theta-hi", type=float, default=3.0)
    p.add_argument("--points", type=int, default=1201)
    p.add_argument("--x", type=float, nargs="+", default=[0.0, 0.25, 0.5])
    p.set_defaults(fn=_cmd_legendre)

    p = sub.add_parser("tilt", help="velocity tilt and its transfer identity")
    _add_common(p)
    p.add_argument("--z", type=float, nargs="+", default=[0.5])
    p.add_argument("--check-n", type=int, default=0)
    p.set_defaults(fn=_cmd_tilt)

    p = sub.add_parser("suite", help="identity battery; writes the gate file")
    _add_common(p)
    p.set_defaults(fn=_cmd_suite)

    p = sub.add_parser("experiment", help="run a gated analysis experiment")
    _add_common(p)
    p.add_argument("name", choices=sorted(experiments.EXPERIMENTS))
    p.add_argument("--gate-override", action="store_true")
    p.set_defaults(fn=_cmd_experiment)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "u", 0) is None:
        args.u = [2.0, 8.0]
    if getattr(args, "n", 0) is None:
        args.n = [120, 240]
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
