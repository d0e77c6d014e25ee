"""Reproducible experiment drivers with deterministic outputs.

Every experiment is a pure function of its configuration: work items carry
keyed seeds, workers only parallelize independent items, and results are
gathered in item order.  Output bytes therefore do not depend on the thread
count, which is excluded from both the emitted metadata and the config hash.

The identity suite doubles as a gate: analysis experiments refuse to run
(UngatedRun) until a green gate file from the same configuration exists,
unless explicitly overridden.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import pathlib
import subprocess
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import rng
from .environment import make_iid_law, make_mixing_law, sample_environment
from .errors import EmptyRun, UngatedRun
from .mgf import zero_velocity_rate
from .rate import estimate_quenched_rate
from .tilting import (
    build_tilt,
    coupling_marginal_gap,
    exit_probability,
    exit_probability_mc,
    rate_transfer_check,
    renewal_ratio_samples,
    simulate_tilted,
    tilt_identity_check,
)

GATE_FILE = "suite_gate.json"

_VOLATILE_KEYS = ("threads", "out_dir")


def default_config() -> dict:
    return {
        "d": 1,
        "kappa": 0.2,
        "mean_kernel": [0.5, 0.5],
        "family": "two-point",
        "delta": 0.2,
        "mixing": None,
        "master_seed": 20260822,
        "threads": 1,
        "rate_gap": {
            "deltas": [0.0, 0.15, 0.3],
            "etas": [-0.4, 0.0, 0.4],
            "u_values": [2.0, 8.0],
            "n_values": [120, 240],
            "replicas": 24,
        },
        "zero_set": {
            "etas": [-1.0, -0.8, -0.4, 0.0, 0.4, 0.8, 1.0],
            "u": 8.0,
            "n": 400,
            "replicas": 12,
            "thresholds": [0.01, 0.015, 0.02, 0.025, 0.03],
        },
        "identity_suite": {
            "z": 0.5,
            "theta": 0.1,
            "enum_steps": 4,
            "renewal_L": 1,
            "renewal_count": 2,
            "renewal_replicas": 400,
            "ruin_m": 0.5,
            "ruin_k": 3,
            "ruin_replicas": 40000,
            "tilted_steps": 200,
            "tilted_replicas": 300,
            "transfer_xs": [0.1, 0.2, 0.3, 0.4],
        },
    }


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            loaded = json.load(fh)
        _deep_update(cfg, loaded)
    if overrides:
        _deep_update(cfg, overrides)
    return cfg


def _deep_update(base: dict, other: dict) -> None:
    for k, v in other.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_canonical(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def config_hash(cfg: dict) -> str:
    core = {k: v for k, v in cfg.items() if k not in _VOLATILE_KEYS}
    blob = json.dumps(_canonical(core), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=pathlib.Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def law_from_config(cfg: dict, delta: float | None = None):
    delta = cfg["delta"] if delta is None else delta
    common = dict(
        d=cfg["d"],
        kappa=cfg["kappa"],
        mean_kernel=cfg["mean_kernel"],
        family=cfg["family"],
        delta=delta,
    )
    if cfg.get("mixing"):
        mx = cfg["mixing"]
        return make_mixing_law(
            **common, L0=mx["L0"], g=mx.get("g", 1.0), C=mx.get("C", 1.0)
        )
    return make_iid_law(**common)


def ordered_map(fn, items, threads: int):
    """Map preserving item order; thread count changes speed, never results."""
    items = list(items)
    if not items:
        return []
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def emit(out_dir, name: str, cfg: dict, rows: list[dict], summary: dict) -> dict:
    """Write name.csv and name.json with canonical bytes.

    Floats are emitted with repr (shortest round-trip), keys sorted, newline
    fixed; metadata excludes anything execution-dependent (thread count,
    wall-clock), so reruns of one configuration are byte-identical.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "experiment": name,
        "config_hash": config_hash(cfg),
        "master_seed": int(cfg["master_seed"]),
        "code_version": _code_version(),
    }
    doc = {"meta": meta, "summary": _canonical(summary), "rows": _canonical(rows)}
    jpath = out_dir / f"{name}.json"
    with open(jpath, "w", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    cpath = out_dir / f"{name}.csv"
    with open(cpath, "w", newline="\n") as fh:
        if rows:
            cols = sorted(rows[0])
            fh.write(",".join(cols) + "\n")
            for row in rows:
                fh.write(",".join(_cell(row[c]) for c in cols) + "\n")
    return {"json": str(jpath), "csv": str(cpath), "meta": meta}


def _cell(v) -> str:
    v = _canonical(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True, separators=(";", ":")).replace(",", ";")
    return str(v)


# -- the identity suite (gate) --------------------------------------------------


def run_identity_suite(cfg: dict, out_dir) -> dict:
    """Run the full identity battery and write the gate file.

    Includes a sensitivity control: the path-transfer identity rerun with a
    deliberately corrupted tilt must be caught (a gate that cannot fail
    gates nothing).
    """
    p = cfg["identity_suite"]
    seed = int(cfg["master_seed"])
    law = law_from_config(cfg)
    d = law.d
    s = np.ones(d, dtype=np.int64)
    checks: list[dict] = []

    def add(name, value, bound, ok=None):
        ok = bool(value <= bound) if ok is None else bool(ok)
        checks.append({"check": name, "value": float(value), "bound": float(bound), "ok": ok})

    # coupling marginalization on realized kernels, both tag alphabets
    env = sample_environment(law, (-np.ones(d, dtype=np.int64) * 6, np.ones(d, dtype=np.int64) * 6), rng.subseed(seed, rng.TAG_ENV, 1))
    flat = env.kernels.reshape(-1, 2 * d)
    gap_full = max(coupling_marginal_gap(k, law.kappa, "full") for k in flat)
    gap_dir = max(coupling_marginal_gap(k, law.kappa, "directed", s) for k in flat)
    add("coupling_marginal_full", gap_full, 1e-14)
    add("coupling_marginal_directed", gap_dir, 1e-14)

    # tilt algebra at the configured velocity
    z = np.full(d, p["z"] / d) if np.isscalar(p["z"]) else np.asarray(p["z"])
    tilt = build_tilt(d, law.mean, z)
    mass = abs(tilt.u.sum() - 1.0)
    prod_gap = float(
        np.abs(tilt.u[0::2] * tilt.u[1::2] - tilt.scale * law.mean[0::2] * law.mean[1::2]).max()
    )
    diff_gap = float(np.abs((tilt.u[0::2] - tilt.u[1::2]) - z).max())
    rep_gap = float(
        np.abs(tilt.u - tilt.decay * law.mean * np.exp(
            np.repeat(tilt.theta, 2) * np.tile([1.0, -1.0], d)
        )).max()
    )
    add("tilt_mass", mass, 1e-12)
    add("tilt_product_identity", prod_gap, 1e-14)
    add("tilt_difference_identity", diff_gap, 1e-14)
    add("tilt_exponential_form", rep_gap, 1e-14)

    # path transfer identity, annealed and quenched, plus the corrupted control
    theta = np.full(d, p["theta"])
    chk_a = tilt_identity_check(law, z, theta, p["enum_steps"], "annealed")
    add("transfer_annealed", chk_a["max_path_gap"], 1e-10)
    env_q = sample_environment(
        law,
        (-np.ones(d, dtype=np.int64) * p["enum_steps"], np.ones(d, dtype=np.int64) * p["enum_steps"]),
        rng.subseed(seed, rng.TAG_ENV, 2),
    )
    chk_q = tilt_identity_check(law, z, theta, p["enum_steps"], "quenched", env=env_q)
    add("transfer_quenched", chk_q["max_path_gap"], 1e-10)
    chk_bad = tilt_identity_check(
        law, z, theta, p["enum_steps"], "annealed", corrupt_tilt=1e-3
    )
    add("transfer_corruption_detected", chk_bad["max_path_gap"], 1e-6, ok=chk_bad["max_path_gap"] > 1e-6)

    # renewal-ratio mean one, and exact unity at zero disorder
    rr = renewal_ratio_samples(
        law, s, np.zeros(d - 1), p["renewal_L"], p["renewal_count"],
        p["renewal_replicas"], rng.subseed(seed, rng.TAG_MISC, 3),
    )
    zmax = float(np.nanmax(np.abs(rr.mean - 1.0) / np.where(rr.stderr > 0, rr.stderr, np.inf)))
    add("renewal_ratio_mean_one_zscore", zmax, 4.0)
    law0 = law_from_config(cfg, delta=0.0)
    rr0 = renewal_ratio_samples(
        law0, s, np.zeros(d - 1), p["renewal_L"], p["renewal_count"],
        max(40, p["renewal_replicas"] // 10), rng.subseed(seed, rng.TAG_MISC, 4),
    )
    dev0 = float(np.nanmax(np.abs(rr0.ratios - 1.0))) if np.isfinite(rr0.ratios).any() else math.inf
    add("renewal_ratio_unit_at_zero_disorder", dev0, 0.0)

    # closed-form exit probability vs its own chain
    est, se = exit_probability_mc(
        p["ruin_m"], p["ruin_k"], p["ruin_replicas"], rng.subseed(seed, rng.TAG_MISC, 5)
    )
    truth = exit_probability(p["ruin_m"], p["ruin_k"])
    add("exit_probability_zscore", abs(est - truth) / se, 4.0)

    # tilted walk hits its velocity
    sim = simulate_tilted(
        tilt, p["tilted_steps"], p["tilted_replicas"], rng.subseed(seed, rng.TAG_MISC, 6)
    )
    vz = float(
        np.max(np.abs(sim["velocity"] - tilt.z) / np.maximum(sim["velocity_stderr"], 1e-300))
    )
    add("tilted_velocity_zscore", vz, 4.0)

    # zero-disorder rate transfer on closed-form grids (d = 1 only)
    if d == 1:
        tr = rate_transfer_check(1, law.mean, z, p["transfer_xs"])
        add("rate_transfer_grid_gap", tr["max_gap"], 1e-4)

    ok = all(c["ok"] for c in checks)
    summary = {
        "status": "green" if ok else "red",
        "checks": len(checks),
        "failed": [c["check"] for c in checks if not c["ok"]],
        "renewal_rejected": int(rr.rejected),
        "tilted_undecided": int(sim["undecided_total"]),
    }
    paths = emit(out_dir, "identity-suite", cfg, checks, summary)
    gate = {
        "status": summary["status"],
        "config_hash": config_hash(cfg),
        "checks": len(checks),
        "failed": summary["failed"],
    }
    gpath = pathlib.Path(out_dir) / GATE_FILE
    with open(gpath, "w", newline="\n") as fh:
        json.dump(_canonical(gate), fh, sort_keys=True, indent=1)
        fh.write("\n")
    return {"summary": summary, "checks": checks, "paths": paths, "gate": str(gpath)}


def _require_gate(cfg: dict, out_dir, gate_override: bool) -> None:
    if gate_override:
        return
    gpath = pathlib.Path(out_dir) / GATE_FILE
    if not gpath.exists():
        raise UngatedRun(
            f"no {GATE_FILE} in {out_dir}; run the identity suite first or override"
        )
    with open(gpath) as fh:
        gate = json.load(fh)
    if gate.get("status") != "green":
        raise UngatedRun(f"gate is {gate.get('status')!r}, not green")
    if gate.get("config_hash") != config_hash(cfg):
        raise UngatedRun("gate was produced by a different configuration")


# -- analysis experiments --------------------------------------------------------


def run_rate_gap(cfg: dict, out_dir, gate_override: bool = False) -> dict:
    """Quenched-rate change across a disorder ladder, against the zero-
    disorder baseline computed from the same work items."""
    _require_gate(cfg, out_dir, gate_override)
    p = cfg["rate_gap"]
    deltas = list(p["deltas"])
    etas = list(p["etas"])
    if not deltas or not etas:
        raise EmptyRun("rate_gap needs at least one delta and one eta")
    all_deltas = sorted(set(float(x) for x in deltas) | {0.0})
    items = [(dl, eta) for dl in all_deltas for eta in etas]
    seed = int(cfg["master_seed"])

    def work(item):
        dl, eta = item
        idx = items.index(item)
        law = law_from_config(cfg, delta=dl)
        est = estimate_quenched_rate(
            law, eta, p["u_values"], p["n_values"], p["replicas"],
            rng.subseed(seed, rng.TAG_MISC, 100 + idx),
        )
        return {"delta": dl, "eta": eta, "rate": est.extrapolated, "ci": est.ci,
                "truncated": est.truncated_fraction}

    results = ordered_map(work, items, int(cfg.get("threads", 1)))
    base = {r["eta"]: r["rate"] for r in results if r["delta"] == 0.0}
    rows = []
    for r in results:
        if float(r["delta"]) not in [float(x) for x in deltas]:
            continue
        rows.append({**r, "gap": r["rate"] - base[r["eta"]]})
    sup_gap = {
        dl: max(abs(r["gap"]) for r in rows if r["delta"] == dl) for dl in deltas
    }
    summary = {"sup_gap": sup_gap, "baseline": base, "gate_override": bool(gate_override)}
    paths = emit(out_dir, "rate-gap", cfg, rows, summary)
    return {"rows": rows, "summary": summary, "paths": paths}


def run_zero_set(cfg: dict, out_dir, gate_override: bool = False) -> dict:
    """Estimate the flat set of the quenched rate on a velocity grid and
    classify it, checking that the classification is threshold-stable."""
    _require_gate(cfg, out_dir, gate_override)
    p = cfg["zero_set"]
    etas = list(p["etas"])
    if not etas:
        raise EmptyRun("zero_set needs a velocity grid")
    seed = int(cfg["master_seed"])
    law = law_from_config(cfg)

    def work(item):
        idx, eta = item
        est = estimate_quenched_rate(
            law, eta, [p["u"]], [p["n"]], p["replicas"],
            rng.subseed(seed, rng.TAG_MISC, 200 + idx),
        )
        return {"eta": eta, "rate": est.extrapolated, "ci": est.ci}

    results = ordered_map(work, list(enumerate(etas)), int(cfg.get("threads", 1)))
    thresholds = [float(t) for t in p["thresholds"]]
    sets = {
        t: [r["eta"] for r in results if r["rate"] <= t] for t in thresholds
    }
    stable = len({tuple(v) for v in sets.values()}) == 1
    rows = [
        {**r, "in_flat_set": r["rate"] <= thresholds[0]} for r in results
    ]
    # cross-check: the flat-direction bound from the kernel hull
    hull = zero_velocity_rate(np.stack(law.kernel_vertices()))
    summary = {
        "flat_set": sets[thresholds[0]],
        "threshold_stable": bool(stable),
        "thresholds": thresholds,
        "hull_rate_bound": hull["rate"],
        "gate_override": bool(gate_override),
    }
    paths = emit(out_dir, "zero-set", cfg, rows, summary)
    return {"rows": rows, "summary": summary, "paths": paths}


EXPERIMENTS = {
    "identity-suite": run_identity_suite,
    "rate-gap": run_rate_gap,
    "zero-set": run_zero_set,
}


def run_experiment(name: str, cfg: dict, out_dir, gate_override: bool = False) -> dict:
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; have {sorted(EXPERIMENTS)}")
    if name == "identity-suite":
        return run_identity_suite(cfg, out_dir)
    return EXPERIMENTS[name](cfg, out_dir, gate_override=gate_override)
