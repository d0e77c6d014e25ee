"""Exact and Monte Carlo expectations over finite path segments.

Under an iid law the annealed weight of a path factorizes over the distinct
sites it visits, with one exact per-site moment per visit pattern; revisits
are what separate annealed from mean-field behavior.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import rng
from .environment import EnvLaw, Environment, direction_vectors
from .errors import DegenerateDenominator, UnsupportedLaw
from .walk import Trajectory


def path_from_steps(d: int, step_indices, start=None) -> Trajectory:
    if start is None:
        start = np.zeros(d, dtype=np.int64)
    return Trajectory(
        start=np.asarray(start, dtype=np.int64),
        steps=np.asarray(step_indices, dtype=np.int8),
        d=d,
    )


def hitting_counts(traj: Trajectory) -> dict[tuple, np.ndarray]:
    """Per visited site, how often each direction was taken from it."""
    counts: dict[tuple, np.ndarray] = {}
    pos = traj.positions()
    for j, sidx in enumerate(traj.steps):
        key = tuple(int(v) for v in pos[j])
        if key not in counts:
            counts[key] = np.zeros(2 * traj.d, dtype=np.int64)
        counts[key][int(sidx)] += 1
    return counts


def _require_enumerable(law: EnvLaw) -> None:
    if not law.is_enumerable:
        raise UnsupportedLaw("exact path weights need an iid law; use the MC route")


def path_weight_exact(
    law: EnvLaw, traj: Trajectory, extra_site=None, extra_dir: int | None = None
) -> float:
    """E[prod_j omega(x_j, step_j)], optionally times one more factor
    omega(extra_site, extra_dir).  Exact for iid laws."""
    _require_enumerable(law)
    counts = hitting_counts(traj)
    if extra_dir is not None:
        key = tuple(int(v) for v in (traj.end if extra_site is None else np.asarray(extra_site)))
        if key not in counts:
            counts[key] = np.zeros(2 * law.d, dtype=np.int64)
        counts[key][extra_dir] += 1
    out = 1.0
    for c in counts.values():
        out *= law.site_moment(c)
    return out


def _latents_at_sites(law: EnvLaw, sites: np.ndarray, replicas: int, seed: int) -> np.ndarray:
    # (replicas, n_sites) latent draws, one fresh environment per replica
    rep = np.repeat(np.arange(replicas, dtype=np.int64), sites.shape[0])[:, None]
    tiled = np.tile(sites, (replicas, 1))
    aug = np.hstack([rep, tiled])
    from .environment import _latent_from_uniform

    if law.mixing is None or law.mixing.radius == 0:
        V = _latent_from_uniform(law, rng.site_uniforms(seed, rng.TAG_PATHS, aug))
    else:
        V = np.zeros(aug.shape[0], dtype=np.float64)
        pad = np.zeros((law.mixing.offsets.shape[0], 1), dtype=np.int64)
        for off, w in zip(np.hstack([pad, law.mixing.offsets]), law.mixing.weights):
            V += w * _latent_from_uniform(law, rng.site_uniforms(seed, rng.TAG_PATHS, aug + off))
    return V.reshape(replicas, sites.shape[0])


def path_weight_mc(
    law: EnvLaw,
    traj: Trajectory,
    replicas: int,
    seed: int,
    extra_site=None,
    extra_dir: int | None = None,
) -> tuple[float, float]:
    """Monte Carlo annealed path weight, (estimate, stderr).  Works for any
    law, mixing included."""
    counts = hitting_counts(traj)
    if extra_dir is not None:
        key = tuple(int(v) for v in (traj.end if extra_site is None else np.asarray(extra_site)))
        counts.setdefault(key, np.zeros(2 * law.d, dtype=np.int64))
        counts[key] = counts[key].copy()
        counts[key][extra_dir] += 1
    sites = np.array(sorted(counts), dtype=np.int64).reshape(len(counts), law.d)
    V = _latents_at_sites(law, sites, replicas, seed)
    logw = np.zeros(replicas)
    for i, site in enumerate(sites):
        c = counts[tuple(int(v) for v in site)]
        kern = law.mean * (1.0 + law.delta * law.loadings * V[:, i, None])
        logw += (c * np.log(kern)).sum(axis=1)
    w = np.exp(logw)
    return float(w.mean()), float(w.std(ddof=1) / np.sqrt(replicas))


def conditional_step_kernel(
    law: EnvLaw,
    traj: Trajectory,
    replicas: int | None = None,
    seed: int = 0,
) -> dict:
    """Next-step kernel at the path endpoint given the path so far, under the
    annealed measure: ratio of the extended to the base path weight.

    Exact for iid laws; Monte Carlo with a delta-method stderr otherwise
    (pass replicas).  The common latent draws are shared between numerator
    and denominator, which is what makes the ratio tight.
    """
    if law.is_enumerable and replicas is None:
        base = path_weight_exact(law, traj)
        if base <= 0.0:
            raise DegenerateDenominator("base path weight vanished")
        probs = np.array(
            [path_weight_exact(law, traj, extra_dir=e) / base for e in range(2 * law.d)]
        )
        return {"probs": probs, "stderr": np.zeros(2 * law.d), "exact": True}
    if replicas is None:
        raise UnsupportedLaw("non-iid law: pass replicas for the MC route")
    counts = hitting_counts(traj)
    sites = np.array(sorted(counts), dtype=np.int64).reshape(len(counts), law.d)
    V = _latents_at_sites(law, sites, replicas, seed)
    logw = np.zeros(replicas)
    site_index = {tuple(int(v) for v in s): i for i, s in enumerate(sites)}
    for key, i in site_index.items():
        kern = law.mean * (1.0 + law.delta * law.loadings * V[:, i, None])
        logw += (counts[key] * np.log(kern)).sum(axis=1)
    w = np.exp(logw)
    B = w.mean()
    if B <= 0.0:
        raise DegenerateDenominator("base path weight vanished in every replica")
    end = tuple(int(v) for v in traj.end)
    if end in site_index:
        kend = law.mean * (1.0 + law.delta * law.loadings * V[:, site_index[end], None])
    else:
        Vend = _latents_at_sites(law, np.asarray([end], dtype=np.int64), replicas, seed)
        kend = law.mean * (1.0 + law.delta * law.loadings * Vend[:, 0, None])
    probs = np.empty(2 * law.d)
    se = np.empty(2 * law.d)
    for e in range(2 * law.d):
        A_r = w * kend[:, e]
        A = A_r.mean()
        r = A / B
        cov = np.cov(A_r, w, ddof=1)
        var = (cov[0, 0] - 2 * r * cov[0, 1] + r * r * cov[1, 1]) / (B * B * replicas)
        probs[e] = r
        se[e] = np.sqrt(max(var, 0.0))
    return {"probs": probs, "stderr": se, "exact": False}


def quenched_path_prob(env: Environment, traj: Trajectory) -> float:
    """Probability of the exact step sequence under one fixed environment."""
    pos = traj.positions()
    out = 1.0
    for j, sidx in enumerate(traj.steps):
        out *= float(env.kernel_at(pos[j])[int(sidx)])
    return out


def annealed_endpoint_distribution(law: EnvLaw, n: int, start=None) -> dict[tuple, float]:
    """Exact n-step annealed law of the endpoint, by path enumeration.

    Cost (2d)^n; meant for desk-scale cross-checks where revisits make the
    mean-field kernel wrong.
    """
    _require_enumerable(law)
    if (2 * law.d) ** n > 500_000:
        raise ValueError(f"(2d)^n = {(2 * law.d) ** n} too large to enumerate")
    out: dict[tuple, float] = {}
    for seq in itertools.product(range(2 * law.d), repeat=n):
        traj = path_from_steps(law.d, seq, start=start)
        key = tuple(int(v) for v in traj.end)
        out[key] = out.get(key, 0.0) + path_weight_exact(law, traj)
    return out


def annealed_hit_probability(law: EnvLaw, n: int, target, start=None) -> float:
    dist = annealed_endpoint_distribution(law, n, start=start)
    return dist.get(tuple(int(v) for v in np.asarray(target).ravel()), 0.0)


def mean_field_endpoint_distribution(d: int, mean_kernel, n: int, start=None) -> dict[tuple, float]:
    """Endpoint law of the walk that uses the mean kernel everywhere."""
    mean = np.asarray(mean_kernel, dtype=np.float64)
    moves = direction_vectors(d)
    if start is None:
        start = np.zeros(d, dtype=np.int64)
    cur = {tuple(int(v) for v in np.asarray(start)): 1.0}
    for _ in range(n):
        nxt: dict[tuple, float] = {}
        for site, p in cur.items():
            for e in range(2 * d):
                key = tuple(int(v) for v in np.asarray(site) + moves[e])
                nxt[key] = nxt.get(key, 0.0) + p * float(mean[e])
        cur = nxt
    return cur
