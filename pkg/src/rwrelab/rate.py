"""Reach costs and the quenched decay-rate estimator.

The reach cost of (x -> y) at time scale t and tightness u is

    cost = -log sup_n exp(-u |n - t|) P_n(x -> y),

a nonnegative quantity that is subadditive under path concatenation and
Lipschitz in (t, x, y) with constant u + log(1/kappa).  Dividing by t = N
at y close to N*eta estimates the quenched decay rate of the walk's
large-deviation probability at velocity eta.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import rng
from .environment import EnvLaw, Environment, direction_vectors, sample_environment

_NEG_INF = float("-inf")


def _dp_box(env: Environment, x: np.ndarray, radius: int):
    lo = x - radius
    hi = x + radius
    if env.boundary == "strict":
        lo = np.maximum(lo, env.lo)
        hi = np.minimum(hi, env.hi)
    return lo, hi


def _dp_step(W: np.ndarray, field: np.ndarray, d: int) -> np.ndarray:
    """One forward step; mass crossing the box edge is dropped."""
    out = np.zeros_like(W)
    for axis in range(d):
        for k, sign in ((2 * axis, 1), (2 * axis + 1, -1)):
            flux = W * field[..., k]
            src = [slice(None)] * d
            dst = [slice(None)] * d
            if sign > 0:
                src[axis] = slice(0, -1)
                dst[axis] = slice(1, None)
            else:
                src[axis] = slice(1, None)
                dst[axis] = slice(0, -1)
            out[tuple(dst)] += flux[tuple(src)]
    return out


def log_hit_series(env: Environment, x, targets, n_hi: int) -> np.ndarray:
    """log P_n(x -> y) for every target y and n = 0..n_hi.

    One forward DP with per-level rescaling, so deep tails stay finite in
    the log domain.  Returns (len(targets), n_hi + 1), -inf where P_n = 0.
    A strict window clips the DP box: probability mass that would leave the
    window is absorbed, matching the walk that is killed there.
    """
    x = np.asarray(x, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, env.d)
    lo, hi = _dp_box(env, x, n_hi)
    shape = tuple(int(h - l + 1) for l, h in zip(lo, hi))
    field = env.kernel_field(lo, hi)
    rel = targets - lo
    ok = np.logical_and(rel >= 0, rel < np.asarray(shape)).all(axis=1)
    idx = tuple(np.clip(rel[:, i], 0, shape[i] - 1) for i in range(env.d))

    W = np.zeros(shape)
    W[tuple(x - lo)] = 1.0
    logscale = 0.0
    out = np.full((targets.shape[0], n_hi + 1), _NEG_INF)
    for n in range(n_hi + 1):
        if n:
            W = _dp_step(W, field, env.d)
            peak = W.max()
            if peak <= 0.0:
                break
            if peak < 1e-250:
                W /= peak
                logscale += math.log(peak)
        vals = W[idx]
        hit = ok & (vals > 0.0)
        out[hit, n] = np.log(vals[hit]) + logscale
    return out


@dataclasses.dataclass
class ReachCost:
    value: float
    argmin_n: int
    truncated: bool  # scan hit the step cap before the envelope closed
    unreachable: bool  # no positive hitting probability in the scanned range


def reach_cost_from_series(logp: np.ndarray, u: float, t: int, n_max: int | None = None) -> ReachCost:
    """Minimize u|n - t| - log P_n over the available series (shared
    candidate grid, so costs at different u are exactly comparable)."""
    hi = logp.size - 1 if n_max is None else min(n_max, logp.size - 1)
    n = np.arange(hi + 1)
    cand = u * np.abs(n - t) - logp[: hi + 1]
    finite = np.isfinite(cand)
    if not finite.any():
        return ReachCost(math.inf, -1, truncated=False, unreachable=True)
    best = int(np.argmin(np.where(finite, cand, math.inf)))
    value = float(cand[best])
    # the envelope alone (log P <= 0) already exceeds the best candidate
    # beyond the scanned range iff u * (hi + 1 - t) >= value
    closed = u * (hi + 1 - t) >= value
    return ReachCost(value, best, truncated=not closed, unreachable=False)


def reach_cost(
    env: Environment, u: float, t: int, x, y, n_max: int | None = None
) -> ReachCost:
    """Reach cost of x -> y with an early envelope stop and a 4t step cap."""
    if u <= 0:
        raise ValueError(f"tightness u must be positive, got {u}")
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    dist = int(np.abs(y - x).sum())
    if n_max is None:
        n_max = 4 * max(t, dist, 1)
    logp = log_hit_series(env, x, y[None], n_max)[0]
    return reach_cost_from_series(logp, u, t, n_max)


def lipschitz_constant(u: float, kappa: float) -> float:
    return u + math.log(1.0 / kappa)


def check_reach_cost_laws(
    env: Environment,
    u: float,
    t: int,
    samples: int,
    seed: int,
    slack: float = 1e-10,
) -> dict:
    """Property battery: nonnegativity, subadditivity under concatenation,
    Lipschitz in (t, x, y), and shift covariance on a periodic window.

    Endpoint pairs are endpoints of short keyed walks, so every sampled pair
    is reachable by construction.
    """
    kappa = env.law.kappa if env.law is not None else float(env.kernels.min())
    L = lipschitz_constant(u, kappa)
    gen = rng.stream(seed, rng.TAG_MISC, 0)
    report = {
        "nonnegativity": [],
        "subadditivity": [],
        "lipschitz": [],
        "shift_covariance": [],
        "samples": samples,
    }
    span = max(2, t // 2)
    for i in range(samples):
        x = np.zeros(env.d, dtype=np.int64)
        mid_traj = _short_endpoint(env, x, span, gen)
        y = mid_traj
        z = _short_endpoint(env, y, span, gen)
        g_xy = reach_cost(env, u, t, x, y).value
        g_yz = reach_cost(env, u, t, y, z).value
        g_xz = reach_cost(env, u, 2 * t, x, z).value
        if g_xy < -slack or g_yz < -slack:
            report["nonnegativity"].append((i, g_xy, g_yz))
        if g_xz > g_xy + g_yz + slack:
            report["subadditivity"].append((i, g_xz, g_xy + g_yz))
        # one-unit perturbations of each argument
        g_t = reach_cost(env, u, t + 1, x, y).value
        if abs(g_t - g_xy) > L + slack:
            report["lipschitz"].append((i, "t", g_t, g_xy))
        y2 = y.copy()
        y2[0] += 1
        g_y = reach_cost(env, u, t, x, y2).value
        if abs(g_y - g_xy) > L + slack:
            report["lipschitz"].append((i, "y", g_y, g_xy))
        if env.boundary == "periodic":
            shift = gen.integers(-span, span + 1, size=env.d)
            g_s = reach_cost(env.shifted(shift), u, t, x, y).value
            g_direct = reach_cost(env, u, t, x + shift, y + shift).value
            if abs(g_s - g_direct) > 1e-9:
                report["shift_covariance"].append((i, g_s, g_direct))
    report["ok"] = not (
        report["nonnegativity"]
        or report["subadditivity"]
        or report["lipschitz"]
        or report["shift_covariance"]
    )
    return report


def _short_endpoint(env: Environment, x: np.ndarray, span: int, gen) -> np.ndarray:
    moves = direction_vectors(env.d)
    pos = x.copy()
    for _ in range(int(gen.integers(0, span + 1)) * 2):
        kern = env.kernel_at(pos)
        e = int(np.searchsorted(np.cumsum(kern), gen.random()))
        pos = pos + moves[min(e, 2 * env.d - 1)]
    return pos


def velocity_target(d: int, eta, N: int) -> np.ndarray:
    """Nearest lattice point to N*eta with the l1-parity of N (reachable in
    exactly N steps); scalar eta means eta * e_1."""
    eta = np.atleast_1d(np.asarray(eta, dtype=np.float64))
    if eta.size == 1 and d > 1:
        eta = np.concatenate([eta, np.zeros(d - 1)])
    if np.abs(eta).sum() > 1.0 + 1e-12:
        raise ValueError(f"|eta|_1 = {np.abs(eta).sum()} > 1 is unreachable")
    y = np.rint(N * eta).astype(np.int64)
    gap = (int(np.abs(y).sum()) - N) % 2
    if gap:
        # move coordinate 0 one unit toward N*eta, breaking ties upward
        y[0] += 1 if N * eta[0] >= y[0] else -1
    if np.abs(y).sum() > N:
        y[0] -= 2 * np.sign(y[0])
    return y


@dataclasses.dataclass
class RateEstimate:
    u_values: np.ndarray
    n_values: np.ndarray
    values: np.ndarray  # (U, K, R) per-replica costs divided by N
    mean: np.ndarray  # (U, K)
    stderr: np.ndarray  # (U, K)
    extrapolated: float  # mean at the largest u and N
    ci: float  # one stderr at the largest u and N
    truncated_fraction: float
    unreachable_count: int


def estimate_quenched_rate(
    law: EnvLaw,
    eta,
    u_values,
    n_values,
    replicas: int,
    seed: int,
) -> RateEstimate:
    """Quenched decay rate at velocity eta: mean over environment replicas of
    reach costs to the parity-fixed target, divided by N.

    One DP pass per replica harvests the full hitting series for every N, so
    all (u, N) cells share candidates; values are exactly nondecreasing in u.
    """
    u_values = np.sort(np.asarray(u_values, dtype=np.float64))
    n_values = np.sort(np.asarray(n_values, dtype=np.int64))
    if (u_values <= 0).any():
        raise ValueError("tightness values must be positive")
    N_max = int(n_values[-1])
    # scan far enough that the envelope closes at the smallest u, capped at 4N
    n_cap = min(
        4 * N_max,
        int(N_max * (1.0 + math.log(1.0 / law.kappa) / float(u_values[0]))) + 2,
    )
    targets = np.stack([velocity_target(law.d, eta, int(N)) for N in n_values])
    vals = np.empty((u_values.size, n_values.size, replicas))
    truncated = 0
    unreachable = 0
    origin = np.zeros(law.d, dtype=np.int64)
    for r in range(replicas):
        env = sample_environment(
            law,
            (origin - n_cap, origin + n_cap),
            rng.subseed(seed, rng.TAG_ENV, r),
            boundary="mean-fill",
        )
        series = log_hit_series(env, origin, targets, n_cap)
        for k, N in enumerate(n_values):
            for i, u in enumerate(u_values):
                rc = reach_cost_from_series(series[k], float(u), int(N), n_max=4 * int(N))
                vals[i, k, r] = rc.value / float(N)
                truncated += rc.truncated
                unreachable += rc.unreachable
    mean = vals.mean(axis=2)
    stderr = vals.std(axis=2, ddof=1) / math.sqrt(replicas) if replicas > 1 else np.zeros_like(mean)
    return RateEstimate(
        u_values=u_values,
        n_values=n_values,
        values=vals,
        mean=mean,
        stderr=stderr,
        extrapolated=float(mean[-1, -1]),
        ci=float(stderr[-1, -1]),
        truncated_fraction=truncated / float(u_values.size * n_values.size * replicas),
        unreachable_count=int(unreachable),
    )
