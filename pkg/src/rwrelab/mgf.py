"""Boundary log-MGFs of directed walks, their conjugates, and flat-rate bounds.

A directed walk takes only the d steps {s_1 e_1, ..., s_d e_d}, so after n
steps it sits on the diagonal level set <x, s> = n.  Its transverse image
(step type j < d mapped to e_j in Z^{d-1}, type d to -(e_1+...+e_{d-1}))
carries the tilt: the quenched boundary log-MGF is

    (1/n) log E_omega[ exp(<theta, S_n>) ; all n steps directed ],

computed exactly by dynamic programming over step-type counts.  Directed
paths never revisit a site, so under an iid law the annealed value is
exactly log of the mean-kernel step transform; the spread of the annealed
gradient around that of the mean kernel is controlled by the disorder.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import rng
from .environment import EnvLaw, Environment, sample_environment
from .walk import directed_indices


def directed_box(d: int, s, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Smallest box holding every site a directed n-step walk from 0 visits."""
    s = np.asarray(s, dtype=np.int64)
    lo = np.minimum(0, s * n)
    hi = np.maximum(0, s * n)
    return lo, hi


def _theta_full(d: int, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(d - 1)
    return np.append(theta, -theta.sum())


def directed_log_mgf(env: Environment, s, theta, n: int) -> float:
    """Quenched boundary log-MGF at transverse tilt theta, exact.

    DP over transverse step-type counts; per-level rescaling keeps the
    accumulator in range for any n.
    """
    s = np.asarray(s, dtype=np.int64)
    d = env.d
    idx = directed_indices(s)
    th = _theta_full(d, theta)
    lo, hi = directed_box(d, s, n)
    field = env.kernel_field(lo, hi)  # (n+1,)^d x 2d

    if d == 1:
        # one step type; the event weight is a single product along the ray
        total = 0.0
        for k in range(n):
            rel = k if s[0] > 0 else n - k
            total += math.log(field[rel, idx[0]]) + th[0]
        return total / n

    shape = (n + 1,) * (d - 1)
    cgrid = np.indices(shape)  # (d-1, *shape)
    csum = cgrid.sum(axis=0)
    rel_side = [cgrid[j] if s[j] > 0 else n - cgrid[j] for j in range(d - 1)]
    step_w = np.exp(th)

    A = np.zeros(shape)
    A[(0,) * (d - 1)] = 1.0
    logscale = 0.0
    for k in range(n):
        c_last = k - csum
        rel_last = np.clip(c_last if s[d - 1] > 0 else n - c_last, 0, n)
        A_new = np.zeros_like(A)
        for j in range(d - 1):
            w = field[tuple(rel_side) + (rel_last, idx[j])] * step_w[j]
            src = [slice(None)] * (d - 1)
            dst = [slice(None)] * (d - 1)
            src[j] = slice(0, -1)
            dst[j] = slice(1, None)
            A_new[tuple(dst)] += (A * w)[tuple(src)]
        w = field[tuple(rel_side) + (rel_last, idx[d - 1])] * step_w[d - 1]
        A_new += A * w
        A = A_new
        peak = A.max()
        if peak <= 0.0:
            return float("-inf")
        A /= peak
        logscale += math.log(peak)
    return (logscale + math.log(A.sum())) / n


def mean_step_transform(d: int, mean_kernel, s, theta) -> float:
    """log sum_j exp(<theta, pi_j>) m(s_j e_j) for the mean kernel; equals the
    iid annealed boundary log-MGF exactly (directed paths are self-avoiding)."""
    s = np.asarray(s, dtype=np.int64)
    mean = np.asarray(mean_kernel, dtype=np.float64)
    idx = directed_indices(s)
    th = _theta_full(d, theta)
    return float(logsumexp(th + np.log(mean[idx])))


def mean_step_transform_grad(d: int, mean_kernel, s, theta) -> np.ndarray:
    """Gradient in theta of the mean step transform."""
    s = np.asarray(s, dtype=np.int64)
    mean = np.asarray(mean_kernel, dtype=np.float64)
    idx = directed_indices(s)
    th = _theta_full(d, theta)
    w = np.exp(th) * mean[idx]
    psi = w.sum()
    return (w[: d - 1] - w[d - 1]) / psi


@dataclasses.dataclass
class AnnealedMgf:
    value: float
    ci: float  # one stderr, via the delta method on the replica mean
    replicas: int
    quenched: np.ndarray  # per-replica quenched values


def directed_log_mgf_annealed(
    law: EnvLaw, s, theta, n: int, replicas: int, seed: int
) -> AnnealedMgf:
    """Annealed boundary log-MGF: (1/n) log mean_r exp(n * quenched_r).

    Replica environments are keyed by (seed, replica) only, so calls at
    different theta reuse identical environments (common random numbers).
    """
    lo, hi = directed_box(law.d, s, n)
    lam = np.empty(replicas)
    for r in range(replicas):
        env = sample_environment(law, (lo, hi), rng.subseed(seed, rng.TAG_ENV, r))
        lam[r] = directed_log_mgf(env, s, theta, n)
    shift = lam.max()
    X = np.exp(n * (lam - shift))
    mean = X.mean()
    value = shift + math.log(mean) / n
    ci = float(X.std(ddof=1) / (mean * math.sqrt(replicas)) / n) if replicas > 1 else 0.0
    return AnnealedMgf(value=float(value), ci=ci, replicas=replicas, quenched=lam)


def gradient_sandwich_check(
    law: EnvLaw, s, theta, n: int, replicas: int, seed: int, h: float = 1e-4
) -> dict:
    """Test that the annealed boundary MGF gradient lies between the mean
    kernel gradient scaled by (1 - dis) and (1 + dis).

    Finite differences reuse the same environments at theta +- h (common
    random numbers), and the annealed gradient is the replica-weighted mean
    of quenched gradients with weights exp(n * quenched).
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(law.d - 1)
    base = directed_log_mgf_annealed(law, s, theta, n, replicas, seed)
    w = np.exp(n * (base.quenched - base.quenched.max()))
    w /= w.sum()
    dis = law.delta * float(np.abs(law.loadings).max()) * law.latent_absmax()
    g_ref = mean_step_transform_grad(law.d, law.mean, s, theta)
    lo_b = np.minimum((1 - dis) * g_ref, (1 + dis) * g_ref)
    hi_b = np.maximum((1 - dis) * g_ref, (1 + dis) * g_ref)

    grad = np.empty(law.d - 1)
    se = np.empty(law.d - 1)
    for i in range(law.d - 1):
        ei = np.zeros(law.d - 1)
        ei[i] = h
        gp = directed_log_mgf_annealed(law, s, theta + ei, n, replicas, seed)
        gm = directed_log_mgf_annealed(law, s, theta - ei, n, replicas, seed)
        g_r = (gp.quenched - gm.quenched) / (2 * h)
        gi = float((w * g_r).sum())
        grad[i] = gi
        se[i] = math.sqrt(float((w * w * (g_r - gi) ** 2).sum()))
    ok = bool(np.all(grad >= lo_b - 3 * se) and np.all(grad <= hi_b + 3 * se))
    return {
        "gradient": grad,
        "stderr": se,
        "lower": lo_b,
        "upper": hi_b,
        "reference": g_ref,
        "disorder": dis,
        "ok": ok,
    }


# -- conjugates ---------------------------------------------------------------


@dataclasses.dataclass
class ConjugateGrid:
    xs: np.ndarray  # (X, p) query slopes
    star: np.ndarray  # (X,) conjugate values
    argmax: np.ndarray  # (X, p) maximizing grid tilt
    edge: np.ndarray  # (X,) argmax sat on the theta-grid hull; value is a lower bound


def legendre_transform(thetas, values, xs) -> ConjugateGrid:
    """Discrete Legendre conjugate sup_theta(<theta, x> - value(theta)) on a
    finite tilt grid.  Flags slopes whose argmax touches the grid edge."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[0] == 1 and thetas.shape[1] > 1:
        thetas = thetas.T
    values = np.asarray(values, dtype=np.float64).reshape(thetas.shape[0])
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != thetas.shape[1]:
        xs = xs.T
    scores = xs @ thetas.T - values  # (X, T)
    best = np.argmax(scores, axis=1)
    lo = thetas.min(axis=0)
    hi = thetas.max(axis=0)
    arg = thetas[best]
    edge = np.logical_or(
        np.isclose(arg, lo[None, :]), np.isclose(arg, hi[None, :])
    ).any(axis=1)
    return ConjugateGrid(
        xs=xs, star=scores[np.arange(xs.shape[0]), best], argmax=arg, edge=edge
    )


def zero_velocity_rate(kernels, theta_grid=None, polish: bool = True) -> dict:
    """Flat-direction decay bound: -log min_theta max_kernel step transform.

    kernels: (K, 2d) candidate site kernels (for latent-affine iid laws the
    two extreme kernels are the exact hull).  A coarse grid seeds a simplex
    polish of the inner max, which is convex in theta.
    """
    kernels = np.atleast_2d(np.asarray(kernels, dtype=np.float64))
    d = kernels.shape[1] // 2
    from .environment import direction_vectors

    moves = direction_vectors(d).astype(np.float64)  # (2d, d)

    def inner(th):
        th = np.asarray(th, dtype=np.float64).reshape(d)
        return float(np.max(np.log((kernels * np.exp(moves @ th)).sum(axis=1))))

    if theta_grid is None:
        axes = [np.linspace(-2.0, 2.0, 41)] * d
        theta_grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    else:
        theta_grid = np.atleast_2d(np.asarray(theta_grid, dtype=np.float64))
        if theta_grid.shape[1] != d:
            theta_grid = theta_grid.reshape(-1, d)
    vals = np.array([inner(th) for th in theta_grid])
    k0 = int(np.argmin(vals))
    theta = theta_grid[k0]
    val = vals[k0]
    if polish:
        res = minimize(inner, theta, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14})
        if res.fun < val:
            theta, val = res.x, float(res.fun)
    return {"rate": -val, "argmin_theta": np.asarray(theta).reshape(d), "log_value": val}


def velocity_from_transverse(s, y) -> np.ndarray:
    """Full-lattice velocity of a directed walk with mean transverse step y."""
    s = np.asarray(s, dtype=np.float64)
    d = s.size
    y = np.asarray(y, dtype=np.float64).reshape(d - 1)
    a_last = (1.0 - y.sum()) / d
    alphas = np.concatenate([y + a_last, [a_last]])
    return alphas * s


# -- unconditioned full-lattice transforms (used by tilt identities) -----------


def lattice_log_mgf(env: Environment, theta, n: int, start=None) -> float:
    """(1/n) log E_omega[exp(<theta, X_n>)] over all n-step paths, exact DP."""
    theta = np.asarray(theta, dtype=np.float64).reshape(env.d)
    if start is None:
        start = np.zeros(env.d, dtype=np.int64)
    start = np.asarray(start, dtype=np.int64)
    lo = start - n
    hi = start + n
    field = env.kernel_field(lo, hi)
    from .environment import direction_vectors

    moves = direction_vectors(env.d)
    weights = [field[..., k] * math.exp(float(theta @ moves[k])) for k in range(2 * env.d)]
    W = np.zeros(field.shape[:-1])
    W[tuple(start - lo)] = 1.0
    logscale = 0.0
    for _ in range(n):
        out = np.zeros_like(W)
        for axis in range(env.d):
            for k, sign in ((2 * axis, 1), (2 * axis + 1, -1)):
                flux = W * weights[k]
                src = [slice(None)] * env.d
                dst = [slice(None)] * env.d
                if sign > 0:
                    src[axis] = slice(0, -1)
                    dst[axis] = slice(1, None)
                else:
                    src[axis] = slice(1, None)
                    dst[axis] = slice(0, -1)
                out[tuple(dst)] += flux[tuple(src)]
        W = out
        peak = W.max()
        if peak <= 0.0:
            return float("-inf")
        W /= peak
        logscale += math.log(peak)
    return (logscale + math.log(W.sum())) / n


def lattice_log_mgf_annealed(
    law: EnvLaw, theta, n: int, replicas: int, seed: int, start=None
) -> AnnealedMgf:
    """Annealed unconditioned log-MGF by replica averaging, delta-method ci."""
    if start is None:
        start = np.zeros(law.d, dtype=np.int64)
    start = np.asarray(start, dtype=np.int64)
    lam = np.empty(replicas)
    for r in range(replicas):
        env = sample_environment(
            law, (start - n, start + n), rng.subseed(seed, rng.TAG_ENV, r)
        )
        lam[r] = lattice_log_mgf(env, theta, n, start=start)
    shift = lam.max()
    X = np.exp(n * (lam - shift))
    mean = X.mean()
    value = shift + math.log(mean) / n
    ci = float(X.std(ddof=1) / (mean * math.sqrt(replicas)) / n) if replicas > 1 else 0.0
    return AnnealedMgf(value=float(value), ci=ci, replicas=replicas, quenched=lam)
