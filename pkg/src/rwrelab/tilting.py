"""Step coupling, renewal structure, and velocity tilting.

Three constructions live here.

Coupling: each step first draws a tag; with probability couple_prob per
direction the step is forced regardless of the environment, otherwise it is
free and uses the residual kernel (omega - floor) / (1 - floor mass).  The
tag marginal times the residual reproduces omega exactly, and runs of forced
tags are environment-independent, which is what makes them usable as renewal
markers.

Renewal ratio: along a directed walk, the ratio of the tag-conditioned
boundary transform in the realized environment to the same transform in the
mean field has expectation one at every renewal time (directed paths are
self-avoiding, so the iid annealed numerator factorizes into the mean-field
denominator tag by tag).

Tilting: for an interior velocity z, a unique scale C and step law u with
u(e) u(-e) = C m(e) m(-e) and u(e) - u(-e) = <z, e> turn the mean walk into
one with drift exactly z; u(e) = sqrt(C) m(e) exp(<theta_z, e>) for an
explicit tilt theta_z, which transfers decay rates between the two walks.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import rng
from .environment import EnvLaw, Environment, direction_vectors, sample_environment
from .errors import (
    EnumerationTooLarge,
    InvalidCoupling,
    ResidualNegative,
    UnsupportedLaw,
    ZNotInterior,
)
from .mgf import directed_box, lattice_log_mgf_annealed, legendre_transform
from .pathspace import path_from_steps, path_weight_exact
from .walk import Trajectory, directed_indices

FREE = -1  # tag value for a free (environment-driven) step


@dataclasses.dataclass
class EpsSequence:
    """Coupling tags for one walk: forced direction index, or FREE."""

    tags: np.ndarray  # (n,) int16
    couple_prob: float
    alphabet: str  # "full" (all 2d directions forced) or "directed" (the d of 𝕍_s)
    d: int
    s: np.ndarray | None = None


def _check_coupling(d: int, couple_prob: float, alphabet: str, s) -> np.ndarray | None:
    if alphabet not in ("full", "directed"):
        raise InvalidCoupling(f"unknown alphabet {alphabet!r}")
    n_forced = 2 * d if alphabet == "full" else d
    if not 0 < couple_prob:
        raise InvalidCoupling(f"couple_prob={couple_prob} must be positive")
    if n_forced * couple_prob > 1 + 1e-12:
        raise InvalidCoupling(
            f"forced mass {n_forced}*{couple_prob} exceeds 1"
        )
    if alphabet == "directed":
        if s is None:
            raise InvalidCoupling("directed alphabet needs the direction signs s")
        return np.asarray(s, dtype=np.int64)
    return None


def sample_coupling_tags(
    d: int,
    n: int,
    couple_prob: float,
    seed: int,
    alphabet: str = "full",
    s=None,
    replicas: int | None = None,
    stream_index: int = 0,
) -> np.ndarray:
    """Draw tags: forced direction k w.p. couple_prob each, else FREE.
    Returns (n,) or (replicas, n) int16."""
    s = _check_coupling(d, couple_prob, alphabet, s)
    gen = rng.stream(seed, rng.TAG_TAGS, stream_index)
    shape = (n,) if replicas is None else (replicas, n)
    u = gen.random(shape)
    slot = np.floor(u / couple_prob).astype(np.int64)
    if alphabet == "full":
        tags = np.where(slot < 2 * d, slot, FREE)
    else:
        forced = directed_indices(s)
        tags = np.where(slot < d, forced[np.clip(slot, 0, d - 1)], FREE)
    return tags.astype(np.int16)


def _forced_mask(d: int, alphabet: str, s) -> np.ndarray:
    mask = np.zeros(2 * d)
    if alphabet == "full":
        mask[:] = 1.0
    else:
        mask[directed_indices(s)] = 1.0
    return mask


def residual_kernel(kern, couple_prob: float, alphabet: str = "full", s=None) -> np.ndarray:
    """Free-step law (omega - floor)/(1 - floor mass); raises if the floor
    exceeds an entry (couple_prob must stay at or below the ellipticity floor)."""
    kern = np.asarray(kern, dtype=np.float64)
    d = kern.shape[-1] // 2
    sv = _check_coupling(d, couple_prob, alphabet, s)
    mask = _forced_mask(d, alphabet, s if sv is None else sv)
    rem = 1.0 - couple_prob * mask.sum()
    if rem <= 0:
        raise InvalidCoupling("no free mass left")
    resid = (kern - couple_prob * mask) / rem
    if (resid < -1e-15).any():
        raise ResidualNegative(
            f"kernel entry below the coupling floor {couple_prob}"
        )
    return np.clip(resid, 0.0, None)


def coupling_marginal_gap(kern, couple_prob: float, alphabet: str = "full", s=None) -> float:
    """Max |floor + free mass - omega| over directions; identically ~1e-17."""
    kern = np.asarray(kern, dtype=np.float64)
    d = kern.shape[-1] // 2
    mask = _forced_mask(d, alphabet, s)
    rem = 1.0 - couple_prob * mask.sum()
    resid = residual_kernel(kern, couple_prob, alphabet, s)
    back = couple_prob * mask + rem * resid
    return float(np.abs(back - kern).max())


def simulate_coupled(
    env: Environment,
    start,
    n_steps: int,
    seed: int,
    couple_prob: float,
    alphabet: str = "full",
    s=None,
    stream_index: int = 0,
) -> Trajectory:
    """Quenched walk with coupling tags recorded; marginally identical in law
    to the uncoupled quenched walk."""
    tags = sample_coupling_tags(
        env.d, n_steps, couple_prob, seed, alphabet, s, stream_index=stream_index
    )
    gen = rng.stream(seed, rng.TAG_WALK, stream_index)
    u = gen.random(n_steps)
    moves = direction_vectors(env.d)
    pos = np.asarray(start, dtype=np.int64).copy()
    steps = np.empty(n_steps, dtype=np.int8)
    for j in range(n_steps):
        if tags[j] != FREE:
            e = int(tags[j])
        else:
            resid = residual_kernel(env.kernel_at(pos), couple_prob, alphabet, s)
            cdf = np.cumsum(resid)
            cdf /= cdf[-1]
            e = min(int(np.searchsorted(cdf, u[j], side="right")), 2 * env.d - 1)
        steps[j] = e
        pos += moves[e]
    return Trajectory(
        start=np.asarray(start, dtype=np.int64),
        steps=steps,
        d=env.d,
        eps_tags=tags,
    )


# -- renewal times ------------------------------------------------------------


@dataclasses.dataclass
class RenewalRecord:
    taus: np.ndarray  # renewal times, increasing
    L: int
    run_symbol: int
    horizon: int
    complete: bool  # found as many renewals as asked for


def detect_renewals(
    tags: np.ndarray, L: int, run_symbol: int, max_count: int | None = None
) -> RenewalRecord:
    """Times j with tags[j-L:j] all equal to run_symbol, spaced at least L
    apart (a tag run is consumed by the renewal it certifies)."""
    if L < 1:
        raise ValueError(f"run length L={L} must be >= 1")
    tags = np.asarray(tags).ravel()
    n = tags.size
    # rolling count of run symbols in each length-L window, then a greedy
    # left-to-right pick over the (sparse) complete windows
    hit = (tags == run_symbol).astype(np.int64)
    if n >= L:
        csum = np.concatenate([[0], np.cumsum(hit)])
        full = np.nonzero(csum[L:] - csum[:-L] == L)[0] + L  # window ends j
    else:
        full = np.empty(0, dtype=np.int64)
    taus = []
    prev = -10 * L
    for j in full:
        if j - prev >= L:
            taus.append(int(j))
            prev = int(j)
            if max_count is not None and len(taus) >= max_count:
                break
    complete = max_count is None or len(taus) >= max_count
    return RenewalRecord(
        taus=np.asarray(taus, dtype=np.int64),
        L=L,
        run_symbol=int(run_symbol),
        horizon=n,
        complete=complete,
    )


# -- martingale ratio along renewals -------------------------------------------


def _conditional_directed_logvalue(
    field: np.ndarray,
    tags: np.ndarray,
    s: np.ndarray,
    theta,
    couple_prob: float,
    harvest: set[int],
) -> dict[int, float]:
    """log of the tag-conditioned boundary transform at the harvest levels.

    field holds kernels over the directed box in the same layout as the
    boundary-MGF DP; forced levels contribute exp(theta) factors only, free
    levels contribute the tilted residual mass over the directed steps.
    """
    d = s.size
    idx = directed_indices(s)
    m = tags.size
    th = np.append(np.asarray(theta, dtype=np.float64).reshape(d - 1), 0.0)
    th[d - 1] = -th[: d - 1].sum()
    step_w = np.exp(th)
    rem = 1.0 - d * couple_prob
    out: dict[int, float] = {}
    type_of = {int(idx[j]): j for j in range(d)}

    if d == 1:
        logs = np.zeros(m)
        ray = np.arange(m)
        rel = ray if s[0] > 0 else m - ray
        om = field[np.clip(rel, 0, field.shape[0] - 1), idx[0]]
        free = tags == FREE
        logs[free] = np.log((om[free] - couple_prob) / rem)
        # forced tags off the directed set kill the event
        bad = (~free) & (tags != idx[0])
        cum = np.cumsum(logs)
        dead = np.cumsum(bad) > 0
        for k in harvest:
            if k == 0:
                out[0] = 0.0
            else:
                out[k] = float("-inf") if dead[k - 1] else float(cum[k - 1])
        return out

    if d == 2:
        # transverse state is a single count; work on the reachable
        # prefix [0, k] of the state vector and skip index clipping
        c = np.arange(m + 1)
        relc = c if s[0] > 0 else m - c
        f0 = field[..., int(idx[0])]
        f1 = field[..., int(idx[1])]
        A = np.zeros(m + 1)
        A[0] = 1.0
        logscale = 0.0
        if 0 in harvest:
            out[0] = 0.0
        for k in range(m):
            hi = k + 1
            tag = int(tags[k])
            A_new = np.zeros(m + 1)
            if tag == FREE or tag in type_of:
                Av = A[:hi]
                if tag == FREE:
                    c_last = k - c[:hi]
                    rl = c_last if s[1] > 0 else m - c_last
                    w0 = (f0[relc[:hi], rl] - couple_prob) / rem * step_w[0]
                    w1 = (f1[relc[:hi], rl] - couple_prob) / rem * step_w[1]
                    A_new[1 : hi + 1] = Av * w0
                    A_new[:hi] += Av * w1
                elif type_of[tag] == 0:
                    A_new[1 : hi + 1] = Av * step_w[0]
                else:
                    A_new[:hi] = Av * step_w[1]
            A = A_new
            peak = A.max()
            if peak > 0.0:
                A /= peak
                logscale += math.log(peak)
            if (k + 1) in harvest:
                tot = A.sum()
                out[k + 1] = (
                    (logscale + math.log(tot)) if peak > 0 and tot > 0 else float("-inf")
                )
        return out

    shape = (m + 1,) * (d - 1)
    cgrid = np.indices(shape)
    csum = cgrid.sum(axis=0)
    rel_side = [cgrid[j] if s[j] > 0 else m - cgrid[j] for j in range(d - 1)]
    A = np.zeros(shape)
    A[(0,) * (d - 1)] = 1.0
    logscale = 0.0
    if 0 in harvest:
        out[0] = 0.0
    for k in range(m):
        c_last = k - csum
        rel_last = np.clip(c_last if s[d - 1] > 0 else m - c_last, 0, m)
        A_new = np.zeros_like(A)
        tag = int(tags[k])
        if tag != FREE and tag not in type_of:
            A = A_new  # forced step off the directed set: event dies
        else:
            for j in range(d - 1):
                if tag == FREE:
                    w = (
                        (field[tuple(rel_side) + (rel_last, idx[j])] - couple_prob)
                        / rem
                        * step_w[j]
                    )
                elif type_of[tag] == j:
                    w = step_w[j]
                else:
                    continue
                src = [slice(None)] * (d - 1)
                dst = [slice(None)] * (d - 1)
                src[j] = slice(0, -1)
                dst[j] = slice(1, None)
                A_new[tuple(dst)] += (A * w)[tuple(src)]
            if tag == FREE:
                w = (
                    (field[tuple(rel_side) + (rel_last, idx[d - 1])] - couple_prob)
                    / rem
                    * step_w[d - 1]
                )
                A_new += A * w
            elif type_of[tag] == d - 1:
                A_new += A * step_w[d - 1]
            A = A_new
        peak = A.max()
        if peak > 0.0:
            A /= peak
            logscale += math.log(peak)
        if (k + 1) in harvest:
            tot = A.sum()
            out[k + 1] = (logscale + math.log(tot)) if peak > 0 and tot > 0 else float("-inf")
    return out


def _triangle_field(law: EnvLaw, s: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Kernels over the directed box for horizon m, hashed only at the sites
    a directed path can actually visit (levels 0..m-1).  Unvisited entries
    stay NaN; site keying keeps values identical to a full-box draw."""
    from .environment import site_kernels

    levels = np.arange(m, dtype=np.int64)
    ks = np.repeat(levels, levels + 1)
    cs = np.arange(ks.size, dtype=np.int64) - ks * (ks + 1) // 2
    x1 = s[0] * cs
    x2 = s[1] * (ks - cs)
    coords = np.stack([x1, x2], axis=1)
    kern = site_kernels(law, coords, seed)
    lo, _ = directed_box(2, s, m)
    field = np.full((m + 1, m + 1, 4), np.nan)
    field[x1 - lo[0], x2 - lo[1]] = kern
    return field


def _meanfield_directed_logvalue_d2(
    mean: np.ndarray,
    tags: np.ndarray,
    s: np.ndarray,
    theta,
    couple_prob: float,
    harvest: set[int],
) -> dict[int, float]:
    """The d = 2 tag-conditioned transform in a constant field.

    Runs the same per-level vector operations as the environment version with
    the gathers replaced by scalar broadcasts; equal inputs therefore give
    bitwise equal outputs, which keeps the ratio exactly one at zero
    disorder rather than one up to rounding."""
    idx = directed_indices(s)
    m = tags.size
    th = np.array([float(np.asarray(theta).reshape(1)[0]), 0.0])
    th[1] = -th[0]
    step_w = np.exp(th)
    rem = 1.0 - 2.0 * couple_prob
    type_of = {int(idx[0]): 0, int(idx[1]): 1}
    w0_free = (float(mean[int(idx[0])]) - couple_prob) / rem * step_w[0]
    w1_free = (float(mean[int(idx[1])]) - couple_prob) / rem * step_w[1]
    A = np.zeros(m + 1)
    A[0] = 1.0
    logscale = 0.0
    out: dict[int, float] = {}
    if 0 in harvest:
        out[0] = 0.0
    for k in range(m):
        hi = k + 1
        tag = int(tags[k])
        A_new = np.zeros(m + 1)
        if tag == FREE or tag in type_of:
            Av = A[:hi]
            if tag == FREE:
                A_new[1 : hi + 1] = Av * w0_free
                A_new[:hi] += Av * w1_free
            elif type_of[tag] == 0:
                A_new[1 : hi + 1] = Av * step_w[0]
            else:
                A_new[:hi] = Av * step_w[1]
        A = A_new
        peak = A.max()
        if peak > 0.0:
            A /= peak
            logscale += math.log(peak)
        if (k + 1) in harvest:
            tot = A.sum()
            out[k + 1] = (
                (logscale + math.log(tot)) if peak > 0 and tot > 0 else float("-inf")
            )
    return out


@dataclasses.dataclass
class RenewalRatios:
    ratios: np.ndarray  # (replicas, n_renewals), NaN where the horizon ran out
    taus: np.ndarray  # (replicas, n_renewals) renewal times, -1 where missing
    rejected: int  # replicas with fewer renewals than asked
    horizon: int
    mean: np.ndarray  # per-renewal mean over complete replicas
    stderr: np.ndarray


def renewal_ratio_samples(
    law: EnvLaw,
    s,
    theta,
    L: int,
    n_renewals: int,
    replicas: int,
    seed: int,
    couple_prob: float | None = None,
    run_symbol: int | None = None,
    horizon: int | None = None,
    denominator_replicas: int = 0,
) -> RenewalRatios:
    """Samples of the environment-to-mean transform ratio at renewal times.

    Tags use the directed alphabet, so forcing never leaves the directed
    event.  For an iid law the denominator is the exact tag-conditional
    annealed value (the mean-field run of the same DP), giving mean one at
    every renewal; at delta = 0 numerator and denominator run bitwise equal.
    For mixing laws pass denominator_replicas > 0 to average dedicated
    environment draws instead (the mean field is then only approximate).
    """
    s = np.asarray(s, dtype=np.int64)
    if couple_prob is None:
        couple_prob = min(law.kappa, 0.999 / law.d)
    if couple_prob > law.kappa + 1e-15:
        raise InvalidCoupling(
            f"couple_prob={couple_prob} above the ellipticity floor {law.kappa}"
        )
    _check_coupling(law.d, couple_prob, "directed", s)
    if run_symbol is None:
        run_symbol = int(directed_indices(s)[0])
    p_run = couple_prob**L
    if horizon is None:
        # ~exp(-10) chance of a run not appearing within each allotted span,
        # so conditioning on completion leaves no measurable selection bias
        horizon = int(n_renewals * (L + math.ceil(10.0 / p_run)))
    if law.mixing is not None and denominator_replicas == 0:
        raise UnsupportedLaw(
            "mixing law: the mean-field denominator is exact only for iid; "
            "pass denominator_replicas"
        )

    ratios = np.full((replicas, n_renewals), np.nan)
    taus_out = np.full((replicas, n_renewals), -1, dtype=np.int64)
    rejected = 0
    for r in range(replicas):
        tags = sample_coupling_tags(
            law.d, horizon, couple_prob, seed, "directed", s, stream_index=r
        )
        rec = detect_renewals(tags, L, run_symbol, max_count=n_renewals)
        if rec.taus.size < n_renewals:
            rejected += 1
        if rec.taus.size == 0:
            continue
        m = int(rec.taus[-1])

        # sample only what the walk can reach by time m; site keying makes
        # the window choice invisible to the kernel values
        if law.d == 2 and law.mixing is None:
            def draw_field(sd: int) -> np.ndarray:
                return _triangle_field(law, s, m, sd)
        else:
            box = directed_box(law.d, s, m)

            def draw_field(sd: int) -> np.ndarray:
                return sample_environment(law, box, sd).kernels

        field = draw_field(rng.subseed(seed, rng.TAG_ENV, r))
        harvest = {int(t) for t in rec.taus}
        if denominator_replicas == 0 and law.d == 2:
            log_num = _conditional_directed_logvalue(
                field, tags[:m], s, theta, couple_prob, harvest
            )
            log_den = _meanfield_directed_logvalue_d2(
                law.mean, tags[:m], s, theta, couple_prob, harvest
            )
        elif denominator_replicas == 0:
            log_num = _conditional_directed_logvalue(
                field, tags[:m], s, theta, couple_prob, harvest
            )
            mean_field = np.broadcast_to(law.mean, field.shape)
            log_den = _conditional_directed_logvalue(
                mean_field, tags[:m], s, theta, couple_prob, harvest
            )
        else:
            log_num = _conditional_directed_logvalue(
                field, tags[:m], s, theta, couple_prob, harvest
            )
            acc = {int(t): [] for t in rec.taus}
            for j in range(denominator_replicas):
                fj = draw_field(rng.subseed(seed, rng.TAG_DENOM, r * 65536 + j))
                lv = _conditional_directed_logvalue(
                    fj, tags[:m], s, theta, couple_prob, harvest
                )
                for t, v in lv.items():
                    acc[t].append(v)
            log_den = {}
            for t, vs in acc.items():
                vs = np.asarray(vs)
                shift = vs.max()
                log_den[t] = shift + math.log(np.mean(np.exp(vs - shift)))
        for k, t in enumerate(rec.taus):
            taus_out[r, k] = t
            ratios[r, k] = math.exp(log_num[int(t)] - log_den[int(t)])
    good = ~np.isnan(ratios)
    mean = np.array(
        [ratios[good[:, k], k].mean() if good[:, k].any() else np.nan for k in range(n_renewals)]
    )
    stderr = np.array(
        [
            ratios[good[:, k], k].std(ddof=1) / math.sqrt(good[:, k].sum())
            if good[:, k].sum() > 1
            else np.nan
            for k in range(n_renewals)
        ]
    )
    return RenewalRatios(
        ratios=ratios,
        taus=taus_out,
        rejected=rejected,
        horizon=horizon,
        mean=mean,
        stderr=stderr,
    )


# -- velocity tilting ----------------------------------------------------------


@dataclasses.dataclass
class TiltedKernel:
    z: np.ndarray  # target velocity, |z|_1 < 1
    scale: float  # the unique C with unit total tilted mass
    decay: float  # D = sqrt(C); log D is the rate cost of the tilt
    u: np.ndarray  # (2d,) tilted step law, mean exactly z
    theta: np.ndarray  # (d,) tilt with u(e) = D m(e) exp(<theta, e>)
    mean: np.ndarray  # (2d,) the base mean kernel

    @property
    def d(self) -> int:
        return self.z.size


def _tilt_mass(C: float, z: np.ndarray, prod_pm: np.ndarray) -> float:
    return float(np.sqrt(z * z + 4.0 * C * prod_pm).sum())


def solve_tilt_scale(d: int, mean_kernel, z) -> float:
    """The unique C > 0 with sum_j sqrt(z_j^2 + 4 C m_j^+ m_j^-) = 1."""
    mean = np.asarray(mean_kernel, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).reshape(d)
    if np.abs(z).sum() >= 1.0 - 1e-12:
        raise ZNotInterior(f"|z|_1 = {np.abs(z).sum()} must be strictly below 1")
    prod_pm = mean[0::2] * mean[1::2]
    hi = 1.0
    while _tilt_mass(hi, z, prod_pm) < 1.0:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _tilt_mass(mid, z, prod_pm) < 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(1.0, hi):
            break
    C = 0.5 * (lo + hi)
    for _ in range(4):  # Newton polish; f is smooth and increasing in C
        root = np.sqrt(z * z + 4.0 * C * prod_pm)
        f = float(root.sum()) - 1.0
        fp = float((2.0 * prod_pm / root).sum())
        if fp <= 0:
            break
        C -= f / fp
    return float(C)


def build_tilt(d: int, mean_kernel, z) -> TiltedKernel:
    """Tilted step law with mean exactly z, and the tilt that realizes it."""
    mean = np.asarray(mean_kernel, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).reshape(d)
    C = solve_tilt_scale(d, mean, z)
    prod_pm = mean[0::2] * mean[1::2]
    root = np.sqrt(z * z + 4.0 * C * prod_pm)
    u = np.empty(2 * d)
    u[0::2] = 0.5 * (z + root)
    u[1::2] = 0.5 * (-z + root)
    D = math.sqrt(C)
    theta = np.log(u[0::2] / (D * mean[0::2]))
    return TiltedKernel(z=z, scale=C, decay=D, u=u, theta=theta, mean=mean)


def tilt_identity_check(
    law: EnvLaw,
    z,
    theta,
    n: int,
    variant: str = "annealed",
    env: Environment | None = None,
    enumeration_cap: int = 200_000,
    corrupt_tilt: float = 0.0,
) -> dict:
    """Path-by-path transfer identity between the tilted walk and the base
    walk, by exhaustive enumeration.

    For every n-step path (annealed over the environment, or in a fixed one):

        prod u(step) * exp(<theta, end>) * E[prod ratio]
            = D^n exp(<theta + theta_z, end>) * E[prod omega],

    where ratio = omega / mean.  Returns the worst per-path relative gap and
    the gap of the path sums.  corrupt_tilt shifts the first tilt coordinate,
    a control that a downstream consumer of this check would catch.
    """
    import itertools

    d = law.d
    theta_in = np.asarray(theta, dtype=np.float64)
    single = theta_in.ndim <= 1
    thetas = theta_in.reshape(-1, d)
    tilt = build_tilt(d, law.mean, z)
    if corrupt_tilt:
        bad = tilt.theta.copy()
        bad[0] += corrupt_tilt
        tilt = dataclasses.replace(tilt, theta=bad)
    n_paths = (2 * d) ** n
    if n_paths > enumeration_cap:
        raise EnumerationTooLarge(f"(2d)^n = {n_paths} exceeds cap {enumeration_cap}")
    if variant not in ("annealed", "quenched"):
        raise ValueError(f"variant {variant!r}")
    if variant == "annealed" and not law.is_enumerable:
        raise UnsupportedLaw("annealed enumeration needs an iid law")
    if variant == "quenched" and env is None:
        raise ValueError("quenched variant needs an environment")
    log_mean = np.log(law.mean)
    log_u = np.log(tilt.u)
    from .pathspace import quenched_path_prob

    # path weights do not depend on theta; harvest them once, then evaluate
    # the identity on every requested tilt point
    ends = np.empty((n_paths, d))
    w_omega = np.empty(n_paths)
    log_u_prod = np.empty(n_paths)
    log_m_prod = np.empty(n_paths)
    for i, seq in enumerate(itertools.product(range(2 * d), repeat=n)):
        traj = path_from_steps(d, seq)
        ends[i] = traj.end
        if variant == "annealed":
            w_omega[i] = path_weight_exact(law, traj)
        else:
            w_omega[i] = quenched_path_prob(env, traj)
        idx = list(seq)
        log_u_prod[i] = log_u[idx].sum()
        log_m_prod[i] = log_mean[idx].sum()
    w_ratio = w_omega * np.exp(-log_m_prod)
    per_theta = []
    for th in thetas:
        lhs_paths = np.exp(log_u_prod + ends @ th) * w_ratio
        rhs_paths = tilt.decay**n * np.exp(ends @ (th + tilt.theta)) * w_omega
        lhs_sum = float(lhs_paths.sum())
        rhs_sum = float(rhs_paths.sum())
        denom = np.maximum(np.maximum(np.abs(lhs_paths), np.abs(rhs_paths)), 1e-300)
        worst = float(np.max(np.abs(lhs_paths - rhs_paths) / denom))
        total = max(abs(lhs_sum), abs(rhs_sum), 1e-300)
        per_theta.append(
            {
                "theta": th.copy(),
                "lhs": lhs_sum,
                "rhs": rhs_sum,
                "abs_sum_gap": abs(lhs_sum - rhs_sum),
                "sum_gap": abs(lhs_sum - rhs_sum) / total,
                "max_path_gap": worst,
            }
        )
    if single:
        out = dict(per_theta[0])
        out.pop("theta")
        out["tilt"] = tilt
        out["paths"] = n_paths
        return out
    return {
        "per_theta": per_theta,
        "max_sum_gap": max(p["sum_gap"] for p in per_theta),
        "max_abs_sum_gap": max(p["abs_sum_gap"] for p in per_theta),
        "max_path_gap": max(p["max_path_gap"] for p in per_theta),
        "tilt": tilt,
        "paths": n_paths,
    }


# -- the tilted auxiliary walk and its scaffold ---------------------------------


@dataclasses.dataclass
class ScaffoldScan:
    taus: np.ndarray  # accepted renewal times
    candidates: int  # record times examined
    undecided: int  # clean candidates too close to the horizon to accept
    min_block_gap: float  # smallest inter-renewal displacement along ell


def _cone_all(rel: np.ndarray, zeta, ell: np.ndarray) -> bool:
    # integer arithmetic throughout: with zeta = p/q the membership test
    # <v,ell> >= zeta |ell| |v| squares to q^2 a^2 >= p^2 |ell|^2 |v|^2
    from fractions import Fraction

    z = zeta if isinstance(zeta, Fraction) else Fraction(zeta).limit_denominator(10**9)
    a = rel @ ell
    if (a < 0).any():
        return False
    ell2 = int(ell @ ell)
    v2 = (rel * rel).sum(axis=1)
    return bool((z.denominator**2 * a * a >= z.numerator**2 * ell2 * v2).all())


def scaffold_scan(positions: np.ndarray, ell, zeta, margin: int = 0) -> ScaffoldScan:
    """Record-time renewal scan of one path.

    A record time j (the level <X_j, ell> strictly above all past levels) is
    accepted when the remaining path never drops below that level and stays
    in the forward cone at X_j, with at least margin steps of future to
    witness it; clean candidates closer to the horizon stay undecided.
    """
    ell = np.asarray(ell, dtype=np.int64)
    lev = positions @ ell
    n = lev.size - 1
    taus = []
    candidates = 0
    undecided = 0
    prev_max = lev[0]
    for j in range(1, n + 1):
        is_record = lev[j] > prev_max
        prev_max = max(prev_max, lev[j])
        if not is_record:
            continue
        candidates += 1
        if (lev[j + 1 :] < lev[j]).any():
            continue
        rel = positions[j + 1 :] - positions[j]
        if rel.shape[0] and not _cone_all(rel, zeta, ell):
            continue
        if n - j >= margin:
            taus.append(j)
        else:
            undecided += 1
    taus = np.asarray(taus, dtype=np.int64)
    gaps = (
        np.diff(np.concatenate([[lev[0]], lev[taus]])).astype(np.float64)
        if taus.size
        else np.array([])
    )
    return ScaffoldScan(
        taus=taus,
        candidates=candidates,
        undecided=undecided,
        min_block_gap=float(gaps.min()) if gaps.size else math.nan,
    )


def simulate_tilted(
    tilt: TiltedKernel,
    n_steps: int,
    replicas: int,
    seed: int,
    couple_prob: float | None = None,
    zeta=None,
    ell=None,
    margin: int | None = None,
) -> dict:
    """Walks with the tilted step law, coupled on the full tag alphabet, plus
    a renewal scaffold scan along the steepest drift axis.

    The tilted walk is spatially homogeneous, so steps are iid and the whole
    batch vectorizes.  Scan acceptance is horizon-limited; undecided
    candidates are reported, not silently accepted.
    """
    d = tilt.d
    if couple_prob is None:
        couple_prob = min(1.0 / (2 * d), 0.5 * float(tilt.u.min()))
    tags = sample_coupling_tags(d, n_steps, couple_prob, seed, "full", replicas=replicas)
    resid = residual_kernel(tilt.u, couple_prob, "full")
    gen = rng.stream(seed, rng.TAG_WALK, 0)
    uu = gen.random((replicas, n_steps))
    cdf = np.cumsum(resid)
    cdf /= cdf[-1]
    free_steps = np.minimum(
        np.searchsorted(cdf, uu.ravel(), side="right"), 2 * d - 1
    ).reshape(replicas, n_steps)
    steps = np.where(tags == FREE, free_steps, tags).astype(np.int8)
    moves = direction_vectors(d)
    disp = moves[steps]  # (R, n, d)
    positions = np.concatenate(
        [np.zeros((replicas, 1, d), dtype=np.int64), np.cumsum(disp, axis=1)], axis=1
    )
    if ell is None:
        ell = moves[int(np.argmax(moves @ tilt.z))]
    if zeta is None:
        from fractions import Fraction

        zeta = Fraction(1, 10)
    if margin is None:
        margin = max(10, n_steps // 5)
    scans = [scaffold_scan(positions[r], ell, zeta, margin=margin) for r in range(replicas)]
    endpoints = positions[:, -1, :]
    vel = endpoints.mean(axis=0) / n_steps
    vel_se = endpoints.std(axis=0, ddof=1) / math.sqrt(replicas) / n_steps
    counts = np.array([sc.taus.size for sc in scans])
    return {
        "endpoints": endpoints,
        "tags": tags,
        "steps": steps,
        "velocity": vel,
        "velocity_stderr": vel_se,
        "target_velocity": tilt.z,
        "couple_prob": couple_prob,
        "ell": np.asarray(ell),
        "scans": scans,
        "renewal_counts": counts,
        "undecided_total": int(sum(sc.undecided for sc in scans)),
    }


# -- closed-form exit check ------------------------------------------------------


def exit_probability(m: float, k: int) -> float:
    """P(hit +k before -k from 0) for the +-1 chain with up-probability
    p = 1 - q, q = (-m + sqrt(m^2 + 1)) / 2; the stable form of the ratio
    answer 1 / (1 + (q/p)^k)."""
    if m < 0:
        raise ValueError("drift parameter m must be nonnegative")
    q = 0.5 * (-m + math.sqrt(m * m + 1.0))
    p = 1.0 - q
    return 1.0 / (1.0 + (q / p) ** k)


def exit_probability_mc(m: float, k: int, replicas: int, seed: int) -> tuple[float, float]:
    """Monte Carlo of the same chain, (estimate, stderr)."""
    q = 0.5 * (-m + math.sqrt(m * m + 1.0))
    p = 1.0 - q
    gen = rng.stream(seed, rng.TAG_RUIN, k)
    pos = np.zeros(replicas, dtype=np.int64)
    alive = np.ones(replicas, dtype=bool)
    hit_up = np.zeros(replicas, dtype=bool)
    # geometric tails: a fixed chunk loop drains the batch quickly
    while alive.any():
        u = gen.random((64, alive.sum()))
        sub = np.where(alive)[0]
        cur = pos[sub]
        done = np.zeros(sub.size, dtype=bool)
        for row in u:
            step = np.where(row < p, 1, -1)
            cur = np.where(done, cur, cur + step)
            up = cur >= k
            down = cur <= -k
            newly = (~done) & (up | down)
            hit_up[sub[newly]] = up[newly]
            done |= up | down
            if done.all():
                break
        pos[sub] = cur
        alive[sub] = ~done
    est = hit_up.mean()
    se = math.sqrt(max(est * (1 - est), 1e-300) / replicas)
    return float(est), float(se)


# -- transforms of the tilted walk ----------------------------------------------


def tilted_annealed_mgf(
    law: EnvLaw, tilt: TiltedKernel, theta, n: int, replicas: int, seed: int
) -> tuple[float, float]:
    """(1/n) log of the tilted-path average of exp(<theta, X_n>) times the
    exact annealed ratio correction; (value, stderr).  Paths are drawn once
    per seed, so different theta share them (common random numbers)."""
    if not law.is_enumerable:
        raise UnsupportedLaw("per-path annealed corrections need an iid law")
    d = law.d
    theta = np.asarray(theta, dtype=np.float64).reshape(d)
    gen = rng.stream(seed, rng.TAG_PATHS, n)
    uu = gen.random((replicas, n))
    cdf = np.cumsum(tilt.u)
    cdf /= cdf[-1]
    steps = np.minimum(
        np.searchsorted(cdf, uu.ravel(), side="right"), 2 * d - 1
    ).reshape(replicas, n)
    moves = direction_vectors(d)
    log_mean = np.log(law.mean)
    w = np.empty(replicas)
    for r in range(replicas):
        traj = path_from_steps(d, steps[r])
        end = traj.end.astype(np.float64)
        ratio = path_weight_exact(law, traj) / math.exp(float(log_mean[steps[r]].sum()))
        w[r] = math.exp(float(theta @ end)) * ratio
    mean = w.mean()
    value = math.log(mean) / n
    se = float(w.std(ddof=1) / (mean * math.sqrt(replicas)) / n) if replicas > 1 else 0.0
    return float(value), se


def tilted_mgf_identity_check(
    law: EnvLaw, z, thetas, n: int, replicas: int, seed: int
) -> dict:
    """Per-theta gap between the tilted transform and
    log D + annealed transform at theta + theta_z, with joint stderr."""
    tilt = build_tilt(law.d, law.mean, z)
    rows = []
    for theta in np.atleast_2d(np.asarray(thetas, dtype=np.float64)):
        lhs, lse = tilted_annealed_mgf(law, tilt, theta, n, replicas, seed)
        rhs = lattice_log_mgf_annealed(law, theta + tilt.theta, n, replicas, seed)
        gap = lhs - (math.log(tilt.decay) + rhs.value)
        rows.append((gap, math.hypot(lse, rhs.ci)))
    gaps = np.array([r[0] for r in rows])
    ses = np.array([r[1] for r in rows])
    return {
        "gaps": gaps,
        "stderr": ses,
        "max_sigma": float(np.max(np.abs(gaps) / np.maximum(ses, 1e-300))),
        "tilt": tilt,
    }


def tilted_mgf_hessian(
    law: EnvLaw, z, theta0, n: int, replicas: int, seed: int, h: float = 0.05
) -> dict:
    """Finite-difference Hessian of the tilted transform at theta0 with
    common random numbers; reports the smallest eigenvalue."""
    d = law.d
    tilt = build_tilt(d, law.mean, z)
    theta0 = np.asarray(theta0, dtype=np.float64).reshape(d)

    def val(th):
        return tilted_annealed_mgf(law, tilt, th, n, replicas, seed)[0]

    H = np.empty((d, d))
    f0 = val(theta0)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        for j in range(i, d):
            ej = np.zeros(d)
            ej[j] = h
            if i == j:
                H[i, i] = (val(theta0 + ei) - 2 * f0 + val(theta0 - ei)) / (h * h)
            else:
                H[i, j] = H[j, i] = (
                    val(theta0 + ei + ej)
                    - val(theta0 + ei - ej)
                    - val(theta0 - ei + ej)
                    + val(theta0 - ei - ej)
                ) / (4 * h * h)
    eig = np.linalg.eigvalsh(H)
    return {"hessian": H, "eigmin": float(eig[0]), "tilt": tilt}


def rate_transfer_check(
    d: int,
    mean_kernel,
    z,
    xs,
    theta_lo: float = -4.0,
    theta_hi: float = 4.0,
    points: int = 2001,
) -> dict:
    """Mean-field (zero-disorder) rate transfer: the conjugate of the tilted
    walk's log-transform must equal the base conjugate shifted by
    log D + <theta_z, x>, exactly in the limit and to grid accuracy here.

    Both transforms are closed-form for a homogeneous walk, so the only
    error is the Legendre grid; d = 1 only (dense grids stay cheap)."""
    if d != 1:
        raise ValueError("closed-form transfer check is wired for d = 1")
    mean = np.asarray(mean_kernel, dtype=np.float64)
    tilt = build_tilt(d, mean, z)
    thetas = np.linspace(theta_lo, theta_hi, points).reshape(-1, 1)
    lam_base = np.log(mean[0] * np.exp(thetas[:, 0]) + mean[1] * np.exp(-thetas[:, 0]))
    lam_tilt = np.log(tilt.u[0] * np.exp(thetas[:, 0]) + tilt.u[1] * np.exp(-thetas[:, 0]))
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 1)
    base = legendre_transform(thetas, lam_base, xs)
    tilted = legendre_transform(thetas, lam_tilt, xs)
    lhs = tilted.star + math.log(tilt.decay) + (xs[:, 0] * tilt.theta[0])
    gap = np.abs(lhs - base.star)
    return {
        "xs": xs[:, 0],
        "base_rate": base.star,
        "tilted_rate": tilted.star,
        "gap": gap,
        "max_gap": float(gap.max()),
        "edge": np.logical_or(base.edge, tilted.edge),
        "tilt": tilt,
    }
