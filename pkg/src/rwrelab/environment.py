"""Random environments of nearest-neighbor jump kernels on Z^d.

A law assigns to every lattice site a probability kernel over the 2d unit
steps, uniformly elliptic with floor kappa.  Site kernels are realized as

    omega(x, e) = m_e * (1 + delta * c_e * V_x),

where m is the mean kernel, V_x is a scalar latent variable per site with
values in [-1, 1] and mean zero, and the direction loadings c satisfy
sum_e m_e c_e = 0 and max_e |c_e| = 1.  Normalization therefore holds
exactly at every site, the entrywise mean equals m, and the disorder (the
smallest epsilon with omega/m in [1-eps, 1+eps] almost surely) is exactly
delta.

Latent variables are either independent across sites (iid laws) or a
weighted average of iid innovations over an l1-ball of radius floor(L0/2)
(mixing laws), which makes sites at l1-distance greater than L0 independent
by construction while nearby covariances obey |cov| <= C*exp(-g*dist)*Var.

All draws are keyed by (seed, site), so disjoint windows agree at shared
sites and lazy sampling is persistent.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import math
import warnings
from typing import NamedTuple

import numpy as np

from . import rng
from .errors import (
    BadMixingRange,
    InfeasibleDisorder,
    KappaOutOfRange,
    WindowExhausted,
)

FAMILIES = ("two-point", "uniform-interval", "finite-support")
BOUNDARY_POLICIES = ("mean-fill", "periodic", "strict")

_NORM_TOL = 1e-12


class Direction(NamedTuple):
    """One of the 2d unit steps, canonical index 2*axis + (sign < 0)."""

    axis: int
    sign: int

    @property
    def index(self) -> int:
        return 2 * self.axis + (0 if self.sign > 0 else 1)

    def vector(self, d: int) -> np.ndarray:
        v = np.zeros(d, dtype=np.int64)
        v[self.axis] = self.sign
        return v


def directions(d: int) -> tuple[Direction, ...]:
    return tuple(Direction(axis, sign) for axis in range(d) for sign in (1, -1))


def direction_vectors(d: int) -> np.ndarray:
    """(2d, d) int array of unit steps in canonical order."""
    out = np.zeros((2 * d, d), dtype=np.int64)
    for k, dr in enumerate(directions(d)):
        out[k, dr.axis] = dr.sign
    return out


def direction_index(d: int, step) -> int:
    step = np.asarray(step)
    (axis,) = np.nonzero(step)[0:1]
    if axis.size != 1 or abs(int(step[axis[0]])) != 1 or int(np.abs(step).sum()) != 1:
        raise ValueError(f"not a unit step: {step}")
    a = int(axis[0])
    return 2 * a + (0 if step[a] > 0 else 1)


@dataclasses.dataclass
class SiteKernel:
    """Jump distribution at one site, canonical direction order."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or self.probs.size % 2:
            raise ValueError("kernel needs one probability per signed direction")

    @property
    def d(self) -> int:
        return self.probs.size // 2

    def prob(self, direction: Direction) -> float:
        return float(self.probs[direction.index])

    def as_dict(self) -> dict[Direction, float]:
        return {dr: float(self.probs[dr.index]) for dr in directions(self.d)}

    def check(self, kappa: float) -> list[str]:
        problems = []
        if abs(self.probs.sum() - 1.0) > _NORM_TOL:
            problems.append(f"sum {self.probs.sum()!r} != 1")
        if (self.probs < kappa - 1e-15).any():
            problems.append(f"entry below kappa={kappa}")
        return problems


@dataclasses.dataclass
class MixingSpec:
    """Finite-range dependence: innovations shared within radius floor(L0/2)."""

    L0: int
    g: float
    C: float
    radius: int
    offsets: np.ndarray  # (K, d) int, l1-norm <= radius
    weights: np.ndarray  # (K,), positive, sums to 1
    alpha: float  # realized decay rate of the weights


@dataclasses.dataclass
class EnvLaw:
    """Distribution of one site kernel plus the spatial dependence structure."""

    d: int
    kappa: float
    mean: np.ndarray
    family: str
    delta: float
    loadings: np.ndarray
    latent_points: tuple[tuple[float, float], ...] | None = None
    mixing: MixingSpec | None = None

    # -- latent variable facts ------------------------------------------------

    def latent_absmax(self) -> float:
        if self.family == "finite-support":
            return max(abs(v) for v, _ in self.latent_points)
        return 1.0

    def latent_moment(self, k: int) -> float:
        """E[V^k] of one innovation."""
        if k == 0:
            return 1.0
        if self.family == "two-point":
            return 1.0 if k % 2 == 0 else 0.0
        if self.family == "uniform-interval":
            return 1.0 / (k + 1) if k % 2 == 0 else 0.0
        return float(sum(w * v**k for v, w in self.latent_points))

    @property
    def is_enumerable(self) -> bool:
        """Exact per-site moments available (iid laws of any family)."""
        return self.mixing is None or self.mixing.radius == 0

    def site_moment(self, counts, extra_dir: int | None = None) -> float:
        """E[prod_e omega(0,e)^{a_e}] for one site of an iid law.

        counts: length-2d integer array of exponents a_e; extra_dir adds one
        more factor of omega(0, extra_dir).  Exact: the product is a
        polynomial in the latent variable, integrated term by term.
        """
        a = np.asarray(counts, dtype=np.int64).copy()
        if extra_dir is not None:
            a[extra_dir] += 1
        poly = np.array([1.0])
        scale = 1.0
        for e in np.nonzero(a)[0]:
            k = int(a[e])
            scale *= float(self.mean[e]) ** k
            b = self.delta * float(self.loadings[e])
            binom = np.array([math.comb(k, j) * b**j for j in range(k + 1)])
            poly = np.convolve(poly, binom)
        return scale * float(
            sum(cj * self.latent_moment(j) for j, cj in enumerate(poly))
        )

    def kernel_vertices(self) -> list[np.ndarray]:
        """Extreme site kernels (latent at +-absmax)."""
        v = self.latent_absmax()
        return [
            self.mean * (1.0 + self.delta * self.loadings * v),
            self.mean * (1.0 - self.delta * self.loadings * v),
        ]

    def min_entry(self) -> float:
        v = self.latent_absmax()
        return float(
            (self.mean * (1.0 - self.delta * np.abs(self.loadings) * v)).min()
        )


def _canonical_mean(d: int, mean_kernel) -> np.ndarray:
    if isinstance(mean_kernel, SiteKernel):
        m = mean_kernel.probs
    elif isinstance(mean_kernel, dict):
        m = np.zeros(2 * d)
        for dr, p in mean_kernel.items():
            m[dr.index] = p
    else:
        m = np.asarray(mean_kernel, dtype=np.float64)
    if m.shape != (2 * d,):
        raise ValueError(f"mean kernel needs {2 * d} entries, got shape {m.shape}")
    if (m <= 0).any():
        raise ValueError("mean kernel entries must be positive")
    if abs(m.sum() - 1.0) > 1e-9:
        raise ValueError(f"mean kernel sums to {m.sum()!r}, expected 1")
    return m / m.sum()


def _loadings_for(mean: np.ndarray) -> np.ndarray:
    # signs +1 on positive directions, -1 on negatives; the heavier side is
    # scaled down so sum_e m_e c_e = 0 while the lighter side keeps |c| = 1
    c = np.empty_like(mean)
    mp = mean[0::2].sum()
    mn = mean[1::2].sum()
    if mp >= mn:
        c[0::2] = mn / mp
        c[1::2] = -1.0
    else:
        c[0::2] = 1.0
        c[1::2] = -(mp / mn)
    return c


def _validate_latent_support(latent_support) -> tuple[tuple[float, float], ...]:
    pts = tuple((float(v), float(w)) for v, w in latent_support)
    if not pts:
        raise ValueError("finite-support family needs at least one point")
    if any(w <= 0 for _, w in pts):
        raise ValueError("latent weights must be positive")
    tot = sum(w for _, w in pts)
    pts = tuple((v, w / tot) for v, w in pts)
    if max(abs(v) for v, _ in pts) > 1.0 + 1e-12:
        raise ValueError("latent support must lie in [-1, 1]")
    m1 = sum(w * v for v, w in pts)
    if abs(m1) > 1e-12:
        raise ValueError(f"latent support must have mean zero, got {m1!r}")
    return pts


def make_iid_law(
    d: int,
    kappa: float,
    mean_kernel,
    family: str = "two-point",
    delta: float = 0.0,
    latent_support=None,
) -> EnvLaw:
    """Independent site kernels with disorder exactly delta."""
    if not 0 < kappa < 1.0 / (2 * d):
        raise KappaOutOfRange(f"kappa={kappa} outside (0, {1.0 / (2 * d)}) for d={d}")
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    if not 0 <= delta < 1:
        raise ValueError(f"delta={delta} outside [0, 1)")
    mean = _canonical_mean(d, mean_kernel)
    pts = _validate_latent_support(latent_support) if family == "finite-support" else None
    law = EnvLaw(
        d=d,
        kappa=float(kappa),
        mean=mean,
        family=family,
        delta=float(delta),
        loadings=_loadings_for(mean),
        latent_points=pts,
    )
    if law.min_entry() < kappa - 1e-15:
        raise InfeasibleDisorder(
            f"delta={delta} drives a kernel entry to {law.min_entry():.6g} < kappa={kappa}"
        )
    return law


def _l1_ball_offsets(d: int, radius: int) -> np.ndarray:
    pts = [
        p
        for p in itertools.product(range(-radius, radius + 1), repeat=d)
        if sum(abs(q) for q in p) <= radius
    ]
    return np.asarray(sorted(pts), dtype=np.int64)


def _weight_autocorr_ok(offsets, weights, L0, g, C, d) -> bool:
    # exact autocorrelation of the finite weight vector at every lag <= L0
    wmap = {tuple(o): w for o, w in zip(offsets, weights)}
    var = sum(w * w for w in weights)
    for lag in _l1_ball_offsets(d, L0):
        dist = int(np.abs(lag).sum())
        if dist == 0:
            continue
        cov = sum(
            w * wmap.get(tuple(np.asarray(o) - lag), 0.0)
            for o, w in zip(offsets, weights)
        )
        if abs(cov) > C * math.exp(-g * dist) * var + 1e-15:
            return False
    return True


def make_mixing_law(
    d: int,
    kappa: float,
    mean_kernel,
    family: str = "two-point",
    delta: float = 0.0,
    L0: int = 1,
    g: float = 1.0,
    C: float = 1.0,
    latent_support=None,
) -> EnvLaw:
    """Finite-range dependent site kernels.

    Sites at l1-distance > L0 are independent (their latent averages share no
    innovation); within L0 the covariance obeys |cov| <= C*exp(-g*dist)*Var,
    enforced by widening the weight decay until the exact autocorrelation of
    the weight vector satisfies the envelope.
    """
    if not isinstance(L0, int) or L0 < 1:
        raise BadMixingRange(f"L0={L0!r} must be a positive integer")
    if g <= 0 or C <= 0:
        raise BadMixingRange(f"need g > 0 and C > 0, got g={g}, C={C}")
    law = make_iid_law(d, kappa, mean_kernel, family, delta, latent_support)
    radius = L0 // 2
    offsets = _l1_ball_offsets(d, radius)
    alpha = g
    for _ in range(80):
        w = np.exp(-alpha * np.abs(offsets).sum(axis=1).astype(np.float64))
        w = w / w.sum()
        if radius == 0 or _weight_autocorr_ok(offsets, w, L0, g, C, d):
            break
        alpha *= 1.5
    else:
        raise BadMixingRange(f"cannot meet covariance envelope C={C}, g={g}")
    law.mixing = MixingSpec(
        L0=L0, g=float(g), C=float(C), radius=radius, offsets=offsets, weights=w, alpha=alpha
    )
    return law


# -- sampling -----------------------------------------------------------------


def _latent_from_uniform(law: EnvLaw, u: np.ndarray) -> np.ndarray:
    if law.family == "two-point":
        return np.where(u < 0.5, -1.0, 1.0)
    if law.family == "uniform-interval":
        return 2.0 * u - 1.0
    values = np.array([v for v, _ in law.latent_points])
    cum = np.cumsum([w for _, w in law.latent_points])
    return values[np.searchsorted(cum, u, side="right").clip(0, values.size - 1)]


def site_latents(law: EnvLaw, coords, seed: int) -> np.ndarray:
    """Latent variable V_x for arbitrary integer coordinates (..., d)."""
    coords = np.asarray(coords, dtype=np.int64)
    if law.mixing is None or law.mixing.radius == 0:
        return _latent_from_uniform(law, rng.site_uniforms(seed, rng.TAG_ENV, coords))
    V = np.zeros(coords.shape[:-1], dtype=np.float64)
    for off, w in zip(law.mixing.offsets, law.mixing.weights):
        u = rng.site_uniforms(seed, rng.TAG_ENV, coords + off)
        V += w * _latent_from_uniform(law, u)
    return V


def site_kernels(law: EnvLaw, coords, seed: int) -> np.ndarray:
    """Kernels at arbitrary coordinates, shape (..., 2d).  Pure in (law, seed, site)."""
    V = site_latents(law, coords, seed)
    return law.mean * (1.0 + law.delta * law.loadings * V[..., None])


@dataclasses.dataclass
class Environment:
    """Realized kernels on a finite window (inclusive box [lo, hi])."""

    d: int
    lo: np.ndarray
    hi: np.ndarray
    kernels: np.ndarray  # (*window_shape, 2d)
    boundary: str = "mean-fill"
    mean_kernel: np.ndarray | None = None
    law: EnvLaw | None = None
    seed: int | None = None
    clamp_count: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(h - l + 1) for l, h in zip(self.lo, self.hi))

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool((x >= self.lo).all() and (x <= self.hi).all())

    def kernel_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        rel = x - self.lo
        if ((rel >= 0) & (rel < self.shape)).all():
            return self.kernels[tuple(rel)]
        if self.boundary == "periodic":
            return self.kernels[tuple(rel % self.shape)]
        if self.boundary == "mean-fill":
            return self.mean_kernel
        raise WindowExhausted(f"site {tuple(int(v) for v in x)} outside window")

    def kernel_field(self, lo, hi) -> np.ndarray:
        """Kernels over the box [lo, hi], boundary policy applied. (*box, 2d)."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        axes = [np.arange(l, h + 1) for l, h in zip(lo, hi)]
        grids = np.meshgrid(*axes, indexing="ij")
        rel = np.stack(grids, axis=-1) - self.lo
        inside = np.logical_and(rel >= 0, rel < np.asarray(self.shape)).all(axis=-1)
        if self.boundary == "strict" and not inside.all():
            raise WindowExhausted("requested box leaves the sampled window")
        if self.boundary == "periodic":
            rel = rel % np.asarray(self.shape)
            inside = np.ones_like(inside)
        flat = np.ravel_multi_index(
            tuple(np.clip(rel[..., i], 0, self.shape[i] - 1) for i in range(self.d)),
            self.shape,
        )
        out = self.kernels.reshape(-1, 2 * self.d)[flat]
        if not inside.all():
            out[~inside] = self.mean_kernel
        return out

    def shifted(self, z) -> "Environment":
        """Environment translated by z: new kernel at x is the old one at x+z."""
        if self.boundary != "periodic":
            raise ValueError("shifted() needs a periodic window")
        z = np.asarray(z, dtype=np.int64)
        rolled = np.roll(self.kernels, shift=tuple(-z), axis=tuple(range(self.d)))
        return dataclasses.replace(self, kernels=rolled)


def sample_environment(
    law: EnvLaw, window, seed: int, boundary: str = "mean-fill"
) -> Environment:
    """Draw kernels over window=(lo, hi) (inclusive).  Pure in (law, window, seed)."""
    if boundary not in BOUNDARY_POLICIES:
        raise ValueError(f"boundary {boundary!r} not in {BOUNDARY_POLICIES}")
    lo = np.asarray(window[0], dtype=np.int64).reshape(law.d)
    hi = np.asarray(window[1], dtype=np.int64).reshape(law.d)
    if (hi < lo).any():
        raise ValueError("window hi must dominate lo")
    if law.mixing is not None:
        extent = int((hi - lo + 1).min())
        if law.mixing.L0 > extent:
            raise BadMixingRange(
                f"L0={law.mixing.L0} exceeds window extent {extent}"
            )
    axes = [np.arange(l, h + 1) for l, h in zip(lo, hi)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    kern = site_kernels(law, coords, seed)
    # defensive clamp; by construction it must never fire
    bad = (kern < law.kappa - 1e-15) | (kern > 1.0)
    clamp_count = int(bad.sum())
    if clamp_count:
        kern = np.clip(kern, law.kappa, 1.0)
        kern /= kern.sum(axis=-1, keepdims=True)
    return Environment(
        d=law.d,
        lo=lo,
        hi=hi,
        kernels=kern,
        boundary=boundary,
        mean_kernel=law.mean.copy(),
        law=law,
        seed=int(seed),
        clamp_count=clamp_count,
    )


# -- diagnostics --------------------------------------------------------------


def disorder_of(env_or_law, mean_kernel=None) -> float:
    """Smallest eps with omega/mean in [1-eps, 1+eps] (law: over the support;
    environment: over the sampled sites)."""
    if isinstance(env_or_law, EnvLaw):
        law = env_or_law
        return law.delta * float(np.abs(law.loadings).max()) * law.latent_absmax()
    env = env_or_law
    mean = _resolve_mean(env, mean_kernel)
    ratios = env.kernels / mean
    return float(np.abs(ratios - 1.0).max())


def imbalance_of(env_or_law, s, mean_kernel=None) -> float:
    """Disorder of the axial sums sum_j omega(x, s_j e_j)."""
    s = np.asarray(s, dtype=np.int64)
    if isinstance(env_or_law, EnvLaw):
        law = env_or_law
        idx = [2 * j + (0 if s[j] > 0 else 1) for j in range(law.d)]
        m_ax = law.mean[idx]
        num = abs(float((m_ax * law.loadings[idx]).sum()))
        return law.delta * num / float(m_ax.sum()) * law.latent_absmax()
    env = env_or_law
    mean = _resolve_mean(env, mean_kernel)
    idx = [2 * j + (0 if s[j] > 0 else 1) for j in range(env.d)]
    sums = env.kernels[..., idx].sum(axis=-1)
    return float(np.abs(sums / mean[idx].sum() - 1.0).max())


def _resolve_mean(env: Environment, mean_kernel) -> np.ndarray:
    if mean_kernel is not None:
        return _canonical_mean(env.d, mean_kernel)
    if env.mean_kernel is not None:
        return env.mean_kernel
    warnings.warn("mean kernel estimated from the sampled window", stacklevel=3)
    return env.kernels.reshape(-1, 2 * env.d).mean(axis=0)


def validate_environment(env: Environment, kappa: float | None = None) -> dict:
    """Report normalization and ellipticity violations site by site."""
    if kappa is None:
        kappa = env.law.kappa if env.law is not None else 0.0
    flat = env.kernels.reshape(-1, 2 * env.d)
    sums = flat.sum(axis=1)
    norm_bad = np.nonzero(np.abs(sums - 1.0) > _NORM_TOL)[0]
    ell_bad = np.nonzero((flat < kappa - 1e-15).any(axis=1))[0]
    def site_of(i):
        rel = np.array(np.unravel_index(i, env.shape), dtype=np.int64)
        return tuple(int(v) for v in rel + env.lo)
    return {
        "ok": norm_bad.size == 0 and ell_bad.size == 0 and env.clamp_count == 0,
        "normalization": [(site_of(i), float(sums[i] - 1.0)) for i in norm_bad],
        "ellipticity": [(site_of(i), float(flat[i].min())) for i in ell_bad],
        "clamp_count": env.clamp_count,
        "sites": int(flat.shape[0]),
        "kappa": float(kappa),
    }


# -- serialization ------------------------------------------------------------


def law_to_config(law: EnvLaw) -> str:
    lines = [
        f"d={law.d}",
        f"kappa={law.kappa!r}",
        "mean_kernel=" + ",".join(repr(float(v)) for v in law.mean),
        f"family={law.family}",
        f"delta={law.delta!r}",
    ]
    if law.latent_points is not None:
        lines.append(
            "latent_support="
            + ";".join(f"{v!r}:{w!r}" for v, w in law.latent_points)
        )
    if law.mixing is not None:
        lines += [
            f"mixing.L0={law.mixing.L0}",
            f"mixing.g={law.mixing.g!r}",
            f"mixing.C={law.mixing.C!r}",
        ]
    return "\n".join(lines) + "\n"


def law_from_config(text: str) -> EnvLaw:
    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    d = int(kv["d"])
    kappa = float(kv["kappa"])
    mean = [float(v) for v in kv["mean_kernel"].split(",")]
    family = kv.get("family", "two-point")
    delta = float(kv.get("delta", "0"))
    support = None
    if "latent_support" in kv:
        support = [
            (float(p.split(":")[0]), float(p.split(":")[1]))
            for p in kv["latent_support"].split(";")
        ]
    if "mixing.L0" in kv:
        return make_mixing_law(
            d, kappa, mean, family, delta,
            L0=int(kv["mixing.L0"]),
            g=float(kv.get("mixing.g", "1.0")),
            C=float(kv.get("mixing.C", "1.0")),
            latent_support=support,
        )
    return make_iid_law(d, kappa, mean, family, delta, latent_support=support)


def _dir_headers(d: int) -> list[str]:
    return [f"p_{'+' if dr.sign > 0 else '-'}{dr.axis + 1}" for dr in directions(d)]


def environment_to_csv(env: Environment, fh) -> None:
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "w", newline="")
        close = True
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(env.d)] + _dir_headers(env.d))
        axes = [np.arange(l, h + 1) for l, h in zip(env.lo, env.hi)]
        for site in itertools.product(*axes):
            rel = tuple(int(c - l) for c, l in zip(site, env.lo))
            row = [int(c) for c in site] + [repr(float(p)) for p in env.kernels[rel]]
            w.writerow(row)
    finally:
        if close:
            fh.close()


def environment_from_csv(fh, boundary: str = "strict") -> Environment:
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "r", newline="")
        close = True
    try:
        rows = list(csv.reader(fh))
    finally:
        if close:
            fh.close()
    header = rows[0]
    d = sum(1 for h in header if h.startswith("x_"))
    sites = np.array([[int(v) for v in r[:d]] for r in rows[1:]], dtype=np.int64)
    probs = np.array([[float(v) for v in r[d:]] for r in rows[1:]])
    lo, hi = sites.min(axis=0), sites.max(axis=0)
    shape = tuple(int(h - l + 1) for l, h in zip(lo, hi))
    kern = np.full((*shape, 2 * d), np.nan)
    for site, p in zip(sites, probs):
        kern[tuple(site - lo)] = p
    if np.isnan(kern).any():
        raise ValueError("csv does not cover the full window box")
    return Environment(
        d=d, lo=lo, hi=hi, kernels=kern, boundary=boundary,
        mean_kernel=kern.reshape(-1, 2 * d).mean(axis=0),
    )


def config_roundtrip(law: EnvLaw) -> EnvLaw:
    return law_from_config(law_to_config(law))
