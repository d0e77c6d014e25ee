"""Nearest-neighbor walks in a realized or lazily sampled environment."""
from __future__ import annotations

import csv
import dataclasses

import numpy as np

from . import rng
from .environment import EnvLaw, Environment, direction_vectors
from .errors import WindowExhausted


@dataclasses.dataclass
class Trajectory:
    start: np.ndarray  # (d,)
    steps: np.ndarray  # (n,) int8 direction indices, canonical order
    d: int
    eps_tags: np.ndarray | None = None  # (n,) int16 coupling tags, if any

    def __len__(self) -> int:
        return int(self.steps.size)

    def positions(self) -> np.ndarray:
        """(n+1, d) visited sites, start first."""
        moves = direction_vectors(self.d)[self.steps]
        out = np.empty((self.steps.size + 1, self.d), dtype=np.int64)
        out[0] = self.start
        np.cumsum(moves, axis=0, out=out[1:])
        out[1:] += self.start
        return out

    @property
    def end(self) -> np.ndarray:
        moves = direction_vectors(self.d)[self.steps]
        return self.start + moves.sum(axis=0)


@dataclasses.dataclass
class ProjectedTrajectory:
    """Image of a directed walk in the transverse lattice Z^{d-1}."""

    steps: np.ndarray  # (n, d-1)
    admissible: bool  # every step belonged to the directed set

    def positions(self) -> np.ndarray:
        n = self.steps.shape[0]
        out = np.zeros((n + 1, self.steps.shape[1]), dtype=np.int64)
        np.cumsum(self.steps, axis=0, out=out[1:])
        return out


def _batch_kernels(env: Environment, pos: np.ndarray) -> np.ndarray:
    rel = pos - env.lo
    shape = np.asarray(env.shape)
    inside = np.logical_and(rel >= 0, rel < shape).all(axis=1)
    if env.boundary == "strict":
        if not inside.all():
            bad = pos[np.argmin(inside)]
            raise WindowExhausted(f"walk left the window at {tuple(int(v) for v in bad)}")
    elif env.boundary == "periodic":
        rel = rel % shape
        inside = np.ones(pos.shape[0], dtype=bool)
    flat = np.ravel_multi_index(
        tuple(np.clip(rel[:, i], 0, shape[i] - 1) for i in range(env.d)), env.shape
    )
    kern = env.kernels.reshape(-1, 2 * env.d)[flat]
    if not inside.all():
        kern = kern.copy()
        kern[~inside] = env.mean_kernel
    return kern


def _choose(kern: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(kern, axis=1)
    # right-normalize so u ~ U[0,1) always lands in a bin
    cdf /= cdf[:, -1:]
    return np.minimum(
        (cdf < u[:, None]).sum(axis=1), kern.shape[1] - 1
    ).astype(np.int8)


def simulate_quenched_batch(
    env: Environment,
    start,
    n_steps: int,
    replicas: int,
    seed: int,
    stream_index: int = 0,
    record: bool = False,
):
    """Independent walks in one fixed environment.

    Returns endpoints (replicas, d), or (endpoints, steps) with steps
    (replicas, n_steps) int8 when record is set.
    """
    gen = rng.stream(seed, rng.TAG_WALK, stream_index)
    u = gen.random((n_steps, replicas))
    pos = np.tile(np.asarray(start, dtype=np.int64), (replicas, 1))
    moves = direction_vectors(env.d)
    steps = np.empty((replicas, n_steps), dtype=np.int8) if record else None
    for j in range(n_steps):
        idx = _choose(_batch_kernels(env, pos), u[j])
        pos += moves[idx]
        if record:
            steps[:, j] = idx
    return (pos, steps) if record else pos


def simulate_quenched(
    env: Environment, start, n_steps: int, seed: int, stream_index: int = 0
) -> Trajectory:
    _, steps = simulate_quenched_batch(
        env, start, n_steps, replicas=1, seed=seed, stream_index=stream_index, record=True
    )
    return Trajectory(start=np.asarray(start, dtype=np.int64), steps=steps[0], d=env.d)


def _annealed_kernels(law: EnvLaw, pos_aug: np.ndarray, env_seed: int) -> np.ndarray:
    # pos_aug carries the replica index as column 0 so one keyed hash pass
    # serves every replica; the spatial law is untouched because mixing
    # offsets are zero-padded on that column
    from .environment import _latent_from_uniform

    if law.mixing is None or law.mixing.radius == 0:
        V = _latent_from_uniform(law, rng.site_uniforms(env_seed, rng.TAG_ENV, pos_aug))
    else:
        V = np.zeros(pos_aug.shape[:-1], dtype=np.float64)
        pad = np.zeros((law.mixing.offsets.shape[0], 1), dtype=np.int64)
        for off, w in zip(np.hstack([pad, law.mixing.offsets]), law.mixing.weights):
            u = rng.site_uniforms(env_seed, rng.TAG_ENV, pos_aug + off)
            V += w * _latent_from_uniform(law, u)
    return law.mean * (1.0 + law.delta * law.loadings * V[..., None])


def simulate_annealed_batch(
    law: EnvLaw,
    start,
    n_steps: int,
    replicas: int,
    seed: int,
    record: bool = False,
):
    """Walks each in its own fresh environment drawn from the law.

    The environment of a replica is a function of (seed, replica, site), so a
    revisited site presents the kernel it had on first visit.
    """
    gen = rng.stream(seed, rng.TAG_WALK, 0)
    u = gen.random((n_steps, replicas))
    env_seed = rng.subseed(seed, rng.TAG_ENV, 0)
    pos = np.tile(np.asarray(start, dtype=np.int64), (replicas, 1))
    rep_col = np.arange(replicas, dtype=np.int64)[:, None]
    moves = direction_vectors(law.d)
    steps = np.empty((replicas, n_steps), dtype=np.int8) if record else None
    for j in range(n_steps):
        kern = _annealed_kernels(law, np.hstack([rep_col, pos]), env_seed)
        idx = _choose(kern, u[j])
        pos += moves[idx]
        if record:
            steps[:, j] = idx
    return (pos, steps) if record else pos


def simulate_annealed(law: EnvLaw, start, n_steps: int, seed: int) -> Trajectory:
    _, steps = simulate_annealed_batch(law, start, n_steps, replicas=1, seed=seed, record=True)
    return Trajectory(start=np.asarray(start, dtype=np.int64), steps=steps[0], d=law.d)


# -- directed-walk geometry ---------------------------------------------------


def directed_indices(s) -> np.ndarray:
    """Canonical direction indices of {s_j e_j : j = 1..d}."""
    s = np.asarray(s, dtype=np.int64)
    return np.array([2 * j + (0 if s[j] > 0 else 1) for j in range(s.size)])


def project_steps(traj: Trajectory, s) -> ProjectedTrajectory:
    """Collapse directed steps along the diagonal: step type j < d maps to
    e_j in Z^{d-1}, type d maps to -(e_1 + ... + e_{d-1})."""
    s = np.asarray(s, dtype=np.int64)
    d = s.size
    idx = directed_indices(s)
    table = np.zeros((2 * d, d - 1), dtype=np.int64)
    for j in range(d - 1):
        table[idx[j], j] = 1
    table[idx[d - 1], :] = -1
    admissible = bool(np.isin(traj.steps, idx).all())
    return ProjectedTrajectory(steps=table[traj.steps], admissible=admissible)


def steps_directed(traj: Trajectory, s, m: int = 0, n: int | None = None) -> bool:
    """True when every step with index in [m, n) lies in the directed set
    (vacuously true for an empty range)."""
    if n is None:
        n = len(traj)
    if m >= n:
        return True
    return bool(np.isin(traj.steps[m:n], directed_indices(s)).all())


def level_of(x, s) -> int:
    """Directed level <x, s>; equals the step count on the directed event."""
    return int((np.asarray(x) * np.asarray(s)).sum())


def position_from_level(s, k: int, y) -> np.ndarray:
    """Invert the projection: the unique x with level k and transverse image y.

    Step-type counts are c_j = y_j + c_d for j < d and c_d = (k - sum y) / d;
    raises ValueError when those are not nonnegative integers.
    """
    s = np.asarray(s, dtype=np.int64)
    d = s.size
    y = np.asarray(y, dtype=np.int64).reshape(d - 1)
    rem = k - int(y.sum())
    if rem % d:
        raise ValueError(f"level {k} and image {y.tolist()} violate the parity constraint")
    c_last = rem // d
    counts = np.concatenate([y + c_last, [c_last]])
    if (counts < 0).any():
        raise ValueError(f"no directed path reaches image {y.tolist()} at level {k}")
    x = np.zeros(d, dtype=np.int64)
    for j in range(d):
        x[j] = s[j] * counts[j]
    return x


def in_cone(v, zeta, ell) -> bool:
    """Exact membership of v in the cone {w : <w, ell> >= zeta |ell| |w|}.

    Integer vectors and a rational zeta make the comparison exact: square
    both sides after checking the sign of the inner product.
    """
    from fractions import Fraction

    v = [int(c) for c in np.asarray(v).ravel()]
    ell = [int(c) for c in np.asarray(ell).ravel()]
    z = Fraction(zeta).limit_denominator(10**9) if not isinstance(zeta, Fraction) else zeta
    a = sum(vi * li for vi, li in zip(v, ell))
    if a < 0:
        return False
    rhs = z * z * sum(li * li for li in ell) * sum(vi * vi for vi in v)
    return Fraction(a * a) >= rhs


# -- serialization ------------------------------------------------------------


def trajectory_to_csv(traj: Trajectory, fh) -> None:
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "w", newline="")
        close = True
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["step_index"]
            + [f"dx_{i + 1}" for i in range(traj.d)]
            + ["eps_tag"]
        )
        moves = direction_vectors(traj.d)
        for j, sidx in enumerate(traj.steps):
            tag = "" if traj.eps_tags is None else int(traj.eps_tags[j])
            w.writerow([j] + [int(v) for v in moves[sidx]] + [tag])
    finally:
        if close:
            fh.close()


def trajectory_from_csv(fh, start=None) -> Trajectory:
    from .environment import direction_index

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
    d = sum(1 for h in header if h.startswith("dx_"))
    steps = np.array(
        [direction_index(d, [int(v) for v in r[1 : 1 + d]]) for r in rows[1:]],
        dtype=np.int8,
    )
    tags = None
    if any(r[1 + d] != "" for r in rows[1:]):
        tags = np.array([int(r[1 + d]) if r[1 + d] != "" else -1 for r in rows[1:]], dtype=np.int16)
    if start is None:
        start = np.zeros(d, dtype=np.int64)
    return Trajectory(start=np.asarray(start, dtype=np.int64), steps=steps, d=d, eps_tags=tags)
