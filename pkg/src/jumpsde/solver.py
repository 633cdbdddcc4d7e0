"""Jump-adapted Euler-Maruyama path generation.

Two schemes share one driver loop.  ``direct_em`` steps the original SDE;
``transformed_em`` steps ``Z = G(X)`` with the transformed coefficients and
reports ``X = G^{-1}(Z)``.  Jump times are merged into the base grid, so each
base step is split at the jumps that fall inside it.

Paths are simulated in fixed-size chunks with the path index as the only
source of randomness, which makes results independent of the worker count.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .coefficients import TransformedModel, matvec
from .drivers import make_noise_plan, uniform_grid
from .errors import ContractViolation, NumericalBlowUp

CHUNK = 2000
SCHEMES = ("direct_em", "transformed_em")


@dataclass
class SchemeConfig:
    h: float
    scheme: str = "transformed_em"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def n_steps(self, T):
        if self.h > T * (1 + 1e-12):
            raise ValueError("h must not exceed T")
        return max(1, int(np.ceil(T / self.h - 1e-9)))


@dataclass
class Path:
    """One trajectory on its jump-adapted grid.

    ``x`` holds the cadlag values and ``x_pre`` the left limits; they differ
    only at rows with ``is_jump``.  ``z``/``z_pre`` carry the transformed
    state for ``transformed_em`` paths.
    """

    t: np.ndarray
    x: np.ndarray
    x_pre: np.ndarray
    is_jump: np.ndarray
    marks: np.ndarray
    seed: int = 0
    path_index: int = 0
    z: np.ndarray = None
    z_pre: np.ndarray = None

    def z_path(self):
        if self.z is None:
            raise ValueError("path carries no transformed state")
        return Path(self.t, self.z, self.z_pre, self.is_jump, self.marks,
                    self.seed, self.path_index)

    @property
    def terminal(self):
        return self.x[-1]


@dataclass
class PathBatch:
    """Many paths stored at base-grid resolution plus their jump records."""

    t: np.ndarray
    x: np.ndarray
    seed: int
    path_index: np.ndarray
    plan_steps: int
    jump_row: np.ndarray
    jump_time: np.ndarray
    jump_mark: np.ndarray
    jump_pre: np.ndarray
    jump_post: np.ndarray
    z: np.ndarray = None
    jump_zpre: np.ndarray = None
    jump_zpost: np.ndarray = None

    def __len__(self):
        return self.x.shape[0]

    @property
    def terminal(self):
        return self.x[:, -1, :]

    @property
    def jump_counts(self):
        return np.bincount(self.jump_row, minlength=len(self))

    def path(self, m):
        """Expand row ``m`` into a :class:`Path` on its jump-adapted grid."""
        sel = np.flatnonzero(self.jump_row == m)
        n = self.t.size
        t = np.concatenate([self.t, self.jump_time[sel]])
        x = np.concatenate([self.x[m], self.jump_post[sel]])
        x_pre = np.concatenate([self.x[m], self.jump_pre[sel]])
        is_jump = np.concatenate([np.zeros(n, bool), np.ones(sel.size, bool)])
        marks = np.concatenate([np.full(n, np.nan), self.jump_mark[sel]])
        # grid points sort before jumps at equal times
        order = np.lexsort((is_jump, t))
        z = z_pre = None
        if self.z is not None:
            z = np.concatenate([self.z[m], self.jump_zpost[sel]])[order]
            z_pre = np.concatenate([self.z[m], self.jump_zpre[sel]])[order]
        return Path(t[order], x[order], x_pre[order], is_jump[order], marks[order],
                    self.seed, int(self.path_index[m]), z, z_pre)

    @classmethod
    def concat(cls, batches):
        b0 = batches[0]
        offsets = np.cumsum([0] + [len(b) for b in batches[:-1]])
        cat = np.concatenate
        return cls(
            b0.t, cat([b.x for b in batches]), b0.seed,
            cat([b.path_index for b in batches]), b0.plan_steps,
            cat([b.jump_row + o for b, o in zip(batches, offsets)]),
            cat([b.jump_time for b in batches]), cat([b.jump_mark for b in batches]),
            cat([b.jump_pre for b in batches]), cat([b.jump_post for b in batches]),
            None if b0.z is None else cat([b.z for b in batches]),
            None if b0.z is None else cat([b.jump_zpre for b in batches]),
            None if b0.z is None else cat([b.jump_zpost for b in batches]),
        )


class _DirectStepper:
    def __init__(self, model):
        self.model = model

    def start(self, x0):
        return x0.copy(), None

    def step(self, x, z, rows, dt, dw):
        xs = x[rows]
        x[rows] = xs + self.model.mu(xs) * dt[:, None] + matvec(self.model.sigma(xs), dw)

    def jump(self, x, z, rows, marks):
        xs = x[rows]
        x[rows] = xs + self.model.rho(xs, marks)


class _TransformedStepper:
    def __init__(self, model, transform):
        self.tm = TransformedModel(model, transform)
        self.G = transform

    def start(self, x0):
        z = self.G.G(x0)
        return self.G.G_inverse(z, x0=x0), z

    def step(self, x, z, rows, dt, dw):
        xs, zs = x[rows], z[rows]
        mu_t, sig_t = self.tm.coefficients_at(xs)
        zn = zs + mu_t * dt[:, None] + matvec(sig_t, dw)
        z[rows] = zn
        x[rows] = self.G.G_inverse(zn, x0=xs)

    def jump(self, x, z, rows, marks):
        xs, zs = x[rows], z[rows]
        zn = zs + self.tm.rho_tilde(zs, marks, x=xs)
        z[rows] = zn
        x[rows] = self.G.G_inverse(zn, x0=xs + self.tm.base.rho(xs, marks))


def simulate_plans(model, plans, n_steps, transform=None, record_z=False, record_every=1):
    """Run one scheme over a list of noise plans sharing the same base grid.

    ``transform=None`` selects ``direct_em``.  The plans may be finer than
    ``n_steps`` as long as the grids nest; increments are then aggregated.
    States are stored every ``record_every`` base steps (jump records are
    always complete).
    """
    if record_every < 1 or n_steps % record_every:
        raise ContractViolation("record_every must divide the number of steps")
    M, d = len(plans), model.dim
    plan_steps = plans[0].n_steps
    if any(p.n_steps != plan_steps for p in plans):
        raise ContractViolation("noise plans disagree on their base grid")
    T = model.T
    h = T / n_steps
    t = uniform_grid(T, n_steps)
    views = [p.coarse(n_steps) for p in plans]
    dW = np.stack([v[0] for v in views])
    rows_all = np.concatenate([np.full(len(p.train), m) for m, p in enumerate(plans)]).astype(int)
    times = np.concatenate([p.train.times for p in plans])
    marks = np.concatenate([p.train.marks for p in plans])
    steps = np.concatenate([v[1] for v in views]).astype(int)
    offs = np.concatenate([v[2] for v in views]) if rows_all.size else np.empty((0, d))
    order = np.lexsort((times, rows_all, steps))
    rows_all, times, marks, steps, offs = (rows_all[order], times[order], marks[order],
                                           steps[order], offs[order])
    bounds = np.searchsorted(steps, np.arange(n_steps + 1))

    stepper = _DirectStepper(model) if transform is None else _TransformedStepper(model, transform)
    x0 = np.broadcast_to(model.x0, (M, d)).astype(float)
    x, z = stepper.start(x0)
    n_rec = n_steps // record_every
    X = np.empty((M, n_rec + 1, d))
    X[:, 0] = x
    Z = None
    if record_z and z is not None:
        Z = np.empty((M, n_rec + 1, d))
        Z[:, 0] = z
    K = rows_all.size
    pre, post = np.empty((K, d)), np.empty((K, d))
    zpre, zpost = (np.empty((K, d)), np.empty((K, d))) if Z is not None else (None, None)
    everyone = np.arange(M)
    full_dt = np.full(M, h)

    for i in range(n_steps):
        lo, hi = bounds[i], bounds[i + 1]
        if lo == hi:
            stepper.step(x, z, everyone, full_dt, dW[:, i])
        else:
            jr = rows_all[lo:hi]
            first = np.r_[True, jr[1:] != jr[:-1]]
            starts = np.flatnonzero(first)
            rank = np.arange(jr.size) - np.repeat(starts, np.diff(np.r_[starts, jr.size]))
            t_prev = np.full(M, t[i])
            w_prev = np.zeros((M, d))
            for r in range(rank.max() + 1):
                k = lo + np.flatnonzero(rank == r)
                rows = rows_all[k]
                stepper.step(x, z, rows, times[k] - t_prev[rows], offs[k] - w_prev[rows])
                pre[k] = x[rows]
                if zpre is not None:
                    zpre[k] = z[rows]
                stepper.jump(x, z, rows, marks[k])
                post[k] = x[rows]
                if zpost is not None:
                    zpost[k] = z[rows]
                t_prev[rows] = times[k]
                w_prev[rows] = offs[k]
            jumped = np.unique(jr)
            quiet = np.setdiff1d(everyone, jumped, assume_unique=True)
            stepper.step(x, z, quiet, full_dt[quiet], dW[quiet, i])
            stepper.step(x, z, jumped, t[i + 1] - t_prev[jumped], dW[jumped, i] - w_prev[jumped])
        if not np.all(np.isfinite(x)):
            raise NumericalBlowUp(f"non-finite state after step {i}", step=i)
        if (i + 1) % record_every == 0:
            X[:, (i + 1) // record_every] = x
            if Z is not None:
                Z[:, (i + 1) // record_every] = z

    inv = np.argsort(order, kind="stable")
    return PathBatch(
        t[::record_every], X, plans[0].seed, np.array([p.path_index for p in plans]), plan_steps,
        rows_all[inv], times[inv], marks[inv], pre[inv], post[inv],
        Z, None if zpre is None else zpre[inv], None if zpost is None else zpost[inv])


def em_direct(model, cfg: SchemeConfig, noise):
    """Direct jump-adapted Euler-Maruyama for a single noise plan."""
    batch = simulate_plans(model, [noise], cfg.n_steps(model.T))
    return batch.path(0)


def em_transformed(model, transform, cfg: SchemeConfig, noise):
    """Euler-Maruyama on ``Z = G(X)``; returns ``X = G^{-1}(Z)`` with ``z`` attached."""
    batch = simulate_plans(model, [noise], cfg.n_steps(model.T), transform, record_z=True)
    return batch.path(0)


def reference_path(model, transform, noise, h_ref):
    """Transformed scheme at the plan's own resolution ``h_ref``."""
    n_ref = SchemeConfig(h_ref).n_steps(model.T)
    if n_ref != noise.n_steps:
        raise ContractViolation(
            f"reference step {h_ref} does not match the {noise.n_steps}-step noise plan")
    return em_transformed(model, transform, SchemeConfig(h_ref), noise)


def _chunk_job(args):
    model, transform, n_steps, plan_steps, seed, start, stop, record_z, every = args
    plans = [make_noise_plan(model, seed, i, plan_steps) for i in range(start, stop)]
    return simulate_plans(model, plans, n_steps, transform, record_z, every)


def resolve_workers(workers=None):
    if workers is None:
        env = os.environ.get("JUMPSDE_WORKERS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def map_chunks(fn, jobs, workers=1):
    """Ordered map over chunk jobs, in-process or on a process pool."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def chunk_ranges(n_paths, first=0, chunk=CHUNK):
    return [(s, min(s + chunk, first + n_paths)) for s in range(first, first + n_paths, chunk)]


def simulate_paths(model, cfg: SchemeConfig, seed, n_paths, transform=None,
                   plan_steps=None, workers=1, first=0, record_z=False, record_every=1,
                   chunk=CHUNK):
    """Simulate paths ``first .. first+n_paths-1`` under ``cfg``.

    ``plan_steps`` sets the resolution of the noise plans (default: the
    scheme's own grid).  ``transform`` is required for ``transformed_em``.
    Memory for the stored states is ``n_paths * (T/h) / record_every * d * 8``
    bytes.  Paths are processed in chunks of ``chunk``; each chunk is an
    independent job, so the result does not depend on ``workers``.
    """
    n_steps = cfg.n_steps(model.T)
    plan_steps = n_steps if plan_steps is None else plan_steps
    if cfg.scheme == "transformed_em" and transform is None:
        raise ValueError("transformed_em needs a certified transform")
    tr = transform if cfg.scheme == "transformed_em" else None
    jobs = [(model, tr, n_steps, plan_steps, seed, a, b, record_z, record_every)
            for a, b in chunk_ranges(n_paths, first, chunk)]
    return PathBatch.concat(map_chunks(_chunk_job, jobs, resolve_workers(workers)))


@dataclass
class StrongError:
    mean: float
    ci_lo: float
    ci_hi: float
    sup_mean: float
    sup_ci_lo: float
    sup_ci_hi: float
    n: int


def _mean_ci(v):
    m = float(np.mean(v))
    if v.size < 2:
        return m, m, m
    half = 1.96 * float(np.std(v, ddof=1)) / float(np.sqrt(v.size))
    return m, m - half, m + half


def pathwise_errors(coarse: PathBatch, reference: PathBatch):
    """Per-path terminal and sup-over-grid errors of ``coarse`` against ``reference``."""
    if (coarse.seed != reference.seed or coarse.plan_steps != reference.plan_steps
            or not np.array_equal(coarse.path_index, reference.path_index)):
        raise ContractViolation("coarse and reference paths do not share noise plans")
    n_c, n_r = coarse.t.size - 1, reference.t.size - 1
    if n_r % n_c:
        raise ContractViolation("coarse grid does not nest in the reference grid")
    stride = n_r // n_c
    if not np.allclose(reference.t[::stride], coarse.t, rtol=0.0, atol=1e-12):
        raise ContractViolation("coarse and reference grids are not aligned")
    ref = reference.x[:, ::stride, :]
    diff = np.linalg.norm(coarse.x - ref, axis=-1)
    return diff[:, -1], diff.max(axis=1)


def strong_error(coarse: PathBatch, reference: PathBatch):
    """Monte Carlo estimate of ``E|X_T^h - X_T^ref|`` with a 95% normal CI."""
    term, sup = pathwise_errors(coarse, reference)
    return StrongError(*_mean_ci(term), *_mean_ci(sup), term.size)
