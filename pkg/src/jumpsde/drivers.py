"""Random inputs: Brownian increments and the compound Poisson jump train.

Every path owns a Philox stream keyed by ``(seed, path_index)``, so the noise
of path ``i`` does not depend on how paths are scheduled across workers.
Arrival times, marks, Brownian increments and bridge draws come from four
disjoint substreams of that key.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

SEED_BITS = 64


STREAMS = ("arrivals", "marks", "brownian", "bridge")


def path_stream(seed, path_index, k):
    """Substream ``k`` of the path key, i.e. the key's Philox advanced by ``k * 2^128``."""
    seed, path_index = int(seed), int(path_index)
    if not 0 <= seed < 2 ** SEED_BITS or not 0 <= path_index < 2 ** 64:
        raise ValueError("seed and path index must be unsigned 64-bit integers")
    # same state as Philox(key).jumped(k), without the cost of jumping
    bitgen = np.random.Philox(key=seed | (path_index << SEED_BITS), counter=[0, 0, k, 0])
    return np.random.Generator(bitgen)


def path_streams(seed, path_index):
    """Four independent generators ``(arrivals, marks, brownian, bridge)``."""
    return tuple(path_stream(seed, path_index, k) for k in range(len(STREAMS)))


@dataclass
class JumpTrain:
    times: np.ndarray
    marks: np.ndarray
    rate: float
    T: float

    def __len__(self):
        return self.times.size

    def count_until(self, t):
        return int(np.searchsorted(self.times, t, side="right"))


def sample_jump_train(rate, law, T, rng, mark_rng=None):
    """Jump times on ``(0, T]`` with iid Exponential(rate) gaps, marks iid from ``law``.

    Marks are drawn from ``mark_rng`` when given so they stay decorrelated from
    the arrival stream.
    """
    if rate < 0 or not T > 0:
        raise ValueError("need rate >= 0 and T > 0")
    if rate == 0:
        return JumpTrain(np.empty(0), np.empty(0), 0.0, T)
    mean = rate * T
    chunk = int(np.ceil(mean + 6.0 * np.sqrt(mean) + 10))
    t, gaps = 0.0, []
    while t <= T:
        g = rng.exponential(1.0 / rate, size=chunk)
        gaps.append(g)
        t += g.sum()
    times = np.cumsum(np.concatenate(gaps))
    times = times[times <= T]
    marks = law.sample(rng if mark_rng is None else mark_rng, times.size)
    return JumpTrain(times, np.asarray(marks, dtype=float), float(rate), float(T))


def jump_integral(train, rho, pre_states, t=None):
    """``sum_{k <= N_t} rho(X_{tau_k-}, xi_k)`` given the pre-jump states."""
    k = len(train) if t is None else train.count_until(t)
    pre = np.asarray(pre_states, dtype=float)
    if k == 0:
        return np.zeros(pre.shape[-1]) if pre.ndim == 2 else 0.0
    if pre.ndim != 2 or pre.shape[0] < k:
        raise ContractViolation(f"pre-jump states missing: need {k}, got {len(pre)}")
    return np.sum(rho(pre[:k], train.marks[:k]), axis=0)


def brownian_increments(grid, d, rng):
    """Independent ``N(0, (t_{i+1} - t_i) I)`` vectors over a time grid."""
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2:
        return np.empty((0, d))
    dt = np.diff(grid)
    if np.any(dt <= 0):
        raise ValueError("time grid must be strictly increasing")
    return rng.standard_normal((dt.size, d)) * np.sqrt(dt)[:, None]


@dataclass
class NoisePlan:
    """All noise of one path, a pure function of ``(seed, path_index, grid)``.

    ``dW`` holds Brownian increments on the uniform base grid of ``n_steps``
    steps.  For each jump, ``jump_step`` is the base step containing it and
    ``bridge`` is ``W(tau) - W(t_step)`` drawn from the Brownian bridge.
    """

    seed: int
    path_index: int
    T: float
    n_steps: int
    dW: np.ndarray
    train: JumpTrain
    jump_step: np.ndarray = field(repr=False)
    bridge: np.ndarray = field(repr=False)

    @property
    def grid(self):
        return uniform_grid(self.T, self.n_steps)

    def coarse(self, n_coarse):
        """Increments and jump offsets aggregated to a nested coarser grid.

        Returns ``(dW, jump_step, offsets)`` where ``offsets[k]`` is
        ``W(tau_k)`` minus ``W`` at the start of its coarse step.
        """
        if n_coarse <= 0 or self.n_steps % n_coarse:
            raise ContractViolation(
                f"grid of {n_coarse} steps does not nest in the {self.n_steps}-step plan")
        r = self.n_steps // n_coarse
        d = self.dW.shape[1]
        if r == 1:
            return self.dW, self.jump_step, self.bridge
        blocks = self.dW.reshape(n_coarse, r, d)
        dWc = blocks.sum(axis=1)
        step_c = self.jump_step // r
        partial = np.cumsum(blocks, axis=1)
        within = self.jump_step - step_c * r
        offsets = self.bridge.copy()
        has = within > 0
        offsets[has] += partial[step_c[has], within[has] - 1]
        return dWc, step_c, offsets


def uniform_grid(T, n):
    t = np.arange(n + 1, dtype=float) * (T / n)
    t[-1] = T
    return t


def make_noise_plan(model, seed, path_index, n_steps):
    """Noise plan for ``model`` on a uniform grid of ``n_steps`` steps."""
    arrivals, marks_rng, brownian, bridge_rng = path_streams(seed, path_index)
    T, d = model.T, model.dim
    grid = uniform_grid(T, n_steps)
    train = sample_jump_train(model.intensity, model.marks, T, arrivals, marks_rng)
    dW = brownian_increments(grid, d, brownian)
    K = len(train)
    step = np.clip(np.searchsorted(grid, train.times, side="right") - 1, 0, n_steps - 1)
    bridge = np.zeros((K, d))
    if K:
        z = bridge_rng.standard_normal((K, d))
        prev_step, u, w_u = -1, 0.0, None
        for k in range(K):
            j = step[k]
            a, b = grid[j], grid[j + 1]
            if j != prev_step:
                u, w_u = a, np.zeros(d)
            tau = train.times[k]
            frac = (tau - u) / (b - u) if b > u else 0.0
            var = max((tau - u) * (b - tau) / (b - u), 0.0) if b > u else 0.0
            w_tau = w_u + frac * (dW[j] - w_u) + np.sqrt(var) * z[k]
            bridge[k] = w_tau
            prev_step, u, w_u = j, tau, w_tau
    return NoisePlan(int(seed), int(path_index), float(T), int(n_steps), dW, train, step, bridge)
