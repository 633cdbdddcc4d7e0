"""Coefficient bundles of the jump SDE and of its transformed counterpart.

Coefficients are declarative presets (affine drift pieces, constant or affine
diffusion, affine jump amplitudes) so Lipschitz and growth constants have
closed forms.  Every evaluator is vectorised over leading axes.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import IntrinsicMetricUnsupported
from .geometry import AffineHyperplane, Hypersurface


def matvec(A, v):
    """Batched ``A @ v`` for ``A`` of shape (..., m, n) and ``v`` of shape (..., n)."""
    return np.einsum("...ij,...j->...i", A, v)


class AffineMap:
    """``x -> A x + b``."""

    def __init__(self, A, b):
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        d = self.b.size
        self.A = np.asarray(A, dtype=float).reshape(d, d)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.A.T + self.b

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.A, 2))


class PiecewiseDrift:
    """Drift equal to ``plus`` on ``side(x) >= 0`` and to ``minus`` elsewhere.

    Points on the surface take the ``plus`` value; the transform's trace term
    uses the same convention.
    """

    def __init__(self, surface: Hypersurface, plus: AffineMap, minus: AffineMap):
        self.surface = surface
        self.plus = plus
        self.minus = minus

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        upper = self.surface.side(x) >= 0
        return np.where(upper[..., None], self.plus(x), self.minus(x))

    def jump(self, zeta):
        """One-sided difference ``mu_-(zeta) - mu_+(zeta)`` across the surface."""
        return self.minus(zeta) - self.plus(zeta)

    @property
    def is_continuous(self):
        return (np.array_equal(self.plus.A, self.minus.A)
                and np.array_equal(self.plus.b, self.minus.b))


class AffineDiffusion:
    """``sigma(x) = base + sum_k x_k slopes[:, :, k]``."""

    def __init__(self, base, slopes=None):
        self.base = np.atleast_2d(np.asarray(base, dtype=float))
        d = self.base.shape[0]
        if self.base.shape != (d, d):
            raise ValueError("diffusion matrix must be square")
        if slopes is None or not np.any(slopes):
            self.slopes = None
        else:
            self.slopes = np.asarray(slopes, dtype=float).reshape(d, d, d)

    @property
    def is_constant(self):
        return self.slopes is None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.broadcast_to(self.base, x.shape[:-1] + self.base.shape)
        if self.slopes is None:
            return out.copy()
        return out + np.einsum("ijk,...k->...ij", self.slopes, x)

    @property
    def lipschitz(self):
        """Upper bound: Frobenius norm of the slope tensor."""
        return 0.0 if self.slopes is None else float(np.sqrt(np.sum(self.slopes ** 2)))

    def normal_component(self, normal):
        """Affine coefficients ``(v0, V)`` with ``sigma(x)^T a = v0 + V x``."""
        v0 = self.base.T @ normal
        if self.slopes is None:
            return v0, np.zeros((v0.size, v0.size))
        return v0, np.einsum("jik,j->ik", self.slopes, normal)


class AffineJump:
    """Jump amplitude ``rho(x, y) = m(y) (C x + e)`` with ``m(y) = y`` or ``1``.

    ``uses_mark=False`` is the pure Poisson form where the amplitude ignores the
    mark; ``uses_mark=True`` scales it by the compound-Poisson mark.
    """

    def __init__(self, slope, intercept, uses_mark=True):
        self.e = np.atleast_1d(np.asarray(intercept, dtype=float))
        d = self.e.size
        self.C = np.asarray(slope, dtype=float).reshape(d, d)
        self.uses_mark = bool(uses_mark)

    @property
    def is_zero(self):
        return not np.any(self.C) and not np.any(self.e)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        amp = x @ self.C.T + self.e
        if not self.uses_mark:
            return amp
        return np.asarray(y, dtype=float)[..., None] * amp

    def growth_constants(self, second_moment):
        """Closed-form ``c_rho`` for the L2(psi) growth and Lipschitz bounds."""
        m2 = second_moment if self.uses_mark else 1.0
        cn = np.linalg.norm(self.C, 2)
        growth = m2 * 2.0 * max(cn ** 2, float(self.e @ self.e))
        lip = m2 * cn ** 2
        growth, lip = float(growth), float(lip)
        return {"growth": growth, "lipschitz": lip, "c_rho": max(growth, lip)}


class MarkLaw:
    """Distribution of the compound-Poisson marks.

    Supported kinds: ``dirac`` (value), ``normal`` (mean, std), ``exponential``
    (rate) and ``two_point`` (v1, p, v2).  Laws charging zero are rejected.
    """

    KINDS = ("dirac", "normal", "exponential", "two_point")
    PARAMS = {"dirac": ("value",), "normal": ("mean", "std"),
              "exponential": ("rate",), "two_point": ("v1", "p", "v2")}

    def __init__(self, kind="dirac", **params):
        if kind not in self.KINDS:
            raise ValueError(f"unknown mark law {kind!r}")
        unknown = set(params) - set(self.PARAMS[kind])
        if unknown:
            raise ValueError(f"unknown parameter {sorted(unknown)[0]!r} for {kind} marks")
        self.kind = kind
        if kind == "dirac":
            self.value = float(params.get("value", 1.0))
            if self.value == 0.0:
                raise ValueError("Dirac mark law must not sit at 0")
        elif kind == "normal":
            self.mean = float(params.get("mean", 0.0))
            self.std = float(params.get("std", 1.0))
            if not self.std > 0:
                raise ValueError("normal mark law needs std > 0")
        elif kind == "exponential":
            self.rate = float(params.get("rate", 1.0))
            if not self.rate > 0:
                raise ValueError("exponential mark law needs rate > 0")
        else:
            self.v1 = float(params.get("v1", 1.0))
            self.v2 = float(params.get("v2", -1.0))
            self.p = float(params.get("p", 0.5))
            if self.v1 == 0.0 or self.v2 == 0.0:
                raise ValueError("two-point mark law must not charge 0")
            if not 0.0 < self.p <= 1.0:
                raise ValueError("two-point probability must lie in (0, 1]")

    def sample(self, rng, n):
        if self.kind == "dirac":
            return np.full(n, self.value)
        if self.kind == "normal":
            return self.mean + self.std * rng.standard_normal(n)
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.rate, size=n)
        return np.where(rng.random(n) < self.p, self.v1, self.v2)

    @property
    def second_moment(self):
        if self.kind == "dirac":
            return self.value ** 2
        if self.kind == "normal":
            return self.mean ** 2 + self.std ** 2
        if self.kind == "exponential":
            return 2.0 / self.rate ** 2
        return self.p * self.v1 ** 2 + (1 - self.p) * self.v2 ** 2

    def to_spec(self):
        return {"law": self.kind, **{k: getattr(self, k) for k in self.PARAMS[self.kind]}}

    @classmethod
    def from_spec(cls, spec):
        spec = dict(spec)
        return cls(spec.pop("law", "dirac"), **spec)


@dataclass
class Model:
    """Coefficient bundle of ``dX = mu dt + sigma dW + int rho dnu``."""

    drift: PiecewiseDrift
    diffusion: AffineDiffusion
    jump: AffineJump
    intensity: float
    marks: MarkLaw
    x0: np.ndarray
    T: float
    name: str = "custom"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.intensity < 0:
            raise ValueError("jump intensity must be non-negative")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")

    @property
    def dim(self):
        return self.x0.size

    @property
    def surface(self):
        return self.drift.surface

    def mu(self, x):
        return self.drift(x)

    def sigma(self, x):
        return self.diffusion(x)

    def rho(self, x, y):
        return self.jump(x, y)


class TransformedModel:
    """Coefficients of ``Z = G(X)``: drift, diffusion and jump amplitude."""

    def __init__(self, base: Model, transform):
        self.base = base
        self.transform = transform

    def coefficients(self, z, x=None):
        """Return ``(x, mu_tilde, sigma_tilde)`` sharing one inverse evaluation.

        ``x`` may carry a warm start for the inverse iteration.  Off the bump
        support the base coefficients are returned unchanged, bit for bit.
        """
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        x2 = self.transform.G_inverse(np.atleast_2d(z),
                                      x0=None if x is None else np.atleast_2d(x))
        mu, sig = self.coefficients_at(x2)
        if single:
            return x2[0], mu[0], sig[0]
        return x2, mu, sig

    def coefficients_at(self, x2):
        """``(mu_tilde, sigma_tilde)`` at ``G(x2)`` for a batch of preimages."""
        tr = self.transform
        mu = self.base.mu(x2)
        sig = self.base.sigma(x2)
        if tr.trivial:
            return mu, sig
        fused = tr.transformed_coefficients(x2, mu, sig)
        if fused is not None:
            return fused
        sup = tr.support(x2)
        if np.any(sup):
            xs, ss = x2[sup], sig[sup]
            J, H = tr.G_jacobian(xs), tr.G_hessian(xs)
            a = ss @ np.swapaxes(ss, -1, -2)
            mu[sup] = matvec(J, mu[sup]) + 0.5 * np.einsum("nijl,njl->ni", H, a)
            sig[sup] = J @ ss
        return mu, sig

    def mu_tilde(self, z):
        return self.coefficients(z)[1]

    def sigma_tilde(self, z):
        return self.coefficients(z)[2]

    def rho_tilde(self, z, y, x=None):
        """``G(G^-1(z) + rho(G^-1(z), y)) - z``; exactly ``rho`` off the support."""
        z = np.asarray(z, dtype=float)
        tr = self.transform
        if x is None:
            x = tr.G_inverse(z)
        r = self.base.rho(x, y)
        xj = x + r
        out = tr.G(xj) - z
        ident = ~(tr.support(x) | tr.support(xj))
        return np.where(np.asarray(ident)[..., None], r, out)


def estimate_pw_lipschitz(drift: PiecewiseDrift, samples=0, rng=None, window=None):
    """Piecewise Lipschitz constant of a drift with a hyperplane exceptional set.

    Each side of a hyperplane is a convex halfspace, so the intrinsic metric is
    Euclidean there and the constant of affine pieces is ``max ||A_+-||_2``.
    With ``samples > 0`` the sampled same-side quotient (a lower bound) is
    returned instead.
    """
    if not isinstance(drift.surface, AffineHyperplane):
        raise IntrinsicMetricUnsupported(
            "intrinsic metric is only available for hyperplane exceptional sets")
    if samples <= 0:
        return max(drift.plus.lipschitz, drift.minus.lipschitz)
    rng = np.random.default_rng(0) if rng is None else rng
    d = drift.surface.dim
    lo, hi = (-5.0 * np.ones(d), 5.0 * np.ones(d)) if window is None else window
    x = rng.uniform(lo, hi, size=(samples, d))
    y = x + rng.standard_normal((samples, d)) * rng.uniform(1e-3, 2.0, size=(samples, 1))
    same = np.sign(drift.surface.side(x)) == np.sign(drift.surface.side(y))
    num = np.linalg.norm(drift(x[same]) - drift(y[same]), axis=-1)
    den = np.linalg.norm(x[same] - y[same], axis=-1)
    return float(np.max(num / den)) if num.size else 0.0
