"""The drift-removing transform ``G(x) = x + phi(x) alpha(p(x))``.

``phi`` is a signed squared distance localised by a C^3 polynomial bump of
radius ``c`` and ``alpha`` is the scaled one-sided jump of the drift across
the exceptional surface.  Inside the bump support ``G`` bends the state so
the drift of ``Z = G(X)`` becomes continuous; outside it ``G`` is the
identity.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (AlphaNotWellDefinedError, CertificationError,
                     InverseDidNotConverge, NonParallelityError)
from .geometry import AffineHyperplane, TOL_ON_SURFACE

TOL_INV = 1e-12
MAX_INV_ITER = 100
MAX_NEWTON_INV = 30
H_FD = 1e-5
H_FD2 = 1e-4
TOL_ALPHA = 1e-8
C0_MIN = 1e-12


def _dot(x, a):
    """Row-wise ``x . a``, evaluated the same way for any batch size."""
    return np.einsum("...i,i->...", x, a)


def bump(u):
    """``(1+u)^4 (1-u)^4`` on ``|u| <= 1`` and 0 elsewhere."""
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, (1.0 + u) ** 4 * (1.0 - u) ** 4, 0.0)


def _profile(s, c):
    """``q(s) = s|s| bump(|s|/c)`` with its first two derivatives.

    The second derivative jumps at ``s = 0``; the ``+`` side value is used
    there.
    """
    s = np.asarray(s, dtype=float)
    inv_c2 = 1.0 / (c * c)
    s2 = s * s
    one = 1.0 - np.minimum(s2 * inv_c2, 1.0)
    one2 = one * one
    w = one2 * one2
    w1 = -4.0 * inv_c2 * one2 * one
    w2 = 12.0 * inv_c2 * inv_c2 * one2
    a = np.abs(s)
    q = s * a * w
    q1 = 2.0 * a * (w + s2 * w1)
    q2 = np.where(s >= 0, 1.0, -1.0) * (2.0 * w + s2 * (10.0 * w1 + 4.0 * s2 * w2))
    return q, q1, q2


def _profile01(s, inv_c2):
    """``q`` and ``q'`` only, for the inverse iteration."""
    s2 = s * s
    one = 1.0 - np.minimum(s2 * inv_c2, 1.0)
    one3 = one * one * one
    a = np.abs(s)
    return s * a * one3 * one, 2.0 * a * one3 * (one - 4.0 * inv_c2 * s2)


@dataclass(frozen=True)
class TransformParams:
    c: float
    epsilon0: float
    kappa_max: float = 0.5

    def __post_init__(self):
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be positive")
        if not 0 < self.c <= self.epsilon0:
            raise ValueError("bump radius c must satisfy 0 < c <= epsilon0")
        if not 0 < self.kappa_max < 1:
            raise ValueError("kappa_max must lie in (0, 1)")


class AlphaField:
    """``alpha(zeta) = (mu_-(zeta) - mu_+(zeta)) / (2 |sigma(zeta)^T n(zeta)|^2)``.

    The closed form uses the two drift pieces directly.  On hyperplanes with
    affine pieces and affine diffusion the extension of ``alpha`` off the
    surface is a rational function whose derivatives are available
    analytically; other surfaces fall back to central differences.
    """

    def __init__(self, model):
        self.drift = model.drift
        self.diffusion = model.diffusion
        self.surface = model.drift.surface
        self.trivial = bool(self.drift.is_continuous)
        self.bound_estimate = None
        self._hyper = isinstance(self.surface, AffineHyperplane)
        if self._hyper:
            a = self.surface.normal
            self._dA = self.drift.minus.A - self.drift.plus.A
            self._db = self.drift.minus.b - self.drift.plus.b
            self._v0, self._V = self.diffusion.normal_component(a)
            if self.diffusion.is_constant and self._v0 @ self._v0 < C0_MIN ** 2:
                raise NonParallelityError(
                    f"|sigma^T n| = {np.sqrt(self._v0 @ self._v0):.3e} on the surface")
        # affine alpha (constant sigma on a hyperplane): alpha(p) = slope p + offset
        self.affine = self._hyper and self.diffusion.is_constant and not self.trivial
        if self.affine:
            den0 = 2.0 * float(self._v0 @ self._v0)
            self.slope = self._dA / den0
            self.offset = self._db / den0
            self.constant = not np.any(self._dA)

    def _denominator(self, zeta):
        if self._hyper:
            v = self._v0 + zeta @ self._V.T
        else:
            n = self.surface.normal_at(zeta)
            v = np.einsum("...ji,...j->...i", self.diffusion(zeta), n)
        den = 2.0 * np.sum(v * v, axis=-1)
        if np.any(den < 2.0 * C0_MIN ** 2):
            raise NonParallelityError("sigma^T n vanishes on the surface")
        return den, v

    def __call__(self, zeta):
        zeta = np.asarray(zeta, dtype=float)
        if self.trivial:
            return np.zeros_like(zeta)
        if self.affine:
            if self.constant:
                return np.broadcast_to(self.offset, zeta.shape)
            return zeta @ self.slope.T + self.offset
        den, _ = self._denominator(zeta)
        return self.drift.jump(zeta) / den[..., None]

    def jacobian(self, zeta):
        """Ambient derivative of the extension, shape (..., d, d)."""
        zeta = np.asarray(zeta, dtype=float)
        d = zeta.shape[-1]
        if self.trivial:
            return np.zeros(zeta.shape + (d,))
        if not self._hyper:
            return _fd_jacobian(self, zeta, H_FD)
        den, v = self._denominator(zeta)
        N = self.drift.jump(zeta)
        gD = 4.0 * v @ self._V
        return (self._dA / den[..., None, None]
                - N[..., :, None] * gD[..., None, :] / (den ** 2)[..., None, None])

    def hessian(self, zeta):
        """Second ambient derivative, shape (..., d, d, d)."""
        zeta = np.asarray(zeta, dtype=float)
        d = zeta.shape[-1]
        if self.trivial:
            return np.zeros(zeta.shape + (d, d))
        if not self._hyper:
            return _fd_hessian(self, zeta, H_FD2)
        den, v = self._denominator(zeta)
        if self.diffusion.is_constant:
            return np.zeros(zeta.shape + (d, d))
        N = self.drift.jump(zeta)
        gD = 4.0 * v @ self._V
        hD = 4.0 * self._V.T @ self._V
        D2 = den[..., None, None, None] ** 2
        D3 = den[..., None, None, None] ** 3
        dA = self._dA
        return (-dA[:, :, None] * gD[..., None, None, :] / D2
                - dA[:, None, :] * gD[..., None, :, None] / D2
                - N[..., :, None, None] * hD / D2
                + 2.0 * N[..., :, None, None] * gD[..., None, :, None]
                * gD[..., None, None, :] / D3)


def _fd_jacobian(f, x, h):
    d = x.shape[-1]
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _fd_hessian(f, x, h):
    d = x.shape[-1]
    eye = np.eye(d) * h
    out = np.empty(x.shape + (d, d))
    for k in range(d):
        for m in range(k, d):
            val = (f(x + eye[k] + eye[m]) - f(x + eye[k] - eye[m])
                   - f(x - eye[k] + eye[m]) + f(x - eye[k] - eye[m])) / (4 * h * h)
            out[..., k, m] = val
            out[..., m, k] = val
    return out


def alpha_at(model, surface, zeta, method="auto", h0=None):
    """Evaluate the drift-jump field at a surface point.

    ``method="closed"`` uses the affine drift pieces; ``method="limit"``
    evaluates the one-sided quotient at ``h = h0/2^k`` and accepts once two
    successive Richardson extrapolates agree to ``TOL_ALPHA``.  ``auto``
    picks the closed form whenever the drift exposes its pieces.
    """
    zeta = np.asarray(zeta, dtype=float)
    if surface.distance(zeta) > TOL_ON_SURFACE:
        raise ValueError("alpha_at needs a point on the surface")
    n = surface.normal_at(zeta[None])[0]
    sig = np.atleast_2d(model.sigma(zeta))
    den = 2.0 * float(np.sum((sig.T @ n) ** 2))
    if den < 2.0 * C0_MIN ** 2:
        raise NonParallelityError(
            f"non-parallelity violation: |sigma^T n| = {np.sqrt(den / 2):.3e}")
    if method == "auto":
        method = "closed" if hasattr(model.drift, "jump") else "limit"
    if method == "closed":
        return model.drift.jump(zeta) / den
    h = 0.25 if h0 is None else h0
    prev_q = (model.mu(zeta - h * n) - model.mu(zeta + h * n)) / den
    prev_r = None
    for _ in range(60):
        h *= 0.5
        q = (model.mu(zeta - h * n) - model.mu(zeta + h * n)) / den
        r = 2.0 * q - prev_q
        if prev_r is not None and np.max(np.abs(r - prev_r)) < TOL_ALPHA:
            return r
        prev_q, prev_r = q, r
    raise AlphaNotWellDefinedError(f"one-sided limit at {zeta} is not Cauchy")


class Transform:
    """The map ``G`` with derivatives and its global inverse.

    ``kappa`` is the sampled bound on ``|G' - I|`` recorded when the transform
    was certified; it governs the contraction of the inverse iteration.
    """

    def __init__(self, surface, params: TransformParams, alpha: AlphaField, kappa=None):
        self.surface = surface
        self.params = params
        self.alpha = alpha
        self.kappa = kappa
        self._hyper = isinstance(surface, AffineHyperplane)
        self._inv_c2 = 1.0 / params.c ** 2

    @property
    def c(self):
        return self.params.c

    @property
    def trivial(self):
        return self.alpha.trivial

    # -- geometry helpers --------------------------------------------------

    def _local(self, x):
        """Signed distance, foot point and support mask for a batch."""
        if self._hyper:
            s = self.surface.side(x)
            p = x - s[..., None] * self.surface.normal
            return s, p, np.abs(s) < self.c
        p, inside = self.surface.closest_point(x)
        s = np.sum(self.surface.normal_at(p) * (x - p), axis=-1)
        return s, p, inside & (np.abs(s) < self.c)

    def support(self, x):
        """Mask of points where ``G`` differs from the identity."""
        x = np.asarray(x, dtype=float)
        if self.trivial:
            return np.zeros(x.shape[:-1], dtype=bool)
        x2 = np.atleast_2d(x)
        _, _, sup = self._local(x2)
        return sup[0] if x.ndim == 1 else sup

    def _displacement(self, x2):
        if self.trivial:
            return np.zeros_like(x2)
        if self._hyper:
            # the profile vanishes identically for |s| >= c, no masking needed
            a = self.surface.normal
            s = _dot(x2, a) - self.surface.offset
            w = (1.0 - np.minimum(s * s * self._inv_c2, 1.0)) ** 4
            q = s * np.abs(s) * w
            al = self.alpha(x2 - s[:, None] * a)
            return q[:, None] * al
        out = np.zeros_like(x2)
        s, p, sup = self._local(x2)
        if np.any(sup):
            q, _, _ = _profile(s[sup], self.c)
            out[sup] = q[:, None] * self.alpha(p[sup])
        return out

    # -- the map and its derivatives --------------------------------------

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        x2 = np.atleast_2d(x)
        s, _, sup = self._local(x2)
        val = np.where(sup, _profile(np.where(sup, s, 0.0), self.c)[0], 0.0)
        return val[0] if x.ndim == 1 else val

    def G(self, x):
        x = np.asarray(x, dtype=float)
        x2 = np.atleast_2d(x)
        out = x2 + self._displacement(x2)
        return out[0] if x.ndim == 1 else out

    def G_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        x2 = np.atleast_2d(x)
        n_pts, d = x2.shape
        J = np.broadcast_to(np.eye(d), (n_pts, d, d)).copy()
        if not self.trivial:
            s, p, sup = self._local(x2)
            if np.any(sup):
                J[sup] += self._jacobian_part(x2[sup], s[sup], p[sup])
        return J[0] if x.ndim == 1 else J

    def _jacobian_part(self, x, s, p):
        q, q1, _ = _profile(s, self.c)
        al = self.alpha(p)
        nrm = self.surface.normal_at(p)
        Dp = self.surface.projection_jacobian(x)
        DaP = self.alpha.jacobian(p) @ Dp
        return q1[:, None, None] * al[:, :, None] * nrm[:, None, :] + q[:, None, None] * DaP

    def G_hessian(self, x):
        """``H[..., i, j, l] = d^2 G_i / dx_j dx_l``; ``+n`` side value on the surface."""
        x = np.asarray(x, dtype=float)
        x2 = np.atleast_2d(x)
        n_pts, d = x2.shape
        H = np.zeros((n_pts, d, d, d))
        if not self.trivial:
            s, p, sup = self._local(x2)
            if np.any(sup):
                if self._hyper:
                    H[sup] = self._hessian_hyper(s[sup], p[sup])
                else:
                    H[sup] = self._hessian_fd(x2[sup], s[sup], p[sup])
        return H[0] if x.ndim == 1 else H

    def _hessian_hyper(self, s, p):
        a = self.surface.normal
        d = a.size
        P = np.eye(d) - np.outer(a, a)
        q, q1, q2 = _profile(s, self.c)
        al = self.alpha(p)
        DaP = self.alpha.jacobian(p) @ P
        aa = np.outer(a, a)
        H = q2[:, None, None, None] * al[:, :, None, None] * aa
        H += q1[:, None, None, None] * (a[None, None, :, None] * DaP[:, :, None, :]
                                        + a[None, None, None, :] * DaP[:, :, :, None])
        if not self.alpha.diffusion.is_constant:
            D2 = self.alpha.hessian(p)
            H += q[:, None, None, None] * np.einsum("nikm,kj,ml->nijl", D2, P, P)
        return H

    def _hessian_fd(self, x, s, p):
        # keep the stencil on one side of the surface (the +n side at s == 0)
        h = H_FD
        nrm = self.surface.normal_at(p)
        shift = np.where(np.abs(s) < 2 * h, np.where(s >= 0, 2 * h - s, -2 * h - s), 0.0)
        xs = x + shift[:, None] * nrm
        d = x.shape[-1]
        H = np.empty((x.shape[0], d, d, d))
        for l in range(d):
            e = np.zeros(d)
            e[l] = h
            H[..., l] = (self.G_jacobian(xs + e) - self.G_jacobian(xs - e)) / (2 * h)
        return H

    def transformed_coefficients(self, x, mu, sigma):
        """``G'(x) mu + 1/2 tr[sigma^T G''(x) sigma]`` and ``G'(x) sigma`` for a batch.

        Closed form for hyperplanes with affine ``alpha``, where
        ``G' = I + q' alpha a^T + q M`` with the constant matrix
        ``M = D(alpha) (I - a a^T)``.  Returns ``None`` when not applicable.
        """
        al_field = self.alpha
        if not (self._hyper and getattr(al_field, "affine", False)):
            return None
        a = self.surface.normal
        s = _dot(x, a) - self.surface.offset
        q, q1, q2 = _profile(s, self.c)
        al = al_field(x - s[:, None] * a)
        A = sigma @ np.swapaxes(sigma, -1, -2)
        Aa = np.einsum("nij,j->ni", A, a)
        sa = np.einsum("nji,j->ni", sigma, a)
        mu_t = mu + (q1 * _dot(mu, a) + 0.5 * q2 * _dot(Aa, a))[:, None] * al
        sig_t = sigma + q1[:, None, None] * al[:, :, None] * sa[:, None, :]
        if not al_field.constant:
            M = al_field.slope - np.outer(al_field.slope @ a, a)
            mu_t = mu_t + q[:, None] * (mu @ M.T) + q1[:, None] * (Aa @ M.T)
            sig_t = sig_t + q[:, None, None] * (M @ sigma)
        return mu_t, sig_t

    # -- inverse -----------------------------------------------------------

    def G_inverse(self, z, x0=None):
        """Solve ``G(x) = z`` by the fixed-point iteration ``x <- z - phi(x) alpha(p(x))``.

        Each point iterates independently until ``|G(x) - z| <= TOL_INV``.
        ``x0`` optionally supplies starting points (defaults to ``z``).
        """
        z = np.asarray(z, dtype=float)
        z2 = np.atleast_2d(z)
        if self.trivial:
            x = z2.copy()
            return x[0] if z.ndim == 1 else x
        x = z2.copy() if x0 is None else np.atleast_2d(np.asarray(x0, dtype=float)).copy()
        if self._hyper and getattr(self.alpha, "constant", False):
            x, active = self._inverse_normal(z2, x)
            if active.size == 0:
                return x[0] if z.ndim == 1 else x
        else:
            active = None
        tol2 = TOL_INV * TOL_INV
        for _ in range(MAX_INV_ITER):
            xa = x if active is None else x[active]
            za = z2 if active is None else z2[active]
            disp = self._displacement(xa)
            r = xa + disp - za
            res2 = np.einsum("ij,ij->i", r, r)
            keep = res2 > tol2
            if not keep.any():
                return x[0] if z.ndim == 1 else x
            idx = np.flatnonzero(keep) if active is None else active[keep]
            x[idx] = za[keep] - disp[keep]
            active = idx
        raise InverseDidNotConverge(
            f"inverse did not converge in {MAX_INV_ITER} iterations "
            f"(sampled kappa = {self.kappa})", kappa=self.kappa,
            residual=float(np.sqrt(res2.max())))

    def _inverse_normal(self, z2, x):
        """Newton on the normal coordinate for a hyperplane with constant ``alpha``.

        Then ``G(x) = z`` reduces to ``s + k q(s) = a.z - b`` with ``k = a.alpha``
        and ``x = z - q(s) alpha``.  The left side is strictly increasing when
        the transform is a contraction perturbation of the identity, so Newton
        from the warm start converges; points that do not meet the tolerance
        are returned as still active for the fixed-point loop.
        """
        a, b = self.surface.normal, self.surface.offset
        al = self.alpha.offset
        k = float(al @ a)
        sz = _dot(z2, a) - b
        s = _dot(x, a) - b
        idx = np.arange(s.size)
        sa, sza = s, sz
        for _ in range(MAX_NEWTON_INV):
            q, q1 = _profile01(sa, self._inv_c2)
            step = (sa + k * q - sza) / (1.0 + k * q1)
            sa = sa - step
            s[idx] = sa
            moving = np.abs(step) > 0.25 * TOL_INV
            if not moving.all():
                idx, sa, sza = idx[moving], sa[moving], sza[moving]
                if idx.size == 0:
                    break
        q = _profile01(s, self._inv_c2)[0]
        x = z2 - q[:, None] * al
        disp = self._displacement(x)
        r = x + disp - z2
        res2 = np.einsum("ij,ij->i", r, r)
        return x, np.flatnonzero(~(res2 <= TOL_INV * TOL_INV))

    def G_inverse_jacobian(self, z):
        x = self.G_inverse(z)
        return np.linalg.inv(self.G_jacobian(x))

    def G_inverse_hessian(self, z):
        """Second derivatives of ``G^{-1}`` at ``z`` from those of ``G``."""
        x = self.G_inverse(z)
        Ji = np.linalg.inv(self.G_jacobian(x))
        H = self.G_hessian(x)
        return -np.einsum("...im,...mab,...aj,...bl->...ijl", Ji, H, Ji, Ji)

    # -- certification -----------------------------------------------------

    def contraction_samples(self, lower, upper, n, rng):
        """Points of the bump support: random offsets plus a fixed normal grid."""
        zeta = self.surface.sample_surface(lower, upper, max(n // 64, 8), rng)
        nrm = self.surface.normal_at(zeta)
        grid = np.linspace(-1.0, 1.0, 257)[1:-1] * self.c
        pts = [(zeta[:, None, :] + grid[None, :, None] * nrm[:, None, :]).reshape(-1, zeta.shape[1])]
        zr = self.surface.sample_surface(lower, upper, n, rng)
        sr = rng.uniform(-self.c, self.c, size=n)
        pts.append(zr + sr[:, None] * self.surface.normal_at(zr))
        return np.concatenate(pts)

    def sampled_kappa(self, lower, upper, n=4000, rng=None):
        """Sampled ``sup |G'(x) - I|_2`` over the support inside a window."""
        if self.trivial:
            return 0.0
        rng = np.random.default_rng(0) if rng is None else rng
        x = self.contraction_samples(lower, upper, n, rng)
        J = self.G_jacobian(x) - np.eye(x.shape[1])
        return float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1))))


def default_window(model, half_width=5.0):
    x0 = np.asarray(model.x0, dtype=float)
    return x0 - half_width, x0 + half_width


def build_transform(model, epsilon0, c="auto", kappa_max=0.5, window=None,
                    n_samples=4000, seed=0, max_halvings=40):
    """Construct and certify ``G`` for a model.

    With ``c="auto"`` the bump radius starts at ``epsilon0/2`` and is halved
    until the sampled contraction ``kappa`` is at most ``kappa_max``.  An
    explicit ``c`` is certified once and rejected if it fails.
    """
    surface = model.surface
    if epsilon0 >= surface.reach:
        raise ValueError(f"epsilon0={epsilon0} must be below the reach {surface.reach}")
    alpha = AlphaField(model)
    lower, upper = default_window(model) if window is None else window
    rng = np.random.default_rng(seed)
    if not alpha.trivial:
        zeta = surface.sample_surface(lower, upper, 256, rng)
        alpha.bound_estimate = float(np.max(np.linalg.norm(alpha(zeta), axis=-1)))
    else:
        alpha.bound_estimate = 0.0
    auto = c == "auto"
    cc = epsilon0 / 2.0 if auto else float(c)
    kappa = None
    for _ in range(max_halvings if auto else 1):
        params = TransformParams(cc, epsilon0, kappa_max)
        tr = Transform(surface, params, alpha)
        kappa = tr.sampled_kappa(lower, upper, n_samples, np.random.default_rng(seed))
        if kappa <= kappa_max:
            tr.kappa = kappa
            return tr
        cc *= 0.5
    raise CertificationError(
        f"sampled contraction {kappa:.3f} exceeds kappa_max={kappa_max}", kappa=kappa)
