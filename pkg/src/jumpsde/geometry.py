"""Exceptional hypersurfaces: distance, closest-point projection and normals.

Two surface families are supported.  :class:`AffineHyperplane` handles
``{x : a.x = b}`` in closed form; :class:`LevelSet` handles ``{x : g(x) = 0}``
by Newton iteration on the Lagrange conditions of the closest-point problem.

All queries accept a single point of shape ``(d,)`` or a batch of shape
``(n, d)`` and return arrays of the matching leading shape.
"""

import numpy as np

from .errors import (ContractViolation, DegenerateNormalError,
                     OutsideTubeError, ProjectionError)

TOL_PROJ = 1e-12
MAX_NEWTON = 50
TOL_ON_SURFACE = 1e-9
TOL_GRAD = 1e-10


def _as_points(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


class Hypersurface:
    """Common interface.  Subclasses implement the geometric primitives."""

    dim: int
    reach: float

    def side(self, x):
        """Value whose sign tells on which side of the surface ``x`` lies."""
        raise NotImplementedError

    def closest_point(self, x):
        """Return ``(p, inside)`` without raising for points outside the tube."""
        raise NotImplementedError

    def normal_at(self, zeta):
        raise NotImplementedError

    def projection_jacobian(self, x):
        raise NotImplementedError

    def sample_surface(self, lower, upper, n, rng):
        raise NotImplementedError

    @property
    def tube_radius(self):
        return self.reach

    # -- public operations -------------------------------------------------

    def project(self, x):
        """Closest point on the surface; raises for points outside the tube."""
        pts, single = _as_points(x)
        p, inside = self.closest_point(pts)
        if not np.all(inside):
            bad = pts[~inside][0]
            raise OutsideTubeError(
                f"point {bad} lies outside the tube of radius {self.tube_radius}",
                iterate=bad)
        return p[0] if single else p

    def distance(self, x, flag=False):
        """Euclidean distance to the surface.

        For level sets the value is exact inside the declared tube; outside it
        the tube radius is returned as a lower bound and, with ``flag=True``,
        the boolean mask of such points is returned alongside.
        """
        pts, single = _as_points(x)
        p, inside = self.closest_point(pts)
        d = np.linalg.norm(pts - p, axis=-1)
        d = np.where(inside, d, np.maximum(d, self.tube_radius))
        outside = ~inside
        if single:
            d, outside = d[0], bool(outside[0])
        return (d, outside) if flag else d

    def unit_normal(self, zeta):
        pts, single = _as_points(zeta)
        p, _ = self.closest_point(pts)
        off = np.linalg.norm(pts - p, axis=-1)
        if np.any(off > TOL_ON_SURFACE):
            raise ContractViolation(
                f"unit_normal needs points on the surface (distance {off.max():.3e})")
        n = self.normal_at(pts)
        return n[0] if single else n

    def signed_distance(self, x):
        """``n(p(x)) . (x - p(x))``; only meaningful inside the tube."""
        pts, single = _as_points(x)
        p, _ = self.closest_point(pts)
        s = np.sum(self.normal_at(p) * (pts - p), axis=-1)
        return s[0] if single else s


class AffineHyperplane(Hypersurface):
    """The hyperplane ``{x : a.x = b}`` with ``a`` normalised on construction."""

    reach = np.inf

    def __init__(self, normal, offset=0.0):
        a = np.asarray(normal, dtype=float).ravel()
        norm = np.linalg.norm(a)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("hyperplane normal must be a non-zero vector")
        self.normal = a / norm
        self.offset = float(offset) / norm
        self.dim = a.size

    def __repr__(self):
        return f"AffineHyperplane(normal={self.normal.tolist()}, offset={self.offset})"

    def side(self, x):
        return np.einsum("...i,i->...", np.asarray(x, dtype=float), self.normal) - self.offset

    signed = side

    def closest_point(self, x):
        x = np.asarray(x, dtype=float)
        s = self.side(x)
        p = x - s[..., None] * self.normal
        return p, np.ones(s.shape, dtype=bool)

    def project(self, x):
        return self.closest_point(x)[0]

    def distance(self, x, flag=False):
        d = np.abs(self.side(x))
        if flag:
            return d, np.zeros(np.shape(d), dtype=bool) if np.ndim(d) else False
        return d

    def signed_distance(self, x):
        return self.side(x)

    def normal_at(self, zeta):
        zeta = np.asarray(zeta, dtype=float)
        return np.broadcast_to(self.normal, zeta.shape).copy()

    def projection_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        P = np.eye(self.dim) - np.outer(self.normal, self.normal)
        return np.broadcast_to(P, x.shape[:-1] + P.shape).copy()

    def sample_surface(self, lower, upper, n, rng):
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        out = []
        need = n
        for _ in range(100):
            cand = self.project(rng.uniform(lower, upper, size=(2 * need + 16, self.dim)))
            ok = np.all((cand >= lower) & (cand <= upper), axis=-1)
            out.append(cand[ok][:need])
            need -= out[-1].shape[0]
            if need <= 0:
                break
        pts = np.concatenate(out) if out else np.empty((0, self.dim))
        if pts.shape[0] < n:
            raise ContractViolation("window does not contain a segment of the surface")
        return pts


class LevelSet(Hypersurface):
    """Zero set of a scalar field ``g`` with ``grad g != 0`` on the tube.

    Subclasses provide :meth:`g`, :meth:`grad` and :meth:`hess` (vectorised
    over leading axes).  ``tube_radius`` is the user-asserted lower bound on
    the reach; it is sample-checked by :meth:`check_tube`.
    """

    def __init__(self, dim, tube_radius):
        if tube_radius <= 0:
            raise ValueError("tube radius must be positive")
        self.dim = int(dim)
        self.reach = float(tube_radius)

    def g(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        raise NotImplementedError

    def side(self, x):
        return self.g(np.asarray(x, dtype=float))

    def normal_at(self, zeta):
        gr = self.grad(np.asarray(zeta, dtype=float))
        nrm = np.linalg.norm(gr, axis=-1, keepdims=True)
        if np.any(nrm < TOL_GRAD):
            raise DegenerateNormalError("gradient of the level-set function vanishes")
        return gr / nrm

    def _lagrange_system(self, x, p, lam):
        d = self.dim
        gr = self.grad(p)
        H = self.hess(p)
        n = p.shape[0]
        J = np.zeros((n, d + 1, d + 1))
        J[:, :d, :d] = np.eye(d) + lam[:, None, None] * H
        J[:, :d, d] = gr
        J[:, d, :d] = gr
        F = np.empty((n, d + 1))
        F[:, :d] = p - x + lam[:, None] * gr
        F[:, d] = self.g(p)
        return F, J

    def _newton(self, x, strict=True):
        """Newton on the Lagrange system; returns ``(p, lam, converged)``.

        With ``strict`` a point that does not converge raises
        :class:`ProjectionError`; otherwise it is reported in the mask.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gr = self.grad(x)
        gg = np.sum(gr * gr, axis=-1)
        flat = gg < TOL_GRAD ** 2
        if strict and np.any(flat):
            raise ProjectionError("projection failed: vanishing gradient at start",
                                  iterate=x[flat][0])
        lam = np.where(flat, 0.0, self.g(x) / np.where(flat, 1.0, gg))
        p = x - lam[:, None] * gr
        converged = np.zeros(x.shape[0], dtype=bool)
        active = np.flatnonzero(~flat)
        for _ in range(MAX_NEWTON):
            F, J = self._lagrange_system(x[active], p[active], lam[active])
            ok = np.isfinite(F).all(axis=-1)
            done = ok & (np.max(np.abs(F), axis=-1) <= TOL_PROJ)
            converged[active[done]] = True
            keep = ok & ~done
            active, F, J = active[keep], F[keep], J[keep]
            if active.size == 0:
                break
            try:
                step = np.linalg.solve(J, -F[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.einsum("nij,nj->ni", np.linalg.pinv(J), -F)
            p[active] += step[:, :-1]
            lam[active] += step[:, -1]
        if strict and not converged.all():
            bad = np.flatnonzero(~converged)[0]
            raise ProjectionError(
                f"projection failed to converge in {MAX_NEWTON} Newton steps", iterate=p[bad])
        return p, lam, converged

    def closest_point(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p, _, converged = self._newton(x, strict=False)
        p = np.where(converged[:, None], p, x)
        inside = converged & (np.linalg.norm(x - p, axis=-1) < self.tube_radius)
        return p, inside

    def projection_jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p, lam, _ = self._newton(x)
        _, J = self._lagrange_system(x, p, lam)
        d = self.dim
        rhs = np.zeros((x.shape[0], d + 1, d))
        rhs[:, :d, :] = np.eye(d)
        return np.linalg.solve(J, rhs)[:, :d, :]

    def check_tube(self, lower, upper, n, rng):
        """Sample the tube and confirm projections converge with ``grad g != 0``."""
        zeta = self.sample_surface(lower, upper, n, rng)
        nrm = self.normal_at(zeta)
        s = rng.uniform(-0.99, 0.99, size=n) * self.tube_radius
        x = zeta + s[:, None] * nrm
        p, inside = self.closest_point(x)
        return bool(np.all(inside) and np.allclose(p, zeta, atol=1e-8))


class Sphere(LevelSet):
    """``g(x) = |x - center|^2 - radius^2``; the reach equals the radius."""

    def __init__(self, center, radius, tube_radius=None):
        center = np.asarray(center, dtype=float).ravel()
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        tube = 0.9 * radius if tube_radius is None else tube_radius
        if tube >= radius:
            raise ValueError("tube radius must be smaller than the sphere radius")
        super().__init__(center.size, tube)
        self.center = center
        self.radius = float(radius)

    def __repr__(self):
        return f"Sphere(center={self.center.tolist()}, radius={self.radius})"

    def g(self, x):
        y = x - self.center
        return np.sum(y * y, axis=-1) - self.radius ** 2

    def grad(self, x):
        return 2.0 * (x - self.center)

    def hess(self, x):
        H = 2.0 * np.eye(self.dim)
        return np.broadcast_to(H, np.shape(x)[:-1] + H.shape)

    def sample_surface(self, lower, upper, n, rng):
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        out, need = [], n
        for _ in range(200):
            u = rng.standard_normal((4 * need + 16, self.dim))
            u /= np.linalg.norm(u, axis=-1, keepdims=True)
            cand = self.center + self.radius * u
            ok = np.all((cand >= lower) & (cand <= upper), axis=-1)
            out.append(cand[ok][:need])
            need -= out[-1].shape[0]
            if need <= 0:
                break
        pts = np.concatenate(out)
        if pts.shape[0] < n:
            raise ContractViolation("window does not contain a segment of the surface")
        return pts


def surface_from_spec(spec, dim=None):
    """Build a surface from its JSON description (see the config schema)."""
    kind = spec.get("type")
    if kind == "hyperplane":
        surf = AffineHyperplane(spec["normal"], spec.get("offset", 0.0))
    elif kind == "level_set":
        if spec.get("preset") != "sphere":
            raise ValueError(f"unknown level-set preset {spec.get('preset')!r}")
        surf = Sphere(spec["center"], spec["radius"], spec.get("tube_radius"))
    else:
        raise ValueError(f"unknown surface type {kind!r}")
    if dim is not None and surf.dim != dim:
        raise ValueError(f"surface dimension {surf.dim} does not match model dimension {dim}")
    return surf


def surface_to_spec(surface):
    if isinstance(surface, AffineHyperplane):
        return {"type": "hyperplane", "normal": surface.normal.tolist(),
                "offset": surface.offset}
    if isinstance(surface, Sphere):
        return {"type": "level_set", "preset": "sphere",
                "center": surface.center.tolist(), "radius": surface.radius,
                "tube_radius": surface.tube_radius}
    raise TypeError(f"cannot serialise {surface!r}")
