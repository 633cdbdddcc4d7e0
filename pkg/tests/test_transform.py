import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpsde.coefficients import TransformedModel
from jumpsde.errors import (CertificationError, InverseDidNotConverge,
                            NonParallelityError)
from jumpsde.presets import build_model
from jumpsde.transform import (AlphaField, Transform, TransformParams, alpha_at,
                               build_transform, bump)

from conftest import sign_model
from oracles import (G_hyperplane, bump as bump_oracle, central_jacobian,
                     invert_bisection_1d, phi_hyperplane)

SPHERE = {"type": "level_set", "preset": "sphere", "center": [0.0, 0.0], "radius": 1.0}


@pytest.fixture(scope="module")
def sphere_case():
    m = build_model("threshold_affine", {"dim": 2, "x0": [1.0, 0.0]}, SPHERE)
    return m, build_transform(m, 0.5)


@pytest.fixture(scope="module")
def affine_alpha_case():
    # different drift slopes and a state-dependent diffusion: alpha varies along the plane
    m = build_model("threshold_affine", {
        "dim": 2, "A_plus": [[-2.0, 0.3], [0.0, -1.0]],
        "sigma_slopes": [[[0.0, 0.1], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.05]]]})
    return m, build_transform(m, 1.0)


@pytest.fixture(scope="module")
def slope_alpha_case():
    m = build_model("cpp_threshold_2d", {"A_plus": [[-1.0, 0.2], [0.1, -0.5]]})
    return m, build_transform(m, 1.0)


# -- bump and phi -------------------------------------------------------------------

def test_bump_examples():
    assert bump(0.0) == 1.0
    assert bump(1.0) == 0.0 and bump(-1.0) == 0.0 and bump(2.5) == 0.0
    assert bump(0.5) == 0.31640625


@given(st.floats(-3, 3, allow_nan=False))
def test_bump_matches_oracle(u):
    assert float(bump(u)) == pytest.approx(bump_oracle(u), abs=1e-15)


def test_phi_and_G_worked_values(unit_transform):
    tr = unit_transform
    assert tr.phi(np.array([0.0])) == 0.0
    assert tr.phi(np.array([2.0])) == 0.0
    assert tr.phi(np.array([0.5])) == pytest.approx(0.0791015625, abs=1e-15)
    assert tr.G(np.array([0.0]))[0] == 0.0
    assert tr.G(np.array([0.5]))[0] == pytest.approx(0.5791015625, abs=1e-15)
    x = np.array([[-3.0], [-1.0], [1.0], [1.7]])
    np.testing.assert_array_equal(tr.G(x), x)


def test_inverse_worked_value(unit_transform):
    assert unit_transform.G_inverse(np.array([0.5791015625]))[0] == pytest.approx(0.5, abs=1e-10)


def test_derivatives_at_the_surface(unit_transform):
    tr = unit_transform
    assert tr.G_jacobian(np.array([0.0]))[0, 0] == 1.0
    assert tr.G_hessian(np.array([1e-12]))[0, 0, 0] == pytest.approx(2.0)
    assert tr.G_hessian(np.array([-1e-12]))[0, 0, 0] == pytest.approx(-2.0)
    # on the surface the + side value is used
    assert tr.G_hessian(np.array([0.0]))[0, 0, 0] == pytest.approx(2.0)
    np.testing.assert_array_equal(tr.G_jacobian(np.array([[1.0], [-2.0]])), [[[1.0]], [[1.0]]])
    np.testing.assert_array_equal(tr.G_hessian(np.array([[1.0], [-2.0]])), np.zeros((2, 1, 1, 1)))


def test_sign_structure(unit_transform):
    x = np.linspace(-1.0, 1.0, 201)[:, None]
    disp = (unit_transform.G(x) - x)[:, 0]
    assert np.all(disp[x[:, 0] >= 0] >= 0)
    assert np.all(disp[x[:, 0] <= 0] <= 0)


# -- alpha ---------------------------------------------------------------------------

def test_alpha_closed_form_examples():
    m = sign_model()
    assert alpha_at(m, m.surface, np.array([0.0]))[0] == 1.0
    m2 = sign_model(sigma=2.0)
    assert alpha_at(m2, m2.surface, np.array([0.0]))[0] == 0.25
    cont = build_model("threshold_affine", {"dim": 1, "b_plus": [0.4], "b_minus": [0.4]})
    assert alpha_at(cont, cont.surface, np.array([0.0]))[0] == 0.0


def test_alpha_limit_matches_closed_form(slope_alpha_case):
    m, _ = slope_alpha_case
    for zeta in ([0.3, -0.3], [-2.0, 2.0]):
        zeta = np.array(zeta)
        np.testing.assert_allclose(alpha_at(m, m.surface, zeta, "limit"),
                                   alpha_at(m, m.surface, zeta, "closed"), atol=1e-8)


def test_alpha_needs_point_on_surface():
    m = sign_model()
    with pytest.raises(ValueError):
        alpha_at(m, m.surface, np.array([0.3]))


def test_alpha_non_parallelity():
    m = sign_model(sigma=0.0)
    with pytest.raises(NonParallelityError):
        alpha_at(m, m.surface, np.array([0.0]))
    with pytest.raises(NonParallelityError):
        AlphaField(m)


def test_alpha_field_bound(sign_1d):
    _, tr = sign_1d
    assert tr.alpha.bound_estimate == 1.0


# -- derivatives against finite differences ------------------------------------------------

def _tube_points(m, tr, rng, n):
    lo, hi = m.x0 - 3, m.x0 + 3
    zeta = m.surface.sample_surface(lo, hi, n, rng)
    s = rng.uniform(-tr.c, tr.c, n)
    return zeta + s[:, None] * m.surface.normal_at(zeta)


@pytest.mark.parametrize("case", ["sign_1d", "cpp_2d", "sphere_case", "affine_alpha_case",
                                  "slope_alpha_case"])
def test_jacobian_matches_oracle_fd(case, request, rng):
    m, tr = request.getfixturevalue(case)
    x = _tube_points(m, tr, rng, 40)
    J = tr.G_jacobian(x)
    for k in range(len(x)):
        fd = central_jacobian(tr.G, x[k])
        np.testing.assert_allclose(J[k], fd, atol=1e-6)


@pytest.mark.parametrize("case", ["sign_1d", "cpp_2d", "sphere_case", "affine_alpha_case",
                                  "slope_alpha_case"])
def test_hessian_matches_fd_of_jacobian(case, request, rng):
    m, tr = request.getfixturevalue(case)
    x = _tube_points(m, tr, rng, 40)
    # stay away from the surface where the Hessian jumps
    x = x[np.abs(m.surface.signed_distance(x)) > 1e-3]
    H = tr.G_hessian(x)
    tol = 1e-3 if case == "sphere_case" else 1e-5
    for k in range(len(x)):
        fd = central_jacobian(tr.G_jacobian, x[k], h=1e-6)
        np.testing.assert_allclose(H[k], fd, atol=tol)


def test_G_matches_scalar_oracle(cpp_2d, rng):
    m, tr = cpp_2d
    a, b = m.surface.normal, m.surface.offset
    al = tr.alpha(np.zeros((1, 2)))[0]
    x = _tube_points(m, tr, rng, 200)
    ref = np.array([G_hyperplane(p, a, b, tr.c, al) for p in x])
    np.testing.assert_allclose(tr.G(x), ref, atol=1e-14)
    phi = np.array([phi_hyperplane(p, a, b, tr.c) for p in x])
    np.testing.assert_allclose(tr.phi(x), phi, atol=1e-15)


def test_jacobian_continuous_across_support_boundary(cpp_2d):
    m, tr = cpp_2d
    zeta = np.array([0.4, -0.4])
    n = m.surface.normal
    for sgn in (1.0, -1.0):
        inside = tr.G_jacobian(zeta + sgn * (tr.c - 1e-7) * n)
        outside = tr.G_jacobian(zeta + sgn * (tr.c + 1e-7) * n)
        np.testing.assert_allclose(inside, outside, atol=1e-12)


def test_identity_off_support(cpp_2d, rng):
    m, tr = cpp_2d
    x = rng.uniform(-6, 6, (2000, 2))
    far = np.abs(m.surface.signed_distance(x)) >= tr.c
    np.testing.assert_array_equal(tr.G(x[far]), x[far])
    np.testing.assert_array_equal(tr.G_inverse(x[far]), x[far])


# -- inverse -------------------------------------------------------------------------------

def test_inverse_matches_bisection_oracle(sign_1d, rng):
    _, tr = sign_1d
    z = rng.uniform(-1.5, 1.5, 50)
    x = tr.G_inverse(z[:, None])[:, 0]
    ref = np.array([invert_bisection_1d(v, tr.c, 1.0) for v in z])
    np.testing.assert_allclose(x, ref, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=2))
def test_round_trip_property(cpp_2d, x):
    _, tr = cpp_2d
    x = np.array(x)
    assert np.linalg.norm(tr.G_inverse(tr.G(x)) - x) <= 1e-10
    assert np.linalg.norm(tr.G(tr.G_inverse(x)) - x) <= 1e-10


@pytest.mark.parametrize("case", ["sphere_case", "affine_alpha_case", "slope_alpha_case"])
def test_round_trip_general_alpha(case, request, rng):
    m, tr = request.getfixturevalue(case)
    x = np.concatenate([_tube_points(m, tr, rng, 500), rng.uniform(-3, 3, (500, 2))])
    np.testing.assert_allclose(tr.G_inverse(tr.G(x)), x, atol=1e-10)


def test_inverse_warm_start_does_not_change_answer(cpp_2d, rng):
    _, tr = cpp_2d
    z = rng.uniform(-1, 1, (300, 2))
    a = tr.G_inverse(z)
    b = tr.G_inverse(z, x0=z + rng.normal(0, 0.2, z.shape))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_lipschitz_bounds(cpp_2d, rng):
    m, tr = cpp_2d
    x = _tube_points(m, tr, rng, 3000)
    y = x + rng.normal(0, 0.05, x.shape)
    ratio = np.linalg.norm(tr.G(x) - tr.G(y), axis=1) / np.linalg.norm(x - y, axis=1)
    assert ratio.max() <= 1 + tr.kappa + 1e-9
    zx, zy = tr.G(x), tr.G(y)
    inv = np.linalg.norm(tr.G_inverse(zx) - tr.G_inverse(zy), axis=1) / np.linalg.norm(zx - zy, axis=1)
    assert inv.max() <= 1 / (1 - tr.kappa) + 1e-9


def test_inverse_derivatives(cpp_2d, rng):
    m, tr = cpp_2d
    z = tr.G(_tube_points(m, tr, rng, 5))
    z = z[np.abs(m.surface.signed_distance(tr.G_inverse(z))) > 1e-3]
    Ji = tr.G_inverse_jacobian(z)
    Hi = tr.G_inverse_hessian(z)
    for k in range(len(z)):
        np.testing.assert_allclose(Ji[k], central_jacobian(tr.G_inverse, z[k]), atol=1e-6)
        np.testing.assert_allclose(Hi[k], central_jacobian(tr.G_inverse_jacobian, z[k], 1e-6),
                                   atol=1e-4)


def test_inverse_failure_is_reported():
    m = sign_model()
    m.drift.minus.b[:] = 40.0
    tr = Transform(m.surface, TransformParams(1.0, 1.0), AlphaField(m), kappa=7.0)
    z = np.linspace(-1, 1, 41)[:, None]
    with pytest.raises(InverseDidNotConverge) as err:
        tr.G_inverse(z, x0=z + 0.3)
    assert err.value.kappa == 7.0


# -- certification --------------------------------------------------------------------------

def test_auto_certification_sign_1d(sign_1d):
    _, tr = sign_1d
    assert tr.c == 0.5
    assert tr.kappa <= 0.5


def test_certification_halves_until_contractive():
    m = sign_model()
    m.drift.minus.b[:] = 9.0
    tr = build_transform(m, 1.0)
    assert tr.c < 0.5
    assert tr.kappa <= 0.5
    assert tr.sampled_kappa(m.x0 - 5, m.x0 + 5) == pytest.approx(tr.kappa)


def test_explicit_c_that_fails_is_rejected():
    m = sign_model()
    m.drift.minus.b[:] = 9.0
    with pytest.raises(CertificationError) as err:
        build_transform(m, 1.0, c=1.0)
    assert err.value.kappa > 0.5


def test_params_validation():
    with pytest.raises(ValueError):
        TransformParams(2.0, 1.0)
    with pytest.raises(ValueError):
        TransformParams(0.5, 1.0, kappa_max=1.0)
    with pytest.raises(ValueError):
        TransformParams(0.5, -1.0)


def test_epsilon0_must_stay_below_reach():
    m = build_model("threshold_affine", {"dim": 2, "x0": [1.0, 0.0]}, SPHERE)
    with pytest.raises(ValueError):
        build_transform(m, 1.5)


# -- transformed coefficients ------------------------------------------------------------------

@pytest.mark.parametrize("case", ["cpp_2d", "slope_alpha_case"])
def test_fused_coefficients_match_generic_path(case, request, rng):
    m, tr = request.getfixturevalue(case)
    x = _tube_points(m, tr, rng, 300)
    mu, sig = m.mu(x), m.sigma(x)
    fused = tr.transformed_coefficients(x, mu.copy(), sig.copy())
    J, H = tr.G_jacobian(x), tr.G_hessian(x)
    A = sig @ np.swapaxes(sig, -1, -2)
    mu_ref = np.einsum("nij,nj->ni", J, mu) + 0.5 * np.einsum("nijl,njl->ni", H, A)
    np.testing.assert_allclose(fused[0], mu_ref, atol=1e-12)
    np.testing.assert_allclose(fused[1], J @ sig, atol=1e-12)


def test_fused_path_not_used_for_general_alpha(affine_alpha_case, sphere_case):
    for m, tr in (affine_alpha_case, sphere_case):
        x = m.x0[None]
        assert tr.transformed_coefficients(x, m.mu(x), m.sigma(x)) is None
        TransformedModel(m, tr).coefficients(x)
