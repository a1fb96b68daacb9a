import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anisoflow.energy import (
    InadmissibleModelError,
    ModelError,
    builtin_models,
    check_positive_definite,
    constant_model,
    contour_energy,
    d_tensor,
    ellipse_gamma_parametric,
    ellipse_model,
    fourfold_model,
    gamma_hessian,
    get_model,
    inclination,
    is_positive_definite,
    require_admissible,
    sixfold377_model,
    tabulated_model,
    tensor_eigenvalues,
)

ANGULAR_MODELS = {
    "constant": constant_model(1.5),
    "sixfold377": sixfold377_model(),
    "fourfold": fourfold_model(),
}


def extension(model, p):
    """Degree-0 homogeneous extension gamma(p / |p|) at a single point."""
    return float(model.gamma(math.atan2(p[1], p[0])))


def fd_hessian(model, n, eps=1e-4):
    """Oracle: central second differences of the extension in Cartesian p."""
    e = np.eye(2)
    H = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            H[i, j] = (
                extension(model, n + eps * (e[i] + e[j]))
                - extension(model, n + eps * (e[i] - e[j]))
                - extension(model, n - eps * (e[i] - e[j]))
                + extension(model, n - eps * (e[i] + e[j]))
            ) / (4 * eps * eps)
    return H


def _unit(lam):
    lam = np.asarray(lam, dtype=float)
    return np.stack([np.cos(lam), np.sin(lam)], axis=-1)


# --------------------------------------------------------------------------
# inclination


def test_inclination_examples():
    assert inclination([1.0, 0.0]) == 0.0
    assert math.isclose(inclination([0.0, 1.0]), math.pi / 2)
    s = math.sqrt(2) / 2
    assert math.isclose(inclination([-s, -s]), 5 * math.pi / 4)


def test_inclination_range_and_negative_zero():
    lam = inclination(np.array([[1.0, -0.0], [1.0, -1e-18]]))
    assert np.all((lam >= 0) & (lam < 2 * np.pi))


def test_inclination_rejects_non_unit():
    with pytest.raises(ValueError):
        inclination([1.0, 1.0])


@given(st.floats(0.0, 2 * np.pi, exclude_max=True))
def test_inclination_inverts_unit_vector(lam):
    assert math.isclose(math.cos(inclination(_unit(lam))), math.cos(lam), abs_tol=1e-12)
    assert math.isclose(math.sin(inclination(_unit(lam))), math.sin(lam), abs_tol=1e-12)


# --------------------------------------------------------------------------
# derivatives and Hessian


@pytest.mark.parametrize("name", sorted(ANGULAR_MODELS) + ["ellipse"])
def test_derivatives_match_finite_differences(name):
    model = ANGULAR_MODELS.get(name) or ellipse_model(2.0, 0.2)
    lam = np.linspace(0, 2 * np.pi, 64, endpoint=False) + 0.01
    eps = 1e-5
    fd1 = (model.gamma(lam + eps) - model.gamma(lam - eps)) / (2 * eps)
    fd2 = (model.dgamma(lam + eps) - model.dgamma(lam - eps)) / (2 * eps)
    scale1 = np.abs(model.dgamma(lam)).max() + 1e-12
    scale2 = np.abs(model.d2gamma(lam)).max() + 1e-12
    assert np.abs(fd1 - model.dgamma(lam)).max() <= 1e-6 * max(scale1, 1.0)
    assert np.abs(fd2 - model.d2gamma(lam)).max() <= 1e-6 * max(scale2, 1.0)


@pytest.mark.parametrize("name", sorted(ANGULAR_MODELS))
def test_models_periodic_and_positive(name):
    model = ANGULAR_MODELS[name]
    lam = np.linspace(0, 2 * np.pi, 97)
    for f in (model.gamma, model.dgamma, model.d2gamma):
        assert np.allclose(f(lam), f(lam + 2 * np.pi), atol=1e-12)
    assert np.all(model.gamma(lam) > 0)


@pytest.mark.parametrize("name", sorted(ANGULAR_MODELS))
def test_hessian_matches_finite_differences(name, rng):
    model = ANGULAR_MODELS[name]
    lam = rng.uniform(0, 2 * np.pi, 100)
    n = _unit(lam)
    H = gamma_hessian(model, n)
    scale = max(1.0, np.abs(model.d2gamma(lam)).max())
    for k in range(100):
        fd = fd_hessian(model, n[k])
        ours = np.array([[H[k, 0], H[k, 2]], [H[k, 2], H[k, 1]]])
        assert np.abs(ours - fd).max() / scale < 1e-5


@pytest.mark.parametrize("name", sorted(ANGULAR_MODELS))
def test_hessian_identities(name, rng):
    model = ANGULAR_MODELS[name]
    lam = rng.uniform(0, 2 * np.pi, 200)
    n = _unit(lam)
    t = np.column_stack([-n[:, 1], n[:, 0]])
    xx, yy, xy = gamma_hessian(model, n).T
    Hn = np.column_stack([xx * n[:, 0] + xy * n[:, 1], xy * n[:, 0] + yy * n[:, 1]])
    g1, g2 = model.dgamma(lam), model.d2gamma(lam)
    # contraction with the normal (Euler relation of the degree-0 extension)
    assert np.allclose(Hn, -g1[:, None] * t, atol=1e-12)
    tHt = xx * t[:, 0] ** 2 + 2 * xy * t[:, 0] * t[:, 1] + yy * t[:, 1] ** 2
    assert np.allclose(tHt, g2, atol=1e-12)
    assert np.allclose(xx + yy, g2, atol=1e-12)


def test_hessian_examples():
    assert np.allclose(gamma_hessian(constant_model(1.0), [0.3, 0.4] / np.hypot(0.3, 0.4)), 0.0)
    assert np.allclose(gamma_hessian(fourfold_model(), [1.0, 0.0]), [0.0, -16.0, 0.0])
    assert np.allclose(gamma_hessian(sixfold377_model(), [1.0, 0.0]), 0.0, atol=1e-15)


def test_hessian_refuses_prescribed_model():
    with pytest.raises(ModelError):
        gamma_hessian(ellipse_model(2.0, 0.2), [1.0, 0.0])


# --------------------------------------------------------------------------
# diffusion tensors


def test_d_tensor_examples():
    assert np.allclose(d_tensor(constant_model(1.0), [0.6, 0.8], "aniso"), [1.0, 1.0, 0.0])
    g0 = 1 - 8 / 377
    assert np.allclose(d_tensor(sixfold377_model(), [1.0, 0.0], "aniso"), [g0, g0, 0.0])
    assert np.allclose(d_tensor(fourfold_model(), [1.0, 0.0], "iso"), [3.0, 3.0, 0.0])


def test_ellipse_aniso_is_three_times_iso():
    model = ellipse_model(2.0, 0.2)
    n = _unit(np.linspace(0, 2 * np.pi, 360, endpoint=False))
    assert np.array_equal(d_tensor(model, n, "aniso"), 3.0 * d_tensor(model, n, "iso"))


def test_d_tensor_unknown_variant():
    with pytest.raises(ModelError):
        d_tensor(constant_model(), [1.0, 0.0], "both")


# --------------------------------------------------------------------------
# positive definiteness


def test_pd_checker_against_eigenvalues(rng):
    D = rng.normal(size=(10_000, 3))
    # make borderline cases common
    D[::4, 2] = np.sqrt(np.abs(D[::4, 0] * D[::4, 1])) * rng.choice([-1, 1], size=len(D[::4]))
    D[::4, 2] *= 1 + rng.normal(scale=1e-3, size=len(D[::4]))
    ours = is_positive_definite(D)
    oracle = np.array([np.linalg.eigvalsh([[a, c], [c, b]]).min() > 0 for a, b, c in D])
    assert np.array_equal(ours, oracle)


def test_tensor_eigenvalues_against_numpy(rng):
    D = rng.normal(size=(500, 3))
    oracle = np.array([np.linalg.eigvalsh([[a, c], [c, b]]) for a, b, c in D])
    assert np.allclose(tensor_eigenvalues(D), oracle, atol=1e-12)


def test_pd_report_examples():
    r = check_positive_definite(constant_model(1.0))
    assert r.admissible and math.isclose(r.worst_eigenvalue, 1.0)
    assert check_positive_definite(sixfold377_model()).admissible
    bad = check_positive_definite(fourfold_model())
    assert not bad.admissible
    assert math.isclose(bad.worst_eigenvalue, -13.0, abs_tol=1e-9)
    assert bad.dxy_margin_min < 0
    assert "INADMISSIBLE" in bad.summary()


def test_pd_needs_enough_samples():
    with pytest.raises(ValueError):
        check_positive_definite(constant_model(), samples=100)


def test_require_admissible_raises():
    with pytest.raises(InadmissibleModelError):
        require_admissible(fourfold_model())
    assert require_admissible(sixfold377_model()).admissible


# --------------------------------------------------------------------------
# catalog


def test_ellipse_model_examples():
    model = ellipse_model(2.0, 0.2)
    assert math.isclose(float(model.gamma(0.0)), 0.04)
    assert math.isclose(float(model.gamma(np.pi / 2)), 0.16)
    assert math.isclose(ellipse_gamma_parametric(0.0, 2.0, 0.2), 0.04)
    assert math.isclose(ellipse_gamma_parametric(np.pi / 2, 2.0, 0.2), 0.16)


@given(st.floats(0.0, 2 * np.pi), st.floats(1.0, 8.0), st.floats(0.01, 1.0))
@settings(max_examples=50)
def test_ellipse_model_agrees_with_parametric_form(theta, r, b):
    # outward normal of (r b cos t, b sin t) is proportional to (cos t / r, sin t)
    n = np.array([np.cos(theta) / r, np.sin(theta)])
    n /= np.linalg.norm(n)
    lam = math.atan2(n[1], n[0])
    assert math.isclose(float(ellipse_model(r, b).gamma(lam)), ellipse_gamma_parametric(theta, r, b), rel_tol=1e-10)


def test_sixfold_value():
    assert math.isclose(float(sixfold377_model().gamma(np.pi / 2)), 1 + 8 / 377)


def test_get_model_parsing(tmp_path):
    assert set(builtin_models()) >= {"constant", "sixfold377", "fourfold", "ellipse"}
    m = get_model("ellipse(2, 0.2)")
    assert m.params == (2.0, 0.2) and m.label == "ellipse(2, 0.2)"
    assert get_model("constant", 2.0).params == (2.0,)
    with pytest.raises(ModelError):
        get_model("nosuch")
    with pytest.raises(ModelError):
        get_model("sixfold377(1, 2)")


def test_tabulated_model_reproduces_smooth_table(tmp_path):
    lam = np.linspace(0, 2 * np.pi, 180, endpoint=False)
    exact = sixfold377_model()
    path = tmp_path / "table.csv"
    rows = "\n".join(f"{a:.17g},{g:.17g}" for a, g in zip(lam, exact.gamma(lam)))
    path.write_text("lambda,gamma\n" + rows + "\n")
    model = get_model(str(path))
    probe = np.linspace(0, 2 * np.pi, 1000)
    assert np.abs(model.gamma(probe) - exact.gamma(probe)).max() < 1e-6
    assert np.abs(model.dgamma(probe) - exact.dgamma(probe)).max() < 1e-4
    assert check_positive_definite(model).admissible


def test_tabulated_model_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,1\n1,-1\n2,1\n3,1\n")
    with pytest.raises(ModelError):
        tabulated_model(path)
    path.write_text("0,1\n1,1\n")
    with pytest.raises(ModelError):
        tabulated_model(path)


def test_contour_energy_constant():
    n = _unit(np.linspace(0, 2 * np.pi, 10, endpoint=False))
    assert math.isclose(contour_energy(constant_model(2.0), n, np.full(10, 0.1)), 2.0)
