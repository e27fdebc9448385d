import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipkern import estimator as E
from lipkern import monotone as M
from lipkern.kernels import Bilinear, Gaussian, PolynomialScalar, ScaledLaplacian, uniform_box


def scaling_model(a: float, tol: float = 1e-10, max_iter: int = 100_000) -> M.MonotoneModel:
    """Picard model of S = a I on R^1 through a one-term bilinear expansion."""
    s = E.FittedModel(Bilinear(), np.array([[1.0]]), np.array([[a]]), 1.0, abs(a), abs(a))
    return M.MonotoneModel(s, abs(a), M.PicardConfig(tol, max_iter))


def test_scatter_example():
    sd = M.scatter(E.Dataset([[1.0, 2.0]], [[0.5, -1.0]]))
    np.testing.assert_array_equal(sd.v, [[1.5, 1.0]])
    np.testing.assert_array_equal(sd.z, [[0.5, 3.0]])


def test_scatter_needs_square_data():
    with pytest.raises(ValueError):
        M.scatter(E.Dataset([[1.0, 2.0]], [[0.5]]))


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_unscatter_inverts_scatter(vals):
    data = E.Dataset(np.array(vals[:2]).reshape(1, 2), np.array(vals[2:]).reshape(1, 2))
    back = M.unscatter(M.scatter(data))
    np.testing.assert_allclose(back.inputs, data.inputs, atol=1e-12 * (1 + np.abs(vals).max()))
    np.testing.assert_allclose(back.outputs, data.outputs, atol=1e-12 * (1 + np.abs(vals).max()))


@pytest.mark.parametrize("a", [0.1, 0.5, 2.0])
def test_cayley_of_scalar(a):
    np.testing.assert_allclose(M.cayley_linear([[a]]), [[(1 - a) / (1 + a)]], rtol=1e-14)


def test_cayley_is_involution(rng):
    for _ in range(20):
        b = rng.standard_normal((3, 3))
        a = b @ b.T + 0.5 * (b - b.T)  # monotone, so I + A is invertible
        np.testing.assert_allclose(M.cayley_linear(M.cayley_linear(a)), a, atol=1e-10 * (1 + np.abs(a).max()))


def test_simulate_half_identity_example():
    res = M.simulate(scaling_model(0.5), [3.0])
    assert res.y[0] == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("a", [0.1, 0.5, 0.9])
def test_simulate_reaches_analytic_fixed_point(a):
    u = np.array([2.5])
    res = M.simulate(scaling_model(a), u, record=True)
    y_star = u * (1 - a) / (1 + a)
    np.testing.assert_allclose(res.y, y_star, atol=1e-8)
    errs = [abs(h[0] - y_star[0]) for h in res.history]
    ulps = 4 * np.finfo(float).eps * abs(u[0])
    for e0, e1 in zip(errs, errs[1:]):
        assert e1 <= a * e0 * (1 + 1e-6) + ulps


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.95), st.floats(-10, 10).filter(lambda x: abs(x) > 1e-3))
def test_contraction_rate_against_final_iterate(a, u):
    # S = -a I converges without oscillation, so the last iterate is a fair proxy
    res = M.simulate(scaling_model(-a), [u], record=True)
    hist = np.array(res.history)[:-2]
    errs = np.linalg.norm(hist - res.y, axis=1)
    for e0, e1 in zip(errs, errs[1:]):
        assert e1 <= a * e0 * (1 + 1e-6) + 4 * np.finfo(float).eps * abs(u)


def test_zero_contraction_returns_input_in_one_step():
    res = M.simulate(scaling_model(0.0), [1.7])
    assert res.iters == 1
    assert res.y[0] == 1.7


def test_simulate_uses_initial_guess():
    res = M.simulate(scaling_model(0.5), [3.0], y0=[1.0])
    assert res.iters == 1


def test_simulate_non_convergence():
    with pytest.raises(M.PicardNonConvergence) as err:
        M.simulate(scaling_model(0.999, max_iter=10), [1.0])
    assert err.value.iters == 10


def test_simulate_dimension_mismatch():
    with pytest.raises(ValueError):
        M.simulate(scaling_model(0.5), [1.0, 2.0])


def test_model_rejects_ell_one():
    s = E.FittedModel(Bilinear(), np.array([[1.0]]), np.array([[0.5]]), 1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        M.MonotoneModel(s, 1.0)


def test_model_rejects_certificate_above_ell():
    s = E.FittedModel(Bilinear(), np.array([[1.0]]), np.array([[0.5]]), 1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        M.MonotoneModel(s, 0.4)


def test_fit_monotone_linear_half():
    u = np.linspace(-2, 2, 9).reshape(-1, 1)
    model = M.fit_monotone(Bilinear(), E.Dataset(u, 0.5 * u), ell=0.99)
    assert model.ell <= 0.99
    v = 1.5 * u
    np.testing.assert_allclose(E.predict(model.s_model, v), v / 3, atol=1e-8)
    for ui in u:
        assert M.simulate(model, ui).y == pytest.approx(0.5 * ui, abs=1e-8)


def test_fit_monotone_refuses_uncertified_kernel():
    u = np.linspace(-2, 2, 5).reshape(-1, 1)
    with pytest.raises(E.UncertifiedKernelError):
        M.fit_monotone(PolynomialScalar(0.0, 2), E.Dataset(u, u), ell=0.9)


def test_fit_monotone_rejects_explicit_gamma_over_budget():
    u = np.linspace(-2, 2, 5).reshape(-1, 1)
    with pytest.raises(ValueError):
        M.fit_monotone(Bilinear(), E.Dataset(u, -0.9 * u), ell=0.5, gamma=1e-9)


def test_transform_simulate_consistency(rng):
    a = np.diag([0.5, 2.0])
    u = rng.standard_normal((4, 2))
    model = M.fit_monotone(Bilinear(), E.Dataset(u, u @ a.T), ell=0.99, gamma=1e-10)
    for ui, yi in zip(u, u @ a.T):
        np.testing.assert_allclose(M.simulate(model, ui).y, yi, atol=1e-4)


def test_monotonicity_check_closed_form():
    model = scaling_model(1 / 3)  # R = 0.5 I
    sampler = uniform_box(-1.0, 1.0, 1)
    chk = M.monotonicity_check(model, sampler, trials=200, seed=3)
    rng = np.random.default_rng(3)
    xs, ys = sampler(rng, 200), sampler(rng, 200)
    assert chk.passed
    assert chk.min_inner == pytest.approx(0.5 * np.min(np.sum((xs - ys) ** 2, axis=1)), rel=1e-8, abs=1e-14)


def test_fitted_monotone_model_is_monotone(rng):
    u = rng.uniform(-1, 1, size=(12, 2))
    y = u + 0.3 * np.tanh(u)
    model = M.fit_monotone(ScaledLaplacian(), E.Dataset(u, y), ell=0.9)
    chk = M.monotonicity_check(model, uniform_box(-1.5, 1.5, 2), trials=200, seed=0)
    assert chk.passed


def test_monotone_model_json_round_trip(tmp_path):
    u = np.linspace(-1, 1, 6).reshape(-1, 2)
    model = M.fit_monotone(Gaussian(2.0), E.Dataset(u, 0.7 * u), ell=0.95)
    path = tmp_path / "m.json"
    model.save(path)
    again = M.MonotoneModel.load(path)
    assert json.loads(path.read_text())["ell"] == model.ell
    assert again.to_dict() == model.to_dict()
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(M.simulate(again, x).y, M.simulate(model, x).y)
