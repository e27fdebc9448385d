import json
import math

import numpy as np
from scipy.optimize import brentq
import pytest

from lipkern import estimator as E
from lipkern import hodgkin, monotone
from lipkern.kernels import (Bilinear, ConvexSum, Gaussian, InversePower, PolynomialScalar, ScaledLaplacian,
                             ScalarTimesOperator, uniform_box)
from lipkern.numerics import sqrt_psd
from conftest import random_psd


def spectral_phi(g, ybar, gamma):
    """Oracle: sqrt(sum lambda_i yhat_i^2 / (lambda_i + gamma)^2) in the eigenbasis."""
    w, q = np.linalg.eigh(g)
    w = np.clip(w, 0, None)
    yh = q.T @ ybar
    return math.sqrt(np.sum(w * yh**2 / (w + gamma) ** 2))


def objective(gram, y, c, gamma):
    """Regularized least-squares objective for H = sum_j K(., u_j) c_j."""
    gc = gram @ c
    return float(np.sum((y - gc) ** 2) + gamma * c @ gc)


def test_dataset_validation():
    with pytest.raises(ValueError):
        E.Dataset(np.zeros((2, 3)), np.zeros((3, 1)))
    d = E.Dataset([[1.0, 2.0]], [[3.0]])
    assert (d.n, d.d, d.m) == (1, 2, 1)


def test_assemble_gram_kronecker_example():
    inputs = np.array([[0.0], [1.0]])
    sigma = 1.0 / math.sqrt(math.log(2.0))  # exp(-1/sigma^2) = 0.5
    gram = E.assemble_gram(Gaussian(sigma), inputs, 2)
    assert gram.structure == "scalar_identity"
    expected = np.array([[1, 0, .5, 0], [0, 1, 0, .5], [.5, 0, 1, 0], [0, .5, 0, 1]])
    np.testing.assert_allclose(gram.matrix, expected, atol=1e-15)
    np.testing.assert_allclose(gram.block(0, 1), 0.5 * np.eye(2))


def test_assemble_gram_single_point():
    gram = E.assemble_gram(Gaussian(2.0), [[1.0, 2.0]], 1)
    np.testing.assert_array_equal(gram.matrix, [[1.0]])


def test_assemble_gram_blocks_and_psd(rng):
    r = np.array([[0.5, 0.2], [0.2, 0.3]])
    k = ScalarTimesOperator(ScaledLaplacian(), r)
    x = rng.standard_normal((3, 4))
    gram = E.assemble_gram(k, x, 2)
    assert gram.structure == "dense"
    for i in range(3):
        for j in range(3):
            np.testing.assert_allclose(gram.block(i, j), k.eval_operator(x[i], x[j], 2), atol=1e-15)
    assert np.linalg.eigvalsh(gram.matrix)[0] >= -1e-8
    assert np.linalg.eigvalsh(E.assemble_gram(ScaledLaplacian(), x, 3).matrix)[0] >= -1e-8


def test_fit_one_point_bilinear_by_hand():
    # G = [1], (1 + 1) c = 2 so c = 1 and H(u) = u
    model = E.fit(Bilinear(), E.Dataset([[1.0]], [[2.0]]), 1.0)
    np.testing.assert_array_equal(model.coefficients, [[1.0]])
    np.testing.assert_array_equal(E.predict(model, [3.0]), [3.0])
    assert model.rkhs_norm == 1.0 and model.lipschitz_certified == 1.0


def test_fit_heavy_regularization(rng):
    data = E.Dataset(rng.standard_normal((6, 3)), rng.standard_normal((6, 2)))
    gamma = 1e9
    model = E.fit(Gaussian(2.0), data, gamma)
    assert model.rkhs_norm < 1e-6 * np.linalg.norm(data.outputs)
    # Neumann series: c = y / gamma - G y / gamma^2 + O(||G||^2 / gamma^3)
    g = E.assemble_gram(Gaussian(2.0), data.inputs, 2).base
    expected = data.outputs / gamma - g @ data.outputs / gamma**2
    np.testing.assert_allclose(model.coefficients, expected, rtol=1e-12, atol=1e-25)


def test_fit_rejects_nonpositive_gamma():
    with pytest.raises(ValueError):
        E.fit(Bilinear(), E.Dataset([[1.0]], [[1.0]]), 0.0)


def test_fit_duplicate_inputs_with_conflicting_outputs():
    data = E.Dataset([[1.0], [1.0]], [[0.0], [2.0]])
    model = E.fit(Gaussian(2.0), data, 0.1)
    # both copies predict the same value, the average pulled towards zero
    assert E.predict(model, [1.0])[0] == pytest.approx(2.0 / 2.1)


def test_uncertified_model_has_no_lipschitz_certificate(rng):
    data = E.Dataset(rng.standard_normal((4, 2)), rng.standard_normal((4, 1)))
    model = E.fit(PolynomialScalar(0.0, 2), data, 0.1)
    assert model.lipschitz_certified is None
    with pytest.raises(E.UncertifiedKernelError):
        E.empirical_lipschitz_check(model, uniform_box(-1, 1, 2), 10)


def test_predict_interpolates_at_small_gamma():
    x = np.array([[0.0], [3.0], [6.0], [9.0]])
    y = np.array([[1.0, -1.0], [2.0, 0.5], [0.0, 0.0], [-1.0, 3.0]])
    model = E.fit(Gaussian(2.0), E.Dataset(x, y), 1e-12)
    np.testing.assert_allclose(E.predict(model, x), y, atol=1e-4)


def test_predict_zero_model_and_dimension_check():
    model = E.FittedModel(ScaledLaplacian(), np.zeros((3, 2)), np.zeros((3, 4)), 1.0, 0.0, 0.0)
    np.testing.assert_array_equal(E.predict(model, [1.0, 1.0]), np.zeros(4))
    with pytest.raises(ValueError, match="dimension"):
        E.predict(model, [1.0, 2.0, 3.0])


def test_predict_operator_kernel_matches_definition(rng):
    r = np.array([[0.5, 0.1], [0.1, 0.4]])
    k = ScalarTimesOperator(Gaussian(2.0), r)
    data = E.Dataset(rng.standard_normal((4, 3)), rng.standard_normal((4, 2)))
    model = E.fit(k, data, 0.05)
    u = rng.standard_normal(3)
    expected = sum(k.eval_operator(u, xj, 2) @ cj for xj, cj in zip(data.inputs, model.coefficients))
    np.testing.assert_allclose(E.predict(model, u), expected, atol=1e-14)


def test_rkhs_norm_at_examples():
    gram = E.GramMatrix(2, 1, dense=np.eye(2))
    assert E.rkhs_norm_at(gram, [1.0, 1.0], 1.0) == pytest.approx(1 / math.sqrt(2), rel=1e-15)
    assert E.rkhs_norm_at(gram, [0.0, 0.0], 1.0) == 0.0
    assert E.rkhs_norm_at(E.GramMatrix(2, 1, dense=np.zeros((2, 2))), [3.0, -1.0], 1.0) == 0.0


def test_rkhs_norm_matches_fit_invariant(rng):
    data = E.Dataset(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)))
    k = ScaledLaplacian()
    model = E.fit(k, data, 0.01)
    expected = sum(model.coefficients[i] @ k.eval_operator(data.inputs[i], data.inputs[j], 3) @ model.coefficients[j]
                   for i in range(5) for j in range(5))
    assert model.rkhs_norm**2 == pytest.approx(expected, rel=1e-8)


def test_norm_identity_and_spectral_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(1, 10))
        g = random_psd(rng, n, rank=int(rng.integers(1, n + 1)))
        y = rng.standard_normal(n)
        gamma = 10.0 ** rng.uniform(-3, 2)
        gram = E.GramMatrix(n, 1, dense=g)
        phi = E.rkhs_norm_at(gram, y, gamma)
        explicit = np.linalg.norm(sqrt_psd(g) @ np.linalg.solve(g + gamma * np.eye(n), y))
        assert phi == pytest.approx(explicit, rel=1e-7)
        assert phi == pytest.approx(spectral_phi(g, y, gamma), rel=1e-7)


def test_phi_nonincreasing_on_log_grid(rng):
    grid = np.logspace(-6, 3, 30)
    for _ in range(30):
        n = int(rng.integers(1, 10))
        g = random_psd(rng, n)
        y = rng.standard_normal(n)
        gram = E.GramMatrix(n, 1, dense=g)
        vals = [E.rkhs_norm_at(gram, y, gm) for gm in grid]
        assert all(b <= a + 1e-10 for a, b in zip(vals, vals[1:]))


def test_phi_nonincreasing_rank_deficient(rng):
    # below gamma ~ sqrt(eps ||G||) the norm of a singular problem is roundoff
    for _ in range(30):
        n = int(rng.integers(2, 10))
        g = random_psd(rng, n, rank=int(rng.integers(1, n)))
        y = rng.standard_normal(n)
        gram = E.GramMatrix(n, 1, dense=g)
        grid = np.logspace(-3, 3, 30) * np.trace(g)
        vals = [E.rkhs_norm_at(gram, y, gm) for gm in grid]
        assert all(b <= a + 1e-10 for a, b in zip(vals, vals[1:]))


def test_tune_gamma_closed_form():
    # phi(gamma) = sqrt(2) / (1 + gamma) = 1 / sqrt(2) at gamma = 1
    gram = E.GramMatrix(2, 1, dense=np.eye(2))
    res = E.tune_gamma(gram, [1.0, 1.0], 1 / math.sqrt(2))
    assert res.gamma == pytest.approx(1.0, rel=2e-6)
    assert res.achieved_norm <= 1 / math.sqrt(2)


def test_tune_gamma_returns_floor_when_inactive():
    gram = E.GramMatrix(2, 1, dense=np.eye(2))
    res = E.tune_gamma(gram, [1.0, 1.0], 10.0)
    assert res.gamma == E.gamma_floor(gram) == pytest.approx(1e-12)


def test_tune_gamma_is_minimal(rng):
    for _ in range(10):
        g = random_psd(rng, 6, rank=4)
        y = 3 * rng.standard_normal(6)
        gram = E.GramMatrix(6, 1, dense=g)
        ell = 0.5 * spectral_phi(g, y, 1e-6)
        res = E.tune_gamma(gram, y, ell)
        assert E.rkhs_norm_at(gram, y, res.gamma) <= ell
        assert E.rkhs_norm_at(gram, y, res.gamma / (1 + 1e-5)) > ell
        assert res.gamma == pytest.approx(brentq(lambda t: spectral_phi(g, y, t) - ell, 1e-12, 1e6), rel=1e-5)


def test_tune_gamma_singular_gram_skips_roundoff_region(rng):
    # range part of y alone has norm far below ell, but tiny gamma is unresolvable
    g = random_psd(rng, 6, rank=2)
    y = 3 * rng.standard_normal(6)
    gram = E.GramMatrix(6, 1, dense=g)
    res = E.tune_gamma(gram, y, 1e6)
    val, ok = E._phi_checked(gram, y, res.gamma)
    assert ok and val <= 1e6
    assert res.gamma < 1e-3 * np.trace(g)


def test_tune_gamma_hh_scattered_data():
    data, _, _ = hodgkin.normalize(hodgkin.generate_dataset())
    sd = monotone.scatter(data).as_dataset()
    gram = E.assemble_gram(ScaledLaplacian(), sd.inputs, sd.m)
    res = E.tune_gamma(gram, sd.outputs, 0.9903)
    assert 2e-4 <= res.gamma <= 1e-3


def test_kronecker_fast_path_matches_dense(rng):
    base = Gaussian(2.0)
    dense_kernel = ConvexSum(((1.0, ScalarTimesOperator(base, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])),))
    data = E.Dataset(rng.standard_normal((7, 2)), rng.standard_normal((7, 3)))
    fast, slow = E.fit(base, data, 0.01), E.fit(dense_kernel, data, 0.01)
    assert E.assemble_gram(dense_kernel, data.inputs, 3).structure == "dense"
    np.testing.assert_allclose(fast.coefficients, slow.coefficients, atol=1e-9)
    assert fast.rkhs_norm == pytest.approx(slow.rkhs_norm, rel=1e-12)


def test_representer_solution_is_optimal(rng):
    for _ in range(20):
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        data = E.Dataset(rng.standard_normal((n, 2)), rng.standard_normal((n, m)))
        gamma = 10.0 ** rng.uniform(-2, 1)
        model = E.fit(Gaussian(2.0), data, gamma)
        g = E.assemble_gram(Gaussian(2.0), data.inputs, m).matrix
        y, c = data.outputs.reshape(-1), model.coefficients.reshape(-1)
        j0 = objective(g, y, c, gamma)
        delta = 1e-3 * rng.standard_normal((2000, n * m))
        assert all(objective(g, y, c + d, gamma) >= j0 - 1e-14 for d in delta)


def test_empirical_lipschitz_check(rng):
    zero = E.FittedModel(ScaledLaplacian(), np.zeros((2, 2)), np.zeros((2, 2)), 1.0, 0.0, 0.0)
    rep = E.empirical_lipschitz_check(zero, uniform_box(-1, 1, 2), 100)
    assert rep.max_ratio == 0.0 and rep.passed
    data = E.Dataset(rng.uniform(-2, 2, (8, 2)), rng.standard_normal((8, 2)))
    for k in (Gaussian(math.sqrt(2)), ScaledLaplacian(), InversePower(2.0, 1.0), Bilinear()):
        model = E.fit(k, data, 0.05)
        rep = E.empirical_lipschitz_check(model, uniform_box(-3, 3, 2), 4000, seed=1)
        assert rep.passed, (k, rep)


def test_model_json_round_trip_bit_exact(tmp_path, rng):
    data = E.Dataset(rng.standard_normal((5, 3)), rng.standard_normal((5, 2)))
    k = ConvexSum(((0.25, Gaussian(2.0)), (0.75, ScalarTimesOperator(ScaledLaplacian(), np.diag([0.5, 1.0])))))
    model = E.fit(k, data, 0.0123)
    model.save(tmp_path / "m.json")
    back = E.FittedModel.load(tmp_path / "m.json")
    assert back.to_dict() == model.to_dict()
    assert np.array_equal(back.coefficients, model.coefficients)
    assert back.gamma == model.gamma and back.rkhs_norm == model.rkhs_norm
    obj = json.loads((tmp_path / "m.json").read_text())
    assert set(obj) == {"kernel", "train_inputs", "coefficients", "gamma", "rkhs_norm", "lipschitz_certified", "dims"}
    assert obj["dims"] == {"n": 5, "d": 3, "m": 2}
