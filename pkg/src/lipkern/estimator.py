"""Regularized least squares in a vector-valued RKHS.

The minimizer of ``sum_i ||y_i - H(u_i)||^2 + gamma ||H||^2`` is
``H(.) = sum_j K(., u_j) c_j`` where the stacked coefficients solve
``(G + gamma I) c = y``. For a nonexpansive kernel the RKHS norm
``sqrt(c^T G c)`` is a Lipschitz constant of ``H``; ``tune_gamma`` picks the
least regularization that keeps that norm within a budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics
from .kernels import Kernel, Sampler, ScalarTimesOperator, kernel_from_dict


class UncertifiedKernelError(ValueError):
    """The operation needs a kernel carrying a nonexpansiveness certificate."""


class NoConvergenceError(RuntimeError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, d)
    outputs: np.ndarray  # (n, m)
    meta: dict | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if self.inputs.ndim != 2 or self.outputs.ndim != 2:
            raise ValueError("inputs and outputs must be lists of vectors")
        if self.inputs.shape[0] < 1:
            raise ValueError("a dataset needs at least one pair")
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but {self.outputs.shape[0]} outputs")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def m(self) -> int:
        return self.outputs.shape[1]

    def to_dict(self) -> dict:
        out = {"inputs": self.inputs.tolist(), "outputs": self.outputs.tolist()}
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "Dataset":
        return cls(np.array(obj["inputs"], dtype=float), np.array(obj["outputs"], dtype=float), obj.get("meta"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GramMatrix:
    """Block Gram matrix on ``(R^m)^n`` in (point, coordinate) order.

    When the kernel is ``k(u, v) I`` only the ``n x n`` base is stored and
    ``matrix`` is ``kron(base, I_m)``.
    """

    n: int
    m: int
    base: np.ndarray | None = None
    dense: np.ndarray | None = None

    @property
    def structure(self) -> str:
        return "scalar_identity" if self.base is not None else "dense"

    @property
    def matrix(self) -> np.ndarray:
        if self.dense is None:
            self.dense = np.kron(self.base, np.eye(self.m))
        return self.dense

    def block(self, i: int, j: int) -> np.ndarray:
        if self.base is not None:
            return self.base[i, j] * np.eye(self.m)
        m = self.m
        return self.matrix[i * m:(i + 1) * m, j * m:(j + 1) * m]

    def trace(self) -> float:
        return float(np.trace(self.base) * self.m if self.base is not None else np.trace(self.dense))

    def solve(self, gamma: float, ybar) -> np.ndarray:
        """``(G + gamma I)^{-1} ybar`` for ``ybar`` of shape ``(n, m)`` or ``(n*m,)``."""
        y = np.asarray(ybar, dtype=float)
        if self.base is not None:
            return numerics.solve_spd(self.base, gamma, y.reshape(self.n, self.m)).reshape(y.shape)
        return numerics.solve_spd(self.dense, gamma, y.reshape(-1)).reshape(y.shape)

    def quad(self, c) -> float:
        """``c^T G c``."""
        c = np.asarray(c, dtype=float)
        if self.base is not None:
            c2 = c.reshape(self.n, self.m)
            return float(np.sum(c2 * (self.base @ c2)))
        c1 = c.reshape(-1)
        return float(c1 @ (self.dense @ c1))


def _scalar_identity(kernel: Kernel) -> bool:
    return kernel.is_scalar or (isinstance(kernel, ScalarTimesOperator) and kernel.is_identity)


def assemble_gram(kernel: Kernel, inputs, m: int) -> GramMatrix:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    n = inputs.shape[0]
    if n < 1:
        raise ValueError("assemble_gram needs at least one input")
    if kernel.output_dim is not None and kernel.output_dim != m:
        raise ValueError(f"kernel acts on R^{kernel.output_dim} but outputs have dimension {m}")
    if _scalar_identity(kernel):
        scalar = kernel.base if isinstance(kernel, ScalarTimesOperator) else kernel
        return GramMatrix(n, m, base=scalar.gram_base(inputs))
    g = np.empty((n * m, n * m))
    for i in range(n):
        for j in range(i, n):
            blk = kernel.eval_operator(inputs[i], inputs[j], m)
            g[i * m:(i + 1) * m, j * m:(j + 1) * m] = blk
            g[j * m:(j + 1) * m, i * m:(i + 1) * m] = blk.T
    return GramMatrix(n, m, dense=0.5 * (g + g.T))


@dataclass
class FittedModel:
    kernel: Kernel
    train_inputs: np.ndarray  # (n, d)
    coefficients: np.ndarray  # (n, m)
    gamma: float
    rkhs_norm: float
    lipschitz_certified: float | None = None

    @property
    def n(self) -> int:
        return self.train_inputs.shape[0]

    @property
    def d(self) -> int:
        return self.train_inputs.shape[1]

    @property
    def m(self) -> int:
        return self.coefficients.shape[1]

    def __call__(self, u) -> np.ndarray:
        return predict(self, u)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "train_inputs": self.train_inputs.tolist(),
            "coefficients": self.coefficients.tolist(),
            "gamma": self.gamma,
            "rkhs_norm": self.rkhs_norm,
            "lipschitz_certified": self.lipschitz_certified,
            "dims": {"n": self.n, "d": self.d, "m": self.m},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FittedModel":
        dims = obj["dims"]
        x = np.array(obj["train_inputs"], dtype=float).reshape(dims["n"], dims["d"])
        c = np.array(obj["coefficients"], dtype=float).reshape(dims["n"], dims["m"])
        return cls(kernel_from_dict(obj["kernel"]), x, c, float(obj["gamma"]), float(obj["rkhs_norm"]),
                   None if obj["lipschitz_certified"] is None else float(obj["lipschitz_certified"]))

    def save(self, path) -> None:
        Path(path).write_text(dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FittedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def dumps(obj) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)


def fit(kernel: Kernel, data: Dataset, gamma: float) -> FittedModel:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    gram = assemble_gram(kernel, data.inputs, data.m)
    coef = gram.solve(gamma, data.outputs)
    norm = math.sqrt(max(0.0, gram.quad(coef)))
    certified = norm if kernel.claims_nonexpansive() else None
    return FittedModel(kernel, data.inputs.copy(), coef, float(gamma), norm, certified)


def predict(model: FittedModel, u) -> np.ndarray:
    """Evaluate the fitted operator at one input ``(d,)`` or a batch ``(p, d)``."""
    u = np.asarray(u, dtype=float)
    single = u.ndim <= 1
    batch = np.atleast_2d(u) if u.ndim else u.reshape(1, 1)
    if batch.shape[1] != model.d:
        raise ValueError(f"dimension mismatch: model takes inputs of dimension {model.d}, got {batch.shape[1]}")
    k = model.kernel
    if _scalar_identity(k):
        scalar = k.base if isinstance(k, ScalarTimesOperator) else k
        out = scalar.cross_base(batch, model.train_inputs) @ model.coefficients
    else:
        m = model.m
        out = np.array([sum(k.eval_operator(x, uj, m) @ cj for uj, cj in zip(model.train_inputs, model.coefficients))
                        for x in batch])
    return out[0] if single else out


def rkhs_norm_at(gram: GramMatrix, ybar, gamma: float) -> float:
    """``||G^(1/2) (G + gamma I)^(-1) ybar||`` computed as ``sqrt(c^T G c)``."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    c = gram.solve(gamma, ybar)
    return math.sqrt(max(0.0, gram.quad(c)))


def rkhs_norm_sqrt_formula(gram: GramMatrix, ybar, gamma: float) -> float:
    """Same quantity through an explicit PSD square root; used as a cross-check."""
    c = gram.solve(gamma, ybar).reshape(-1)
    return float(np.linalg.norm(numerics.sqrt_psd(gram.matrix) @ c))


@dataclass
class TuneResult:
    gamma: float
    achieved_norm: float
    iterations: int


# c^T G c and c^T ybar - gamma c^T c agree in exact arithmetic; once they drift
# apart the solve is dominated by roundoff in near-null directions of G
RELIABLE_RTOL = 1e-6


def _phi_checked(gram: GramMatrix, ybar, gamma: float) -> tuple[float, bool]:
    c = gram.solve(gamma, ybar)
    q = gram.quad(c)
    alt = float(np.vdot(c, np.asarray(ybar, dtype=float)) - gamma * np.vdot(c, c))
    reliable = abs(q - alt) <= RELIABLE_RTOL * max(abs(q), abs(alt), np.finfo(float).tiny)
    return math.sqrt(max(0.0, q)), bool(reliable)


def gamma_floor(gram: GramMatrix) -> float:
    return 1e-12 * gram.trace() / (gram.n * gram.m) + 1e-300


def tune_gamma(gram: GramMatrix, ybar, ell: float, tol: float = 1e-6, max_iter: int = 200) -> TuneResult:
    """Smallest ``gamma`` (to relative ``tol``) with ``rkhs_norm_at(gram, ybar, gamma) <= ell``.

    Relies on the norm being nonincreasing in ``gamma``. Bisection runs on
    ``log(gamma)``; the returned value is always on the feasible side. For a
    (nearly) singular Gram matrix the norm cannot be evaluated at very small
    ``gamma``; such points count as infeasible, so the result is then the
    smallest ``gamma`` at which the certificate is trustworthy.
    """
    if not ell > 0:
        raise ValueError(f"ell must be positive, got {ell}")

    def phi(g):
        val, ok = _phi_checked(gram, ybar, g)
        return val if ok else math.inf

    lo = gamma_floor(gram)
    f_lo = phi(lo)
    if f_lo <= ell:
        return TuneResult(lo, f_lo, 0)
    hi = max(lo, gram.trace() / (gram.n * gram.m), 1e-300)
    f_hi = phi(hi)
    it = 0
    while f_hi > ell:
        it += 1
        if it > max_iter:
            raise NoConvergenceError(f"no gamma with norm <= {ell} found up to {hi:.3g}")
        lo, hi = hi, hi * 10.0
        f_hi = phi(hi)
    log_lo, log_hi = math.log(lo), math.log(hi)
    while log_hi - log_lo > math.log1p(tol):
        it += 1
        if it > max_iter:
            raise NoConvergenceError(f"bisection did not reach tolerance {tol} in {max_iter} steps")
        mid = 0.5 * (log_lo + log_hi)
        f_mid = phi(math.exp(mid))
        if f_mid <= ell:
            log_hi, f_hi = mid, f_mid
        else:
            log_lo = mid
    return TuneResult(math.exp(log_hi), f_hi, it)


def fit_to_budget(kernel: Kernel, data: Dataset, ell: float, tol: float = 1e-6,
                  max_iter: int = 200) -> FittedModel:
    """Tune gamma to the Lipschitz budget ``ell`` and fit. Needs a certified kernel."""
    if not kernel.claims_nonexpansive():
        raise UncertifiedKernelError(
            f"kernel {kernel.variant} is not certified nonexpansive, so its RKHS norm is not a Lipschitz bound")
    gram = assemble_gram(kernel, data.inputs, data.m)
    res = tune_gamma(gram, data.outputs, ell, tol=tol, max_iter=max_iter)
    return fit(kernel, data, res.gamma)


@dataclass
class LipschitzCheck:
    max_ratio: float
    passed: bool
    bound: float
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return {"max_ratio": self.max_ratio, "pass": self.passed, "bound": self.bound,
                "trials": self.trials, "seed": self.seed}


def empirical_lipschitz_check(model: FittedModel, sampler: Sampler, trials: int, seed: int = 0) -> LipschitzCheck:
    """Largest observed ``||H(x) - H(y)|| / ||x - y||`` over random pairs.

    Half of the pairs are independent draws, the other half are local
    perturbations ``y = x + delta`` at random scales, where the difference
    quotient approaches the local slope.
    """
    if model.lipschitz_certified is None:
        raise UncertifiedKernelError("model has no certified Lipschitz constant")
    rng = np.random.default_rng(seed)
    half = trials // 2
    x = sampler(rng, trials)
    y = sampler(rng, trials)
    scales = 10.0 ** rng.uniform(-4, 0, size=(trials - half, 1))
    step = rng.standard_normal((trials - half, model.d))
    y[half:] = x[half:] + scales * step / np.linalg.norm(step, axis=1, keepdims=True)
    num = np.linalg.norm(predict(model, x) - predict(model, y), axis=1)
    den = np.linalg.norm(x - y, axis=1)
    ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    max_ratio = float(ratio.max())
    bound = model.lipschitz_certified
    return LipschitzCheck(max_ratio, max_ratio <= bound * (1 + 1e-6), bound, trials, seed)
