"""Monotone operator identification through the scattering (Cayley) transform.

Data pairs ``(u, y)`` of a square operator ``R`` are mapped to
``v = u + y, z = u - y``; a nonexpansive ``S`` fitted to ``(v, z)`` defines
``R = (I - S)(I + S)^{-1}``, which is monotone. When ``S`` is a contraction,
``R(u)`` is evaluated by the Picard iteration ``y <- u - S(u + y)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimator import (Dataset, FittedModel, UncertifiedKernelError, assemble_gram, dumps, fit, predict,
                        tune_gamma)
from .kernels import Kernel, Sampler


class PicardNonConvergence(RuntimeError):
    def __init__(self, residual: float, iters: int):
        self.residual = residual
        self.iters = iters
        super().__init__(f"Picard iteration stopped after {iters} steps with step norm {residual:.3g}")


@dataclass
class ScatteredData:
    v: np.ndarray
    z: np.ndarray

    def as_dataset(self) -> Dataset:
        return Dataset(self.v, self.z)


def scatter(data: Dataset) -> ScatteredData:
    if data.d != data.m:
        raise ValueError(f"scattering needs equal input and output dimensions, got {data.d} and {data.m}")
    u, y = data.inputs, data.outputs
    return ScatteredData(u + y, u - y)


def unscatter(sd: ScatteredData) -> Dataset:
    return Dataset((sd.v + sd.z) / 2, (sd.v - sd.z) / 2)


def cayley_linear(a) -> np.ndarray:
    """``(I - A)(I + A)^{-1}`` for a square matrix ``A``; an involution."""
    a = np.asarray(a, dtype=float)
    eye = np.eye(a.shape[0])
    # (I - A) and (I + A)^{-1} commute, so solve from the left
    return np.linalg.solve(eye + a, eye - a)


@dataclass
class PicardConfig:
    tol: float = 1e-10
    max_iter: int = 100_000


@dataclass
class MonotoneModel:
    s_model: FittedModel
    ell: float
    picard: PicardConfig = field(default_factory=PicardConfig)

    def __post_init__(self):
        if self.s_model.d != self.s_model.m:
            raise ValueError("the contraction S must map R^m to itself")
        if not 0 <= self.ell < 1:
            raise ValueError(f"ell must lie in [0, 1), got {self.ell}")
        cert = self.s_model.lipschitz_certified
        if cert is None:
            raise UncertifiedKernelError("S must come from a certified nonexpansive kernel")
        if cert > self.ell:
            raise ValueError(f"certified Lipschitz constant {cert} exceeds ell={self.ell}")

    def __call__(self, u) -> np.ndarray:
        return simulate(self, u).y

    def to_dict(self) -> dict:
        out = self.s_model.to_dict()
        out["ell"] = self.ell
        out["picard"] = {"tol": self.picard.tol, "max_iter": self.picard.max_iter}
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "MonotoneModel":
        p = obj.get("picard", {})
        return cls(FittedModel.from_dict(obj), float(obj["ell"]),
                   PicardConfig(float(p.get("tol", 1e-10)), int(p.get("max_iter", 100_000))))

    def save(self, path) -> None:
        Path(path).write_text(dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MonotoneModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_monotone(kernel: Kernel, data: Dataset, ell: float = 0.99, gamma: float | None = None,
                 picard: PicardConfig | None = None) -> MonotoneModel:
    """Identify a monotone operator from square input/output data.

    With ``gamma=None`` the regularization is tuned so that the fitted ``S``
    has certified Lipschitz constant at most ``ell``. With an explicit
    ``gamma`` the fit must land within ``ell`` or a ``ValueError`` is raised.
    The model stores the achieved certificate as its contraction constant.
    """
    if not kernel.claims_nonexpansive():
        raise UncertifiedKernelError(f"kernel {kernel.variant} is not certified nonexpansive")
    if not 0 < ell < 1:
        raise ValueError(f"ell must lie in (0, 1), got {ell}")
    sd = scatter(data).as_dataset()
    if gamma is None:
        gamma = tune_gamma(assemble_gram(kernel, sd.inputs, sd.m), sd.outputs, ell).gamma
    s_model = fit(kernel, sd, gamma)
    if s_model.lipschitz_certified > ell:
        raise ValueError(f"gamma={gamma} gives certified constant {s_model.lipschitz_certified:.6g} > ell={ell}")
    return MonotoneModel(s_model, s_model.lipschitz_certified, picard or PicardConfig())


@dataclass
class SimulationResult:
    y: np.ndarray
    iters: int
    residual: float
    history: list | None = None


def simulate(model: MonotoneModel, u_star, y0=None, record: bool = False,
             max_iter: int | None = None) -> SimulationResult:
    """Evaluate ``R(u_star)`` by Picard iteration.

    Stops once ``ell * ||y_{k+1} - y_k|| <= tol * (1 - ell)``, which bounds the
    distance of ``y_{k+1}`` to the fixed point by ``tol``.
    """
    ell = model.ell
    if not ell < 1:
        raise ValueError("Picard iteration needs ell < 1")
    u = np.asarray(u_star, dtype=float).reshape(-1)
    if u.shape[0] != model.s_model.m:
        raise ValueError(f"dimension mismatch: model is on R^{model.s_model.m}, got {u.shape[0]}")
    y = np.zeros_like(u) if y0 is None else np.asarray(y0, dtype=float).reshape(u.shape).copy()
    tol = model.picard.tol
    limit = model.picard.max_iter if max_iter is None else max_iter
    history = [y.copy()] if record else None
    step = np.inf
    for k in range(1, limit + 1):
        y_next = u - predict(model.s_model, u + y)
        step = float(np.linalg.norm(y_next - y))
        y = y_next
        if record:
            history.append(y.copy())
        if ell * step <= tol * (1 - ell):
            return SimulationResult(y, k, step, history)
    raise PicardNonConvergence(step, limit)


@dataclass
class MonotonicityCheck:
    min_inner: float
    passed: bool
    trials: int
    seed: int
    worst_pair: tuple | None = None

    def to_dict(self) -> dict:
        out = {"min_inner": self.min_inner, "pass": self.passed, "trials": self.trials, "seed": self.seed}
        if self.worst_pair is not None:
            out["worst_pair"] = [p.tolist() for p in self.worst_pair]
        return out


def monotonicity_check(model: MonotoneModel, sampler: Sampler, trials: int, seed: int = 0) -> MonotonicityCheck:
    """Sample pairs and test ``<x - y, R(x) - R(y)> >= 0`` up to simulation error."""
    rng = np.random.default_rng(seed)
    xs = sampler(rng, trials)
    ys = sampler(rng, trials)
    passed = True
    min_inner = np.inf
    worst = None
    worst_slack = np.inf
    for x, y in zip(xs, ys):
        rx, ry = simulate(model, x).y, simulate(model, y).y
        inner = float((x - y) @ (rx - ry))
        allowance = 1e-8 * np.linalg.norm(x - y) * (np.linalg.norm(rx) + np.linalg.norm(ry) + 1)
        min_inner = min(min_inner, inner)
        if inner + allowance < worst_slack:
            worst_slack, worst = inner + allowance, (x, y)
        if inner < -allowance:
            passed = False
    return MonotonicityCheck(float(min_inner), passed, trials, seed, worst)
