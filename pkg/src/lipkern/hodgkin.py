"""Potassium-channel experiment: data generation and the identification pipeline.

The channel model is

    dx/dt = alpha(u) (1 - x) - beta(u) x,   x(0) = 0
    y     = g x^4 (u - u_bar)

with voltages in the original Hodgkin-Huxley sign convention (depolarization
negative, in mV) and the current in uA/cm^2. Step responses are sampled at
``t_j = 0.5 j`` ms, ``j = 0..20``, so each experiment is a pair of vectors in
R^21.

Before identification both the stacked inputs and the stacked outputs are
divided by their overall Euclidean norm (``scaling="unit"``). With the default
voltage set this normalization gives an RKHS norm of 0.9898 at
gamma = 4.441e-4; in raw units the same gamma gives a norm of about 2.5e4.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .estimator import Dataset, dumps
from .kernels import Kernel, ScaledLaplacian, uniform_box
from .monotone import MonotoneModel, fit_monotone, monotonicity_check, simulate

DEFAULT_VOLTAGES = (-6.0, -10.0, -19.0, -26.0, -32.0, -38.0, -51.0, -63.0, -76.0, -88.0, -100.0, -109.0)
REFERENCE_GAMMA = 4.441e-4
REFERENCE_NORM = 0.9903
NORM_BAND = (0.94, 1.00)

# Per-voltage RMSE bounds (uA/cm^2) for the default reproduction, frozen at
# 1.5x the values observed when the pipeline was built (scaling="unit",
# gamma=REFERENCE_GAMMA, Picard tol 1e-10).
RMSE_BOUNDS = {
    -6.0: 36.2, -10.0: 5.9, -19.0: 31.3, -26.0: 26.7, -32.0: 8.6, -38.0: 11.5,
    -51.0: 13.4, -63.0: 2.5, -76.0: 0.9, -88.0: 0.8, -100.0: 5.9, -109.0: 8.1,
}


@dataclass(frozen=True)
class HHParams:
    g: float = 36.0
    u_bar: float = 12.0
    n_samples: int = 21
    sample_dt: float = 0.5
    voltages: tuple = DEFAULT_VOLTAGES

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError("conductance g must be positive")
        if self.n_samples < 1 or not self.sample_dt > 0:
            raise ValueError("time grid must be nonempty and strictly increasing")
        object.__setattr__(self, "voltages", tuple(float(v) for v in self.voltages))

    @property
    def t_grid(self) -> np.ndarray:
        return self.sample_dt * np.arange(self.n_samples)


def alpha(u):
    """Opening rate; the removable singularity at ``u = -10`` is patched by a series."""
    w = np.asarray(u, dtype=float) + 10.0
    near = np.abs(w) < 1e-7
    safe = np.where(near, 1.0, w)
    out = np.where(near, 0.1 * (1 - w / 20 + w**2 / 1200), 0.01 * safe / np.expm1(safe / 10.0))
    return float(out) if out.ndim == 0 else out


def beta(u):
    out = 0.125 * np.exp(np.asarray(u, dtype=float) / 80.0)
    return float(out) if out.ndim == 0 else out


def _rates(u: float) -> tuple[float, float]:
    u = float(u)
    w = u + 10.0
    a = 0.1 * (1 - w / 20 + w * w / 1200) if abs(w) < 1e-7 else 0.01 * w / math.expm1(w / 10.0)
    return a, 0.125 * math.exp(u / 80.0)


def current(x, u, params: HHParams = HHParams()):
    return params.g * np.asarray(x) ** 4 * (np.asarray(u) - params.u_bar)


@dataclass
class StepResponse:
    voltage: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray


def step_response_closed_form(v: float, params: HHParams = HHParams(), t=None) -> StepResponse:
    """Exact response to a constant voltage ``v``: the gating ODE is linear then."""
    t = params.t_grid if t is None else np.asarray(t, dtype=float)
    a, b = alpha(v), beta(v)
    x = a / (a + b) * -np.expm1(-(a + b) * t)
    return StepResponse(float(v), t, x, current(x, v, params))


@dataclass
class Trajectory:
    t: np.ndarray
    u: np.ndarray
    x: np.ndarray
    y: np.ndarray


def integrate_rk4(u, t_grid=None, dt: float = 0.01, params: HHParams = HHParams()) -> Trajectory:
    """Fixed-step RK4 for the gating ODE with output sampled on ``t_grid``.

    ``u`` is either a callable ``u(t)`` or a sequence of values held constant
    on each interval ``[t_j, t_{j+1})`` (zero-order hold, one value per grid
    point). ``dt`` must divide every grid interval.
    """
    t_grid = params.t_grid if t_grid is None else np.asarray(t_grid, dtype=float)
    if callable(u):
        u_fn: Callable[[float], float] = u
        u_samples = np.array([u_fn(t) for t in t_grid], dtype=float)
    else:
        u_samples = np.asarray(u, dtype=float).reshape(-1)
        if u_samples.shape != t_grid.shape:
            raise ValueError(f"held input needs one value per grid point ({t_grid.size}), got {u_samples.size}")
        u_fn = None

    def rhs(x, uu):
        a, b = _rates(uu)
        return a * (1 - x) - b * x

    x = np.zeros_like(t_grid)
    for j in range(1, t_grid.size):
        span = t_grid[j] - t_grid[j - 1]
        steps = round(span / dt)
        if steps < 1 or abs(steps * dt - span) > 1e-9 * max(1.0, span):
            raise ValueError(f"dt={dt} does not divide the grid interval {span}")
        xi, t0 = float(x[j - 1]), float(t_grid[j - 1])
        if u_fn is None:
            a, b = _rates(u_samples[j - 1])
            for _ in range(steps):
                k1 = a - (a + b) * xi
                k2 = a - (a + b) * (xi + dt / 2 * k1)
                k3 = a - (a + b) * (xi + dt / 2 * k2)
                k4 = a - (a + b) * (xi + dt * k3)
                xi += dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            for s in range(steps):
                t = t0 + s * dt
                ua, ub, uc = u_fn(t), u_fn(t + dt / 2), u_fn(t + dt)
                k1 = rhs(xi, ua)
                k2 = rhs(xi + dt / 2 * k1, ub)
                k3 = rhs(xi + dt / 2 * k2, ub)
                k4 = rhs(xi + dt * k3, uc)
                xi += dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        x[j] = xi
    return Trajectory(t_grid, u_samples, x, current(x, u_samples, params))


def generate_dataset(params: HHParams = HHParams()) -> Dataset:
    """One experiment per voltage: constant input vector and its sampled current."""
    if not params.voltages:
        raise ValueError("voltage list is empty")
    u = np.array([np.full(params.n_samples, v) for v in params.voltages])
    y = np.array([step_response_closed_form(v, params).y for v in params.voltages])
    return Dataset(u, y, {"voltages": list(params.voltages), "t": params.t_grid.tolist(),
                          "units": {"u": "mV", "y": "uA/cm^2", "t": "ms"}})


def normalize(data: Dataset, scaling: str = "unit") -> tuple[Dataset, float, float]:
    """Scale inputs and outputs; returns ``(scaled, input_scale, output_scale)``.

    ``"unit"`` divides the stacked inputs and the stacked outputs by their
    Euclidean norms, ``"none"`` leaves the data unchanged.
    """
    if scaling == "none":
        return data, 1.0, 1.0
    if scaling != "unit":
        raise ValueError(f"unknown scaling {scaling!r}")
    su = 1.0 / np.linalg.norm(data.inputs)
    sy = 1.0 / np.linalg.norm(data.outputs)
    meta = dict(data.meta or {}, input_scale=su, output_scale=sy, scaling=scaling)
    return Dataset(data.inputs * su, data.outputs * sy, meta), float(su), float(sy)


def write_dataset_csv(data: Dataset, path, params: HHParams = HHParams()) -> None:
    """Long-form CSV ``voltage,t,u,y`` in physical units."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["voltage", "t", "u", "y"])
        for v, ui, yi in zip(params.voltages, data.inputs, data.outputs):
            for t, a, b in zip(params.t_grid, ui, yi):
                w.writerow([repr(v), repr(float(t)), repr(float(a)), repr(float(b))])


@dataclass
class VoltageFit:
    voltage: float
    t: np.ndarray
    y_data: np.ndarray
    y_model: np.ndarray
    picard_iters: int

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean((self.y_model - self.y_data) ** 2)))

    @property
    def max_abs_error(self) -> float:
        return float(np.max(np.abs(self.y_model - self.y_data)))


@dataclass
class Reproduction:
    gamma: float
    rkhs_norm: float
    input_scale: float
    output_scale: float
    fits: list
    monotonicity: object
    model: MonotoneModel
    checks: dict = field(default_factory=dict)

    @property
    def fit_rmse(self) -> float:
        return float(np.sqrt(np.mean([f.rmse**2 for f in self.fits])))

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "rkhs_norm": self.rkhs_norm,
            "input_scale": self.input_scale,
            "output_scale": self.output_scale,
            "fit_rmse": self.fit_rmse,
            "monotonicity": self.monotonicity.to_dict(),
            "per_voltage": [{"voltage": f.voltage, "rmse": f.rmse, "max_abs_error": f.max_abs_error,
                             "picard_iters": f.picard_iters, "t": f.t.tolist(), "y_data": f.y_data.tolist(),
                             "y_model": f.y_model.tolist()} for f in self.fits],
            "checks": self.checks,
            "pass": self.passed,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(dumps(self.to_dict()))
        self.model.save(out / "model.json")
        with open(out / "figure1.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["voltage", "t", "y_data", "y_model"])
            for f in self.fits:
                for row in zip(f.t, f.y_data, f.y_model):
                    w.writerow([repr(f.voltage)] + [repr(float(x)) for x in row])


def misfit_pattern_holds(fits: Sequence[VoltageFit]) -> bool:
    """Mean RMSE over the voltages nearer rest exceeds that over the deepest ones."""
    order = sorted(fits, key=lambda f: f.voltage, reverse=True)
    half = len(order) // 2
    if half == 0:
        return True
    upper = np.mean([f.rmse for f in order[:half]])
    lower = np.mean([f.rmse for f in order[-half:]])
    return bool(upper > lower)


def reproduce_paper(params: HHParams = HHParams(), kernel: Kernel | None = None, gamma: float | None = REFERENCE_GAMMA,
                    ell: float = 0.9999, scaling: str = "unit", monotonicity_trials: int = 1000,
                    seed: int = 0) -> Reproduction:
    """Run the full identification on generated step-response data.

    Scatter the (normalized) data, fit ``S`` with the given ``gamma`` (or tune
    it to ``ell`` when ``gamma`` is None), simulate the monotone operator at
    every training input and compare with the data in physical units.
    """
    kernel = kernel or ScaledLaplacian()
    raw = generate_dataset(params)
    data, su, sy = normalize(raw, scaling)
    model = fit_monotone(kernel, data, ell=ell, gamma=gamma)
    fits = []
    for v, ui, yi in zip(params.voltages, data.inputs, raw.outputs):
        res = simulate(model, ui)
        fits.append(VoltageFit(v, params.t_grid, yi, res.y / sy, res.iters))
    lo, hi = data.inputs.min(), data.inputs.max()
    mono = monotonicity_check(model, uniform_box(lo, hi, data.d), monotonicity_trials, seed)
    checks = {"monotone": mono.passed, "misfit_pattern": misfit_pattern_holds(fits)}
    if gamma == REFERENCE_GAMMA and kernel == ScaledLaplacian() and scaling == "unit":
        checks["rkhs_norm_band"] = NORM_BAND[0] <= model.s_model.rkhs_norm <= NORM_BAND[1]
        if tuple(params.voltages) == DEFAULT_VOLTAGES and params == HHParams():
            checks["rmse_bounds"] = all(f.rmse <= RMSE_BOUNDS[f.voltage] for f in fits)
    return Reproduction(model.s_model.gamma, model.s_model.rkhs_norm, su, sy, fits, mono, model, checks)


def inner_product(u1, y1, u2, y2) -> float:
    """``<u1 - u2, y1 - y2>`` in l2 over the sample grid."""
    return float((np.asarray(u1) - np.asarray(u2)) @ (np.asarray(y1) - np.asarray(y2)))


def random_held_input(rng: np.random.Generator, params: HHParams, low: float = -109.0, high: float = 0.0,
                      min_pieces: int = 2, max_pieces: int = 3) -> np.ndarray:
    """Piecewise-constant voltage sequence with between ``min_pieces`` and ``max_pieces`` levels."""
    n = params.n_samples
    pieces = int(rng.integers(min_pieces, min(max_pieces, n) + 1))
    cuts = np.sort(rng.choice(np.arange(1, n), size=pieces - 1, replace=False)) if pieces > 1 else []
    levels = rng.uniform(low, high, size=pieces)
    out = np.empty(n)
    for lvl, seg in zip(levels, np.split(np.arange(n), cuts)):
        out[seg] = lvl
    return out


@dataclass
class ViolationPair:
    seed: int
    trial: int
    u1: np.ndarray
    u2: np.ndarray
    inner: float

    def to_dict(self) -> dict:
        return {"seed": self.seed, "trial": self.trial, "u1": self.u1.tolist(), "u2": self.u2.tolist(),
                "inner": self.inner}


def find_monotonicity_violation(params: HHParams = HHParams(), seed: int = 0, trials: int = 2000,
                                dt: float = 0.01) -> ViolationPair | None:
    """Random search for held inputs where the state-space model fails monotonicity.

    Returns the first pair found with a negative incremental inner product,
    or None if the search is exhausted.
    """
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        u1 = random_held_input(rng, params)
        u2 = random_held_input(rng, params)
        y1 = integrate_rk4(u1, dt=dt, params=params).y
        y2 = integrate_rk4(u2, dt=dt, params=params).y
        ip = inner_product(u1, y1, u2, y2)
        if ip < 0:
            return ViolationPair(seed, trial, u1, u2, ip)
    return None


def check_violation(pair: dict, params: HHParams = HHParams(), dt: float = 0.01) -> float:
    u1, u2 = np.array(pair["u1"]), np.array(pair["u2"])
    return inner_product(u1, integrate_rk4(u1, dt=dt, params=params).y,
                         u2, integrate_rk4(u2, dt=dt, params=params).y)
