"""Scalar and operator-valued reproducing kernels.

A kernel ``K(u, v)`` maps a pair of input vectors to an ``m x m`` matrix acting
on the output space. Scalar kernels act as ``k(u, v) * I_m``.

Each kernel knows whether it is *certified nonexpansive*, i.e. whether

    ||K(u,u) - K(u,v) - K(v,u) + K(v,v)||^(1/2) <= ||u - v||

is guaranteed for all pairs. The certificate comes from closed-form conditions
on the kernel parameters (see ``claims_nonexpansive``). ``audit_nonexpansive``
is a sampling falsifier for the same inequality and can be run on any kernel,
including user-defined subclasses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics

VIOLATION_RTOL = 1e-9
NORM_SLACK = 1e-12
NEAR_PAIR_RADII = (1e-3, 1e-1, 1.0, 10.0)
NEAR_PAIRS_PER_RADIUS = 16

Sampler = Callable[[np.random.Generator, int], np.ndarray]


def _vec(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u.reshape(1)
    if u.ndim != 1:
        raise ValueError(f"expected a vector, got shape {u.shape}")
    return u


def _check_pair(u, v) -> tuple[np.ndarray, np.ndarray]:
    u, v = _vec(u), _vec(v)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    return u, v


def _sqdist_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.einsum("ij,ij->i", d, d)


def _sqdist_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |a|^2 + |b|^2 - 2ab expansion: no cancellation
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


class Kernel:
    """Base class. Subclasses implement ``eval_operator`` at minimum.

    Scalar subclasses instead implement ``_pairs`` (row-wise k over stacked
    inputs) and inherit the rest.
    """

    variant: str = "custom"
    is_scalar: bool = False

    @property
    def output_dim(self) -> int | None:
        """Fixed output dimension, or None when any ``m`` is accepted."""
        return None

    def claims_nonexpansive(self) -> bool:
        return False

    def eval_operator(self, u, v, m: int) -> np.ndarray:
        raise NotImplementedError

    def increment(self, u, v, m: int) -> np.ndarray:
        """``K(u,u) - K(u,v) - K(v,u) + K(v,v)``, symmetrized."""
        u, v = _check_pair(u, v)
        s = (self.eval_operator(u, u, m) - self.eval_operator(u, v, m)
             - self.eval_operator(v, u, m) + self.eval_operator(v, v, m))
        return 0.5 * (s + s.T)

    def gram_base(self, inputs: np.ndarray) -> np.ndarray:
        raise TypeError(f"{type(self).__name__} is not a scalar kernel")

    def cross_base(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise TypeError(f"{type(self).__name__} is not a scalar kernel")

    def to_dict(self) -> dict:
        raise TypeError(f"{type(self).__name__} has no serialized form")


class ScalarKernel(Kernel):
    is_scalar = True

    def _pairs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _increment_pairs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self._pairs(a, a) - 2.0 * self._pairs(a, b) + self._pairs(b, b)

    def __call__(self, u, v) -> float:
        u, v = _check_pair(u, v)
        return float(self._pairs(u[None], v[None])[0])

    def eval_operator(self, u, v, m: int) -> np.ndarray:
        return self(u, v) * np.eye(m)

    def increment(self, u, v, m: int) -> np.ndarray:
        return self.scalar_increment(u, v) * np.eye(m)

    def scalar_increment(self, u, v) -> float:
        u, v = _check_pair(u, v)
        return float(self._increment_pairs(u[None], v[None])[0])

    def cross_base(self, a, b) -> np.ndarray:
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
        n, p = a.shape[0], b.shape[0]
        ai = np.repeat(a, p, axis=0)
        bi = np.tile(b, (n, 1))
        return self._pairs(ai, bi).reshape(n, p)

    def gram_base(self, inputs) -> np.ndarray:
        k = self.cross_base(inputs, inputs)
        return 0.5 * (k + k.T)


@dataclass(frozen=True)
class Bilinear(ScalarKernel):
    variant = "bilinear"

    def claims_nonexpansive(self) -> bool:
        return True

    def _pairs(self, a, b):
        return np.einsum("ij,ij->i", a, b)

    def _increment_pairs(self, a, b):
        return _sqdist_rows(a, b)

    def cross_base(self, a, b):
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
        return a @ b.T

    def to_dict(self):
        return {"variant": self.variant, "params": {}}


@dataclass(frozen=True)
class Gaussian(ScalarKernel):
    sigma: float = math.sqrt(2.0)
    variant = "gaussian"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"Gaussian sigma must be positive, got {self.sigma}")

    def claims_nonexpansive(self) -> bool:
        return self.sigma >= math.sqrt(2.0)

    def _pairs(self, a, b):
        return np.exp(-_sqdist_rows(a, b) / self.sigma**2)

    def _increment_pairs(self, a, b):
        return -2.0 * np.expm1(-_sqdist_rows(a, b) / self.sigma**2)

    def cross_base(self, a, b):
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        return np.exp(-_sqdist_cross(a, b) / self.sigma**2)

    def to_dict(self):
        return {"variant": self.variant, "params": {"sigma": self.sigma}}


def _one_minus_scaled_laplacian(r: np.ndarray) -> np.ndarray:
    """``1 - (1 + r) exp(-r)`` without cancellation for small ``r``."""
    r = np.asarray(r, dtype=float)
    out = -np.expm1(-r) - r * np.exp(-r)
    small = r < 1e-2
    if np.any(small):
        s = r[small]
        out[small] = s**2 * (0.5 - s * (1 / 3 - s * (1 / 8 - s * (1 / 30 - s / 144))))
    return out


@dataclass(frozen=True)
class ScaledLaplacian(ScalarKernel):
    variant = "scaled_laplacian"

    def claims_nonexpansive(self) -> bool:
        return True

    def _pairs(self, a, b):
        r = np.sqrt(_sqdist_rows(a, b))
        return (1.0 + r) * np.exp(-r)

    def _increment_pairs(self, a, b):
        return 2.0 * _one_minus_scaled_laplacian(np.sqrt(_sqdist_rows(a, b)))

    def cross_base(self, a, b):
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        r = np.sqrt(_sqdist_cross(a, b))
        return (1.0 + r) * np.exp(-r)

    def to_dict(self):
        return {"variant": self.variant, "params": {}}


@dataclass(frozen=True)
class InversePower(ScalarKernel):
    """``(c + ||u - v||^2) ** -d``; requires ``c > 0`` so that ``k(u, u)`` is finite."""

    c: float = 2.0
    d: float = 1.0
    variant = "inverse_power"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"InversePower needs c > 0, got {self.c}")
        if not self.d > 0:
            raise ValueError(f"InversePower needs d > 0, got {self.d}")

    def claims_nonexpansive(self) -> bool:
        return bool(2.0 * self.d <= self.c ** (self.d + 1.0))

    def _pairs(self, a, b):
        return (self.c + _sqdist_rows(a, b)) ** (-self.d)

    def _increment_pairs(self, a, b):
        x = _sqdist_rows(a, b) / self.c
        return -2.0 * self.c ** (-self.d) * np.expm1(-self.d * np.log1p(x))

    def cross_base(self, a, b):
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        return (self.c + _sqdist_cross(a, b)) ** (-self.d)

    def to_dict(self):
        return {"variant": self.variant, "params": {"c": self.c, "d": self.d}}


@dataclass(frozen=True)
class PolynomialScalar(ScalarKernel):
    """``(c + <u, v>) ** d``. Positive semidefinite but never nonexpansive."""

    c: float = 0.0
    d: int = 2
    variant = "polynomial"

    def __post_init__(self):
        if self.c < 0:
            raise ValueError(f"polynomial kernel needs c >= 0, got {self.c}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"polynomial degree must be a positive integer, got {self.d}")

    def _pairs(self, a, b):
        return (self.c + np.einsum("ij,ij->i", a, b)) ** int(self.d)

    def cross_base(self, a, b):
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        return (self.c + a @ b.T) ** int(self.d)

    def to_dict(self):
        return {"variant": self.variant, "params": {"c": self.c, "d": int(self.d)}}


def _matrix(r, name: str) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {r.shape}")
    return r


def _check_m(kernel: Kernel, m: int) -> None:
    if kernel.output_dim is not None and kernel.output_dim != m:
        raise ValueError(f"kernel acts on R^{kernel.output_dim}, requested output dimension {m}")


@dataclass(frozen=True, eq=False)
class ScalarTimesOperator(Kernel):
    """``k(u, v) * R`` with ``R`` symmetric."""

    base: ScalarKernel
    R: np.ndarray
    variant = "scalar_times_operator"

    def __post_init__(self):
        if not self.base.is_scalar:
            raise ValueError("ScalarTimesOperator needs a scalar base kernel")
        object.__setattr__(self, "R", numerics.sym_matrix(_matrix(self.R, "R")))

    @property
    def output_dim(self):
        return self.R.shape[0]

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.R, np.eye(self.R.shape[0])))

    def claims_nonexpansive(self) -> bool:
        return bool(self.base.claims_nonexpansive() and numerics.is_psd(self.R)
                    and numerics.spectral_norm(self.R) <= 1.0 + NORM_SLACK)

    def eval_operator(self, u, v, m):
        _check_m(self, m)
        return self.base(u, v) * self.R

    def increment(self, u, v, m):
        _check_m(self, m)
        return self.base.scalar_increment(u, v) * self.R

    def to_dict(self):
        return {"variant": self.variant, "params": {"base": self.base.to_dict(), "R": self.R.tolist()}}


@dataclass(frozen=True, eq=False)
class ConvexSum(Kernel):
    """``sum_i alpha_i K_i(u, v)`` with ``alpha_i >= 0``."""

    terms: tuple

    variant = "convex_sum"

    def __post_init__(self):
        terms = tuple((float(a), k) for a, k in self.terms)
        if not terms:
            raise ValueError("ConvexSum needs at least one term")
        for a, _ in terms:
            if a < 0:
                raise ValueError(f"ConvexSum weights must be nonnegative, got {a}")
        dims = {k.output_dim for _, k in terms} - {None}
        if len(dims) > 1:
            raise ValueError(f"ConvexSum terms disagree on output dimension: {sorted(dims)}")
        object.__setattr__(self, "terms", terms)

    @property
    def is_scalar(self) -> bool:
        return all(k.is_scalar for _, k in self.terms)

    @property
    def output_dim(self):
        dims = {k.output_dim for _, k in self.terms} - {None}
        return dims.pop() if dims else None

    def claims_nonexpansive(self) -> bool:
        return bool(all(k.claims_nonexpansive() for _, k in self.terms)
                    and sum(a for a, _ in self.terms) <= 1.0 + NORM_SLACK)

    def __call__(self, u, v) -> float:
        if not self.is_scalar:
            raise TypeError("ConvexSum has operator-valued terms")
        return sum(a * k(u, v) for a, k in self.terms)

    def scalar_increment(self, u, v) -> float:
        return sum(a * k.scalar_increment(u, v) for a, k in self.terms)

    def eval_operator(self, u, v, m):
        _check_m(self, m)
        return sum(a * k.eval_operator(u, v, m) for a, k in self.terms)

    def increment(self, u, v, m):
        _check_m(self, m)
        return sum(a * k.increment(u, v, m) for a, k in self.terms)

    def _increment_pairs(self, a, b):
        return sum(w * k._increment_pairs(a, b) for w, k in self.terms)

    def cross_base(self, a, b):
        if not self.is_scalar:
            return super().cross_base(a, b)
        return sum(w * k.cross_base(a, b) for w, k in self.terms)

    def gram_base(self, inputs):
        k = self.cross_base(inputs, inputs)
        return 0.5 * (k + k.T)

    def to_dict(self):
        return {"variant": self.variant,
                "params": {"terms": [{"alpha": a, "kernel": k.to_dict()} for a, k in self.terms]}}


@dataclass(frozen=True, eq=False)
class Conjugated(Kernel):
    """``R L(u, v) R^T`` for a scalar kernel ``L``, i.e. ``L(u, v) R R^T``."""

    base: ScalarKernel
    R: np.ndarray
    variant = "conjugated"

    def __post_init__(self):
        if not self.base.is_scalar:
            raise ValueError("Conjugated needs a scalar base kernel")
        r = _matrix(self.R, "R")
        object.__setattr__(self, "R", r)
        rrt = r @ r.T
        object.__setattr__(self, "_rrt", 0.5 * (rrt + rrt.T))

    @property
    def output_dim(self):
        return self.R.shape[0]

    def claims_nonexpansive(self) -> bool:
        return self.base.claims_nonexpansive() and bool(np.linalg.norm(self.R, 2) <= 1.0 + NORM_SLACK)

    def eval_operator(self, u, v, m):
        _check_m(self, m)
        return self.base(u, v) * self._rrt

    def increment(self, u, v, m):
        _check_m(self, m)
        return self.base.scalar_increment(u, v) * self._rrt

    def to_dict(self):
        return {"variant": self.variant, "params": {"base": self.base.to_dict(), "R": self.R.tolist()}}


# ---------------------------------------------------------------------------
# serialization

_SIMPLE = {
    "bilinear": Bilinear,
    "gaussian": Gaussian,
    "scaled_laplacian": ScaledLaplacian,
    "inverse_power": InversePower,
    "polynomial": PolynomialScalar,
}


def kernel_from_dict(obj: dict) -> Kernel:
    variant = obj["variant"]
    params = dict(obj.get("params", {}))
    if variant in _SIMPLE:
        if variant == "polynomial" and "d" in params:
            params["d"] = int(params["d"])
        return _SIMPLE[variant](**params)
    if variant == "scalar_times_operator":
        return ScalarTimesOperator(kernel_from_dict(params["base"]), np.array(params["R"], dtype=float))
    if variant == "conjugated":
        return Conjugated(kernel_from_dict(params["base"]), np.array(params["R"], dtype=float))
    if variant == "convex_sum":
        return ConvexSum(tuple((t["alpha"], kernel_from_dict(t["kernel"])) for t in params["terms"]))
    raise ValueError(f"unknown kernel variant {variant!r}")


# ---------------------------------------------------------------------------
# evaluation and audits

def eval_scalar(kernel: Kernel, u, v) -> float:
    if not kernel.is_scalar:
        raise TypeError(f"{kernel.variant} is operator-valued")
    return kernel(u, v)


def eval_operator(kernel: Kernel, u, v, m: int) -> np.ndarray:
    u, v = _check_pair(u, v)
    return kernel.eval_operator(u, v, m)


@dataclass
class KernelMetricSample:
    u: np.ndarray
    v: np.ndarray
    metric: float
    bound: float
    violated: bool

    @property
    def excess(self) -> float:
        return self.metric - self.bound

    def to_dict(self) -> dict:
        return {"u": self.u.tolist(), "v": self.v.tolist(), "metric": self.metric,
                "bound": self.bound, "violated": self.violated}


def _sample(u, v, metric, bound) -> KernelMetricSample:
    metric, bound = float(metric), float(bound)
    return KernelMetricSample(u, v, metric, bound, metric > bound * (1.0 + VIOLATION_RTOL))


def kernel_metric(kernel: Kernel, u, v, m: int = 1) -> KernelMetricSample:
    """Feature-space distance ``||K(u,u) - K(u,v) - K(v,u) + K(v,v)||^(1/2)`` against ``||u - v||``."""
    u, v = _check_pair(u, v)
    if kernel.is_scalar:
        gap = abs(kernel.scalar_increment(u, v))
    else:
        gap = numerics.spectral_norm(kernel.increment(u, v, m))
    return _sample(u, v, math.sqrt(gap), np.linalg.norm(u - v))


def uniform_box(low: float, high: float, dim: int) -> Sampler:
    def sampler(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(low, high, size=(n, dim))
    return sampler


@dataclass
class AuditReport:
    violations: list
    passed: bool
    trials: int
    seed: int
    max_ratio: float
    note: str = ("sampling audit: a pass is necessary but not sufficient evidence of nonexpansiveness")

    def to_dict(self) -> dict:
        return {"pass": self.passed, "trials": self.trials, "seed": self.seed,
                "max_ratio": self.max_ratio, "n_violations": len(self.violations),
                "violations": [s.to_dict() for s in self.violations[:10]], "note": self.note}


def _near_pairs(sampler: Sampler, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    us, vs = [], []
    for r in NEAR_PAIR_RADII:
        base = sampler(rng, NEAR_PAIRS_PER_RADIUS)
        direction = rng.standard_normal(base.shape)
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        us.append(base)
        vs.append(base + r * direction)
    return np.vstack(us), np.vstack(vs)


def audit_nonexpansive(kernel: Kernel, sampler: Sampler, trials: int, seed: int = 0,
                       m: int | None = None) -> AuditReport:
    """Search for pairs violating the nonexpansive-kernel inequality.

    Draws ``trials`` random pairs plus a fixed set of close pairs at
    separations ``NEAR_PAIR_RADII``. Violations come back sorted by how far
    the metric exceeds the bound, largest first.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if m is None:
        m = kernel.output_dim or 1
    rng = np.random.default_rng(seed)
    a = sampler(rng, trials)
    b = sampler(rng, trials)
    na, nb = _near_pairs(sampler, rng)
    a, b = np.vstack([a, na]), np.vstack([b, nb])
    bounds = np.sqrt(_sqdist_rows(a, b))
    if kernel.is_scalar:
        metrics = np.sqrt(np.abs(kernel._increment_pairs(a, b)))
    else:
        metrics = np.array([math.sqrt(numerics.spectral_norm(kernel.increment(x, y, m))) for x, y in zip(a, b)])
    bad = metrics > bounds * (1.0 + VIOLATION_RTOL)
    violations = [_sample(a[i], b[i], metrics[i], bounds[i]) for i in np.flatnonzero(bad)]
    violations.sort(key=lambda s: -s.excess)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(bounds > 0, metrics / bounds, 0.0)
    return AuditReport(violations, not violations, trials, seed, float(ratios.max()))


@dataclass
class PSDAudit:
    min_eig: float
    max_eig: float
    passed: bool

    def to_dict(self) -> dict:
        return {"pass": self.passed, "min_eig": self.min_eig, "max_eig": self.max_eig}


def audit_psd(kernel: Kernel, inputs: Sequence, m: int | None = None) -> PSDAudit:
    from .estimator import assemble_gram

    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] < 1:
        raise ValueError("audit_psd needs at least one input")
    if m is None:
        m = kernel.output_dim or 1
    gram = assemble_gram(kernel, inputs, m)
    # eigenvalues of base (x) I_m equal those of base
    w = np.linalg.eigvalsh(gram.base if gram.base is not None else gram.matrix)
    floor = -numerics.PSD_RTOL * max(1.0, float(w[-1]))
    return PSDAudit(float(w[0]), float(w[-1]), bool(w[0] >= floor))


def parse_kernel(text: str) -> Kernel:
    """Parse the flat command-line form ``name:key=val,key=val``."""
    name, _, rest = text.strip().partition(":")
    name = name.strip().lower().replace("-", "_")
    aliases = {"laplacian": "scaled_laplacian", "invpower": "inverse_power", "poly": "polynomial",
               "rbf": "gaussian"}
    name = aliases.get(name, name)
    if name not in _SIMPLE:
        raise ValueError(f"unknown kernel {name!r}; composite kernels are given through a config file")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise ValueError(f"malformed kernel parameter {item!r}, expected key=value")
        try:
            params[key.strip()] = float(val)
        except ValueError:
            raise ValueError(f"kernel parameter {key!r} is not a number: {val!r}") from None
    if name == "polynomial" and "d" in params:
        params["d"] = int(params["d"])
    try:
        return _SIMPLE[name](**params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {name}: {exc}") from None
