"""Gaussian RBF bases and the ridge-regression fit of a discrete sequence.

A sequence of L vectors gets positions t_i = i/L in (0, 1] and is turned
into a continuous signal x(t) = B^T psi(t), where psi stacks N Gaussian
bumps over [0, 1].  The coefficients come from multivariate ridge
regression, whose fit operator G depends only on the positions and the
basis, so it is computed once and cached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, matmul, solve_spd


class BasisError(Exception):
    """Invalid basis construction or fit request."""


@dataclass(frozen=True)
class BasisSpec:
    """N Gaussian bumps: centers in [0,1] (sorted) and positive widths."""

    centers: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=np.float64))
        object.__setattr__(self, "widths", np.asarray(self.widths, dtype=np.float64))
        if self.centers.ndim != 1 or self.centers.shape != self.widths.shape:
            raise BasisError("centers and widths must be matching 1-D arrays")
        if np.any(np.diff(self.centers) < 0):
            raise BasisError("centers must be sorted ascending")
        if self.centers.size and (self.centers[0] < 0 or self.centers[-1] > 1):
            raise BasisError("centers must lie in [0, 1]")
        if np.any(self.widths <= 0):
            raise BasisError("widths must be strictly positive")

    @property
    def n(self) -> int:
        return self.centers.size

    def key(self) -> tuple:
        return (self.centers.tobytes(), self.widths.tobytes())


def make_basis(n: int, width_set=(0.01, 0.05)) -> BasisSpec:
    """Linearly spaced centers over [0,1]; widths split as evenly as possible
    over `width_set` in order (earlier widths absorb the remainder)."""
    if n < 1:
        raise BasisError(f"basis count must be >= 1, got {n}")
    width_set = [float(w) for w in width_set]
    if not width_set or any(w <= 0 for w in width_set):
        raise BasisError(f"widths must be positive, got {width_set}")
    centers = np.array([0.5]) if n == 1 else np.linspace(0.0, 1.0, n)
    # widths interleave across the centers so each width class covers the whole
    # domain; earlier widths absorb the remainder when the split is uneven
    k = len(width_set)
    widths = np.array([width_set[i % k] for i in range(n)])
    return BasisSpec(centers=centers, widths=widths)


def eval_psi(spec: BasisSpec, t) -> np.ndarray:
    """Gaussian densities at t: shape (N,) for scalar t, (N, len(t)) for a vector."""
    t = np.asarray(t, dtype=np.float64)
    mu = spec.centers if t.ndim == 0 else spec.centers[:, None]
    sig = spec.widths if t.ndim == 0 else spec.widths[:, None]
    z = (t - mu) / sig
    return np.exp(-0.5 * z * z) / (sig * np.sqrt(2.0 * np.pi))


def design_matrix(spec: BasisSpec, positions) -> np.ndarray:
    """F in R^{N x L}: column i is psi(t_i)."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.size == 0:
        raise BasisError("design_matrix needs at least one position")
    return eval_psi(spec, positions)


def sequence_positions(length: int) -> np.ndarray:
    """The t_i = i/L convention, i = 1..L."""
    return np.arange(1, length + 1, dtype=np.float64) / length


@dataclass(frozen=True)
class RegressionOperator:
    """Precomputed ridge-fit operator: G = F^T (F F^T + lam I)^{-1}."""

    g: np.ndarray           # (L, N)
    f: np.ndarray           # (N, L)
    lam: float
    positions: np.ndarray = field(default=None)

    @property
    def num_points(self) -> int:
        return self.f.shape[1]


def regression_operator(f: np.ndarray, lam: float, positions=None) -> RegressionOperator:
    """Build the fit operator from a design matrix and ridge penalty."""
    f = np.asarray(f, dtype=np.float64)
    if lam < 0:
        raise BasisError(f"ridge penalty must be nonnegative, got {lam}")
    n = f.shape[0]
    a = f @ f.T + lam * np.eye(n)
    try:
        # G^T = (F F^T + lam I)^{-1} F
        gt = solve_spd(a, f)
    except Exception as e:
        if lam == 0:
            raise BasisError(
                "F F^T is numerically singular at lam=0; use a positive ridge penalty"
            ) from e
        raise
    return RegressionOperator(g=np.ascontiguousarray(gt.T), f=f, lam=float(lam),
                              positions=None if positions is None
                              else np.asarray(positions, dtype=np.float64))


def operator_for_positions(spec: BasisSpec, positions, lam: float) -> RegressionOperator:
    return regression_operator(design_matrix(spec, positions), lam, positions=positions)


def fit_signal(x, op: RegressionOperator):
    """Coefficients B = G^T X for a sequence X in R^{L x e}.

    Differentiable in X when given a Tensor; G is a constant.
    """
    rows = x.shape[0]
    if rows != op.num_points:
        raise ShapeError(f"sequence has {rows} rows, operator expects {op.num_points}")
    gt = op.g.T
    if isinstance(x, Tensor):
        return matmul(Tensor(gt), x)
    return gt @ np.asarray(x, dtype=np.float64)
