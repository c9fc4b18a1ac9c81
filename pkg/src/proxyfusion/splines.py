"""Penalized spline bases in mixed-model form.

A smooth is ``f(x) = a0 + a1 x + sum_k u_k C(|x - knot_k|)`` with radial kernel
``C``.  The penalty on ``u`` is ``u' |Omega| u`` where ``Omega`` is the kernel
matrix between knots; writing ``u = |Omega|^{-1/2} b`` turns the penalty into
``b'b``, so iid N(0, sigma_b^2) coefficients give the smoother.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class KnotWarning(UserWarning):
    pass


def cubic_kernel(r):
    return np.abs(r) ** 3


def tps_kernel(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos])
    return out


def knots_quantile(values, k: int) -> np.ndarray:
    """``k`` knots at the j/(k+1) sample quantiles, deduplicated."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    distinct = np.unique(values)
    if distinct.size == 0:
        raise ValueError("no finite values to place knots on")
    if distinct.size == 1:
        warnings.warn("constant covariate: using a single knot", KnotWarning, stacklevel=2)
        return distinct.copy()
    if distinct.size < k:
        warnings.warn(
            f"only {distinct.size} distinct values; using {distinct.size} knots instead of {k}",
            KnotWarning,
            stacklevel=2,
        )
        k = distinct.size
    probs = np.arange(1, k + 1) / (k + 1)
    knots = np.unique(np.quantile(values, probs))
    if knots.size < k:
        # quantiles collapsed on ties; spread uniformly over the range instead
        knots = np.linspace(values.min(), values.max(), k + 2)[1:-1]
    return knots


def _inverse_sqrt_abs(omega: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(omega)
    aw = np.abs(w)
    if aw.min() <= 1e-10 * aw.max():
        raise np.linalg.LinAlgError(f"{what}: knot kernel matrix is singular")
    return (v / np.sqrt(aw)) @ v.T


def _abs_matrix(omega: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(omega)
    return (v * np.abs(w)) @ v.T


@dataclass(frozen=True, eq=False)
class SmoothTerm:
    """Design block ``[fixed | radial]`` for one smooth.

    ``design[:, fixed_cols]`` holds the unpenalized polynomial part (intercept
    first); ``design[:, penalized_cols]`` shares a single variance component.
    """

    name: str
    kind: str
    design: np.ndarray
    knots: np.ndarray
    omega_inv_sqrt: np.ndarray
    n_fixed: int

    @property
    def fixed_cols(self) -> np.ndarray:
        return np.arange(self.n_fixed)

    @property
    def penalized_cols(self) -> np.ndarray:
        return np.arange(self.n_fixed, self.design.shape[1])

    @property
    def n_penalized(self) -> int:
        return self.design.shape[1] - self.n_fixed

    def evaluate(self, x) -> np.ndarray:
        """Full design block at new covariate values / coordinates."""
        if self.kind == "cubic":
            return _cubic_design(np.asarray(x, dtype=float), self.knots, self.omega_inv_sqrt)
        return _tps_design(np.atleast_2d(np.asarray(x, dtype=float)), self.knots, self.omega_inv_sqrt)

    def without_intercept(self, x=None) -> np.ndarray:
        block = self.design if x is None else self.evaluate(x)
        return block[:, 1:]

    def penalty_on_raw(self) -> np.ndarray:
        """Penalty matrix on the raw radial coefficients u (that is ``|Omega|``)."""
        return np.linalg.inv(self.omega_inv_sqrt @ self.omega_inv_sqrt)


def _cubic_design(x, knots, omega_inv_sqrt):
    radial = cubic_kernel(x[:, None] - knots[None, :])
    return np.column_stack([np.ones_like(x), x, radial @ omega_inv_sqrt])


def raw_cubic_basis(x, knots) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return cubic_kernel(x[:, None] - np.asarray(knots)[None, :])


def cubic_rbf_basis(x, knots, name: str = "smooth") -> SmoothTerm:
    knots = np.asarray(knots, dtype=float)
    if knots.size < 2:
        raise ValueError("cubic radial basis needs at least two knots")
    if np.unique(knots).size != knots.size:
        raise ValueError("coincident knots")
    omega = cubic_kernel(knots[:, None] - knots[None, :])
    ois = _inverse_sqrt_abs(omega, name)
    x = np.asarray(x, dtype=float)
    return SmoothTerm(name, "cubic", _cubic_design(x, knots, ois), knots, ois, 2)


def _pairwise_dist(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def _tps_design(coords, knots, omega_inv_sqrt):
    radial = tps_kernel(_pairwise_dist(coords, knots))
    return np.column_stack([np.ones(len(coords)), coords, radial @ omega_inv_sqrt])


def raw_tps_basis(coords, knots) -> np.ndarray:
    return tps_kernel(_pairwise_dist(np.atleast_2d(coords), np.atleast_2d(knots)))


def tps2d_basis(coords, knots, name: str = "spatial") -> SmoothTerm:
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    knots = np.atleast_2d(np.asarray(knots, dtype=float))
    if knots.shape[0] < 3:
        raise ValueError("thin plate basis needs at least three knots")
    centred = knots - knots.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-9 * max(np.abs(centred).max(), 1.0)) < 2:
        warnings.warn("collinear knots: thin plate basis is rank deficient", KnotWarning, stacklevel=2)
    omega = tps_kernel(_pairwise_dist(knots, knots))
    ois = _inverse_sqrt_abs(omega, name)
    return SmoothTerm(name, "tps2d", _tps_design(coords, knots, ois), knots, ois, 3)


def space_filling_knots(coords, k: int, rng: np.random.Generator | None = None, iters: int = 25) -> np.ndarray:
    """k-means style knot placement over a set of candidate coordinates.

    Deterministic given ``rng`` (seeded from a fixed value when omitted).
    """
    coords = np.asarray(coords, dtype=float)
    if k >= len(coords):
        return coords.copy()
    rng = np.random.default_rng(0) if rng is None else rng
    centres = coords[rng.choice(len(coords), size=k, replace=False)]
    for _ in range(iters):
        lab = np.argmin(((coords[:, None, :] - centres[None, :, :]) ** 2).sum(-1), axis=1)
        for j in range(k):
            members = coords[lab == j]
            if len(members):
                centres[j] = members.mean(axis=0)
    # snap to nearest candidate so knots sit on real locations
    snap = np.argmin(((centres[:, None, :] - coords[None, :, :]) ** 2).sum(-1), axis=1)
    return coords[np.unique(snap)]


@dataclass(frozen=True, eq=False)
class PriorCovariance:
    """Diagonal prior covariance of the coefficient vector b.

    ``groups[j]`` is -1 for an unpenalized (fixed-effect) column and otherwise
    the index of the variance component that column uses.
    """

    groups: np.ndarray
    fixed_variance: float = 1e6

    def diagonal(self, component_variances) -> np.ndarray:
        comp = np.asarray(component_variances, dtype=float)
        out = np.full(self.groups.size, float(self.fixed_variance))
        pen = self.groups >= 0
        out[pen] = comp[self.groups[pen]]
        return out

    def log_det(self, component_variances) -> float:
        return float(np.sum(np.log(self.diagonal(component_variances))))


def penalized_fit(design, y, penalty, noise_var: float = 1.0):
    """Dense generalized ridge: argmin |y - X c|^2 / noise_var + c' penalty c."""
    X = np.asarray(design)
    A = X.T @ X / noise_var + penalty
    coef = np.linalg.solve(A, X.T @ y / noise_var)
    return coef, X @ coef


def smoother_df(design, penalty, noise_var: float = 1.0) -> float:
    """Effective degrees of freedom ``tr(X (X'X + s2 P)^{-1} X')``."""
    X = np.asarray(design)
    A = X.T @ X / noise_var + penalty
    return float(np.trace(np.linalg.solve(A, X.T @ X / noise_var)))
