"""Two-likelihood latent model for observations Y and proxy A.

    Y = Z_y b_y + P_Y Z_L b_L (+ P_Y g)     + P_delta delta + eps,   eps ~ N(0, V_Y)
    A = Z_a b_a + beta1 P_A Z_L b_L (+ beta1 g) + phi          + e,     e   ~ N(0, V_A)

``phi`` (and ``g`` in joint mode) are intrinsic GMRFs with precision kappa Q;
b ~ N(0, Lambda).  The fields are integrated out first (sparse Woodbury on
the stacked data), then b (dense), leaving the marginal posterior of the
hyperparameters theta and the co-located site effects delta.

Data are handled as one stacked vector ``d = [Y; A]`` with diagonal noise
``V = diag(V_Y, V_A)``; each field contributes a sparse block of columns to
the stacked map ``P*``.  With only ``phi`` the Y rows of ``P*`` are empty and
the stacked algebra reduces exactly to the separate Y and A computations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import ndtr
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .linalg import CholeskyFactor, IndefiniteMatrixError, factorize, factorize_band
from .mrf import IntrinsicPrecision

MODES = ("two_likelihood", "no_proxy", "proxy_as_covariate")


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LatentField:
    """An intrinsic GMRF integrated out of the likelihood.

    ``y_map``/``a_map`` send field values to observation / proxy rows (None when
    the field does not enter that likelihood).  ``beta1_scaled`` marks fields
    that are part of the focal process, whose proxy map is multiplied by beta1.
    """

    name: str
    prior: IntrinsicPrecision
    kappa_param: str
    y_map: sp.csr_matrix | None = None
    a_map: sp.csr_matrix | None = None
    beta1_scaled: bool = False

    @property
    def dim(self) -> int:
        return self.prior.dim


@dataclass(frozen=True)
class VariantFlags:
    mode: str = "two_likelihood"
    include_discrepancy: bool = True
    fix_kappa: float | None = None
    fix_beta1: float | None = None
    orthogonalize: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModelError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "two_likelihood":
            if self.fix_beta1 is not None or self.fix_kappa is not None or self.orthogonalize:
                raise ModelError("fix_beta1, fix_kappa and orthogonalize need two_likelihood mode")


@dataclass(frozen=True)
class Priors:
    sd_upper: float = 100.0
    smooth_sd_cap: float = 10.0
    beta1_sd: float = 100.0
    beta1_bound: float = 500.0
    fixed_effect_variance: float = 1e6


@dataclass(frozen=True)
class Param:
    name: str
    scale: str  # "log" or "linear"
    upper_sd: float | None = None  # sd-uniform bound for variances / precisions


@dataclass
class HyperState:
    """Hyperparameter values on the natural scale plus co-located site effects."""

    values: dict
    delta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def with_values(self, **updates) -> "HyperState":
        vals = dict(self.values)
        vals.update(updates)
        return HyperState(vals, self.delta.copy())

    def with_delta(self, delta) -> "HyperState":
        return HyperState(dict(self.values), np.asarray(delta, dtype=float))


@dataclass
class LatentDraws:
    b: np.ndarray
    fields: dict
    index: int = 0
    values: dict = field(default_factory=dict)  # hyperparameters the draw was taken at


@dataclass(frozen=True, eq=False)
class FusionModelSpec:
    """Fully assembled model.

    Coefficients are ordered ``b = [b_y | b_L | b_a]``.  ``groups[j]`` is -1
    for an unpenalized column and otherwise indexes ``smooth_names``; the
    variance of that group is the hyperparameter ``sigma2_b[<name>]``.
    """

    y: np.ndarray
    Z_y: np.ndarray
    Z_L: np.ndarray
    P_Y: sp.csr_matrix
    groups: np.ndarray
    smooth_names: tuple
    n_i: np.ndarray
    n_month: np.ndarray
    colocated_site: np.ndarray  # per observation: index into delta, or -1
    A: np.ndarray | None = None
    P_A: sp.csr_matrix | None = None
    Z_a: np.ndarray | None = None
    fields: tuple = ()
    proxy_kind: str = "cmaq"
    proxy_n: np.ndarray | None = None
    proxy_n_month: np.ndarray | None = None
    flags: VariantFlags = VariantFlags()
    priors: Priors = Priors()
    fixed: dict = field(default_factory=lambda: {"sigma2_eps": 1.5})
    g_to_base: sp.csr_matrix | None = None  # joint mode: coarse g -> base cells
    base_to_phi: sp.csr_matrix | None = None  # averages base-cell L onto the phi grid
    initial: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.y.size
        if self.Z_y.shape[0] != n or self.P_Y.shape[0] != n:
            raise ModelError("observation design rows do not match y")
        if self.P_Y.shape[1] != self.Z_L.shape[0]:
            raise ModelError("P_Y columns must match Z_L rows (base cells)")
        if np.any(self.n_i < 1) or np.any(self.n_i > self.n_month):
            bad = int(np.flatnonzero((self.n_i < 1) | (self.n_i > self.n_month))[0])
            raise ModelError(f"observation {bad}: need 1 <= n_i <= n_month")
        if self.groups.size != self.n_coef:
            raise ModelError(f"groups has {self.groups.size} entries, design has {self.n_coef} columns")
        if self.has_proxy:
            if self.P_A is None or self.P_A.shape != (self.A.size, self.Z_L.shape[0]):
                raise ModelError("P_A must map base cells to proxy rows")
            if self.proxy_kind == "aod" and self.proxy_n is None:
                raise ModelError("AOD proxy variance needs per-cell retrieval counts")
        two = self.flags.mode == "two_likelihood"
        if two != self.has_proxy:
            raise ModelError(f"mode {self.flags.mode!r} is inconsistent with the proxy being "
                             f"{'present' if self.has_proxy else 'absent'}")
        has_phi = any(f.name == "phi" for f in self.fields)
        if two and has_phi != self.flags.include_discrepancy:
            raise ModelError("include_discrepancy must match the presence of a 'phi' field")
        for f in self.fields:
            if f.y_map is not None and f.y_map.shape != (n, f.dim):
                raise ModelError(f"field {f.name}: y_map has wrong shape")
            if f.a_map is not None and (not self.has_proxy or f.a_map.shape != (self.A.size, f.dim)):
                raise ModelError(f"field {f.name}: a_map has wrong shape")

    # ---- layout -----------------------------------------------------------
    @property
    def has_proxy(self) -> bool:
        return self.A is not None

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def n_proxy(self) -> int:
        return 0 if self.A is None else self.A.size

    @property
    def p_y(self) -> int:
        return self.Z_y.shape[1]

    @property
    def p_L(self) -> int:
        return self.Z_L.shape[1]

    @property
    def p_a(self) -> int:
        return 0 if self.Z_a is None else self.Z_a.shape[1]

    @property
    def n_coef(self) -> int:
        return self.p_y + self.p_L + self.p_a

    @property
    def n_delta(self) -> int:
        return int(self.colocated_site.max()) + 1 if np.any(self.colocated_site >= 0) else 0

    @cached_property
    def P_delta(self) -> sp.csr_matrix:
        rows = np.flatnonzero(self.colocated_site >= 0)
        return sp.csr_matrix(
            (np.ones(rows.size), (rows, self.colocated_site[rows])), shape=(self.n_obs, self.n_delta)
        )

    @cached_property
    def PA_ZL(self) -> np.ndarray:
        return np.asarray(self.P_A @ self.Z_L) if self.has_proxy else np.zeros((0, self.p_L))

    @cached_property
    def PY_ZL(self) -> np.ndarray:
        return np.asarray(self.P_Y @ self.Z_L)

    @cached_property
    def field_plan(self) -> "FieldPlan":
        return FieldPlan(self)

    @cached_property
    def k_obs(self) -> np.ndarray:
        return 1.0 / self.n_i - 1.0 / self.n_month

    @cached_property
    def k_proxy(self) -> np.ndarray | None:
        if self.proxy_n is None:
            return None
        return 1.0 / self.proxy_n - 1.0 / self.proxy_n_month

    def smooth_param(self, name: str) -> str:
        return f"sigma2_b[{name}]"

    def parameters(self) -> list[Param]:
        """Free and fixed hyperparameters, in a stable order."""
        pr = self.priors
        out = []
        if self.has_proxy:
            out.append(Param("beta1", "linear"))
        out.append(Param("sigma2_eps", "log", pr.sd_upper))
        if np.any(self.k_obs > 0):
            out.append(Param("sigma2_sub", "log", pr.sd_upper))
        out.append(Param("sigma2_h", "log", pr.sd_upper))
        if self.has_proxy:
            out.append(Param("sigma2_A", "log", pr.sd_upper))
            if self.proxy_kind == "aod" and np.any(self.k_proxy > 0):
                out.append(Param("sigma2_alpha", "log", pr.sd_upper))
        for name in self.smooth_names:
            out.append(Param(self.smooth_param(name), "log", min(pr.sd_upper, pr.smooth_sd_cap)))
        for f in self.fields:
            out.append(Param(f.kappa_param, "log", pr.sd_upper))
        return out

    def fixed_values(self) -> dict:
        fixed = dict(self.fixed)
        if self.flags.fix_beta1 is not None and self.has_proxy:
            fixed["beta1"] = float(self.flags.fix_beta1)
        if self.flags.fix_kappa is not None:
            for f in self.fields:
                if f.name == "phi":
                    fixed[f.kappa_param] = float(self.flags.fix_kappa)
        names = {p.name for p in self.parameters()}
        return {k: v for k, v in fixed.items() if k in names}

    def free_parameters(self) -> list[Param]:
        fixed = self.fixed_values()
        return [p for p in self.parameters() if p.name not in fixed]

    def default_state(self) -> HyperState:
        vals = {}
        vy = float(np.var(self.y)) if self.n_obs > 1 else 1.0
        for p in self.parameters():
            if p.name == "beta1":
                vals[p.name] = 0.5
            elif p.name.startswith("kappa"):
                vals[p.name] = 1.0
            elif p.name in ("sigma2_h", "sigma2_sub"):
                vals[p.name] = max(vy / 4, 1e-3)
            elif p.name == "sigma2_A":
                vals[p.name] = max(float(np.var(self.A)) / 4, 1e-3)
            else:
                vals[p.name] = 1.0
        vals.update({k: v for k, v in self.initial.items() if k in vals})
        vals.update(self.fixed_values())
        return HyperState(vals, np.zeros(self.n_delta))

    def with_flags(self, **kw) -> "FusionModelSpec":
        return replace(self, flags=replace(self.flags, **kw))

    # ---- focal process ----------------------------------------------------
    def split_b(self, b):
        b = np.asarray(b)
        return b[..., : self.p_y], b[..., self.p_y : self.p_y + self.p_L], b[..., self.p_y + self.p_L :]

    def focal_process(self, b, fields: dict | None = None) -> np.ndarray:
        """L on base cells from coefficient draws (and g in joint mode)."""
        _, b_L, _ = self.split_b(b)
        L = b_L @ self.Z_L.T
        if self.g_to_base is not None and fields is not None and "g" in fields:
            L = L + (self.g_to_base @ np.asarray(fields["g"]).T).T
        return L


# ---- variance structures ---------------------------------------------------

def obs_variance(theta, n_i, n_month, colocated) -> np.ndarray:
    """Diagonal of V_Y: instrument error, subsampling, and (non co-located) site effect."""
    n_i = np.asarray(n_i, dtype=float)
    n_month = np.broadcast_to(np.asarray(n_month, dtype=float), n_i.shape)
    if np.any(n_i > n_month):
        bad = int(np.flatnonzero(n_i > n_month)[0])
        raise ModelError(f"observation {bad}: n_i={n_i[bad]:g} exceeds n_month={n_month[bad]:g}")
    k = 1.0 / n_i - 1.0 / n_month
    v = theta["sigma2_eps"] / n_i + k * theta.get("sigma2_sub", 0.0)
    return v + np.where(np.asarray(colocated, dtype=bool), 0.0, theta["sigma2_h"])


def proxy_variance(theta, n_proxy: int, proxy_kind: str = "cmaq", counts=None, n_month=None) -> np.ndarray:
    if proxy_kind == "cmaq":
        return np.full(n_proxy, float(theta["sigma2_A"]))
    if proxy_kind != "aod":
        raise ModelError(f"unknown proxy kind {proxy_kind!r}")
    if counts is None:
        raise ModelError("AOD proxy variance needs per-cell retrieval counts")
    counts = np.asarray(counts, dtype=float)
    k = 1.0 / counts - 1.0 / np.broadcast_to(np.asarray(n_month, dtype=float), counts.shape)
    return theta["sigma2_A"] + k * theta.get("sigma2_alpha", 0.0)


def _vy(spec: FusionModelSpec, theta) -> np.ndarray:
    return obs_variance(theta, spec.n_i, spec.n_month, spec.colocated_site >= 0)


def _va(spec: FusionModelSpec, theta) -> np.ndarray:
    return proxy_variance(theta, spec.n_proxy, spec.proxy_kind, spec.proxy_n, spec.proxy_n_month)


# ---- field marginalization ---------------------------------------------------

class FieldMarginal:
    """Gaussian fields integrated out of data with diagonal noise.

    Exposes ``x -> Sigma^{-1} x`` via Woodbury,
    ``Sigma^{-1} = W - W P V P' W`` with ``V^{-1} = P' W P + blockdiag(kappa_k Q_k)``,
    and ``log_det_term`` = log |Sigma|^{-1/2} up to the constant generalized
    determinants of the Q_k.
    """

    def __init__(self, noise_var, factor: CholeskyFactor | None = None, p_mul=None, pt_mul=None,
                 rank_terms=()):
        self.noise_var = np.asarray(noise_var, dtype=float)
        if np.any(self.noise_var <= 0):
            raise ModelError("noise variances must be positive")
        self.w = 1.0 / self.noise_var
        self.factor = factor
        self._p, self._pt = p_mul, pt_mul
        ld = -0.5 * np.sum(np.log(self.noise_var))
        if factor is not None:
            ld += sum(0.5 * rank * math.log(k) for rank, k in rank_terms)
            ld -= 0.5 * factor.log_det()
        self.log_det_term = float(ld)

    @classmethod
    def from_sparse(cls, noise_var, P, prior_precision, rank_terms=()):
        w = 1.0 / np.asarray(noise_var, dtype=float)
        P = sp.csr_matrix(P)
        factor = factorize((P.T @ sp.diags(w) @ P + prior_precision).tocsr())
        Pt = P.T.tocsr()
        return cls(noise_var, factor, lambda x: P @ x, lambda y: Pt @ y, rank_terms)

    @property
    def n(self) -> int:
        return self.noise_var.size

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        wx = self.w[:, None] * x if x.ndim == 2 else self.w * x
        if self.factor is None:
            return wx
        corr = self._p(self.factor.solve(self._pt(wx)))
        return wx - (self.w[:, None] * corr if x.ndim == 2 else self.w * corr)

    def gram(self, X) -> np.ndarray:
        """``X.T Sigma^{-1} X`` using one triangular sweep."""
        X = np.asarray(X, dtype=float)
        wX = self.w[:, None] * X
        G = X.T @ wX
        if self.factor is None:
            return G
        T = self._pt(wX)
        # columns that never reach the fields need no solve
        live = np.flatnonzero(np.any(T != 0, axis=0))
        if live.size:
            H = self.factor.half_solve(T[:, live])
            G[np.ix_(live, live)] -= H.T @ H
        return G

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(self.n))

    def field_conditional(self, resid, rng: np.random.Generator | None = None):
        """Mean (and a draw when rng given) of the fields given data residual."""
        mean = self.factor.solve(self._pt(self.w * resid))
        if rng is None:
            return mean
        return mean + self.factor.sample(rng)


def _pair_products(P: sp.csr_matrix):
    """All within-row pairs of nonzeros: (row, col_a, col_b, val_a * val_b)."""
    P = sp.csr_matrix(P)
    P.sum_duplicates()
    counts = np.diff(P.indptr)
    rows = np.repeat(np.arange(P.shape[0]), counts)
    reps = counts[rows]
    left = np.repeat(np.arange(P.nnz), reps)
    total = left.size
    first = np.repeat(np.cumsum(reps) - reps, reps)
    right = np.arange(total) - first + np.repeat(P.indptr[rows], reps)
    return rows[left], P.indices[left], P.indices[right], P.data[left] * P.data[right]


class FieldPlan:
    """Precomputed assembly of the stacked field precision in band storage.

    The band entries of ``P*' W P* + sum_k kappa_k Q_k`` are linear in the
    noise precisions ``w`` (with powers of beta1 on the scaled columns of the
    proxy rows) and in the kappas, so each evaluation is a few sparse
    mat-vecs plus one banded Cholesky.
    """

    def __init__(self, spec: "FusionModelSpec"):
        nY, nA = spec.n_obs, spec.n_proxy
        fields = spec.fields
        dims = [f.dim for f in fields]
        self.offsets = np.r_[0, np.cumsum(dims)].astype(int)
        M = int(self.offsets[-1])
        self.M = M
        self.PY = sp.hstack(
            [f.y_map if f.y_map is not None else sp.csr_matrix((nY, f.dim)) for f in fields], format="csr"
        )
        self.PA = (
            sp.hstack([f.a_map if f.a_map is not None else sp.csr_matrix((nA, f.dim)) for f in fields],
                      format="csr")
            if nA else None
        )
        self.scaled = np.zeros(M, dtype=bool)
        for f, o in zip(fields, self.offsets):
            if f.beta1_scaled:
                self.scaled[o : o + f.dim] = True
        self.PYt = self.PY.T.tocsr()
        self.PAt = self.PA.T.tocsr() if nA else None
        Qs = sp.block_diag([f.prior.Q for f in fields], format="csr")
        pattern = abs(self.PY).T @ abs(self.PY) + abs(Qs)
        if nA:
            pattern = pattern + abs(self.PA).T @ abs(self.PA)
        pattern = sp.csr_matrix(pattern)
        perm = np.asarray(reverse_cuthill_mckee(pattern, symmetric_mode=True), dtype=int)
        coo = pattern.tocoo()

        def bw(p):
            ip = np.empty_like(p)
            ip[p] = np.arange(M)
            return int(np.max(np.abs(ip[coo.row] - ip[coo.col]))) if coo.nnz else 0

        natural = np.arange(M)
        if bw(perm) >= bw(natural):
            perm = natural
        self.perm = perm
        self.iperm = np.empty_like(perm)
        self.iperm[perm] = np.arange(M)
        self.bw = bw(perm)
        self.n_band = (self.bw + 1) * M
        self.TY = self._gram(self.PY, None)[0]
        self.TA = self._gram(self.PA, self.scaled) if nA else None
        self.q_band = []
        self.ranks = []
        for f, o in zip(fields, self.offsets):
            qc = f.prior.Q.tocoo()
            self.q_band.append(self._band_vector(qc.row + o, qc.col + o, qc.data))
            self.ranks.append(f.prior.rank)

    def _band_index(self, a, b):
        qa, qb = self.iperm[a], self.iperm[b]
        lower = qa >= qb
        return lower, (qa - qb) * self.M + qb

    def _band_vector(self, rows, cols, vals):
        lower, idx = self._band_index(rows, cols)
        return np.bincount(idx[lower], weights=vals[lower], minlength=self.n_band)

    def _gram(self, P, scaled):
        """Sparse maps w -> band(P' diag(w) P), split by beta1 power."""
        r, a, b, v = _pair_products(P)
        lower, idx = self._band_index(a, b)
        power = np.zeros(r.size, dtype=int) if scaled is None else scaled[a].astype(int) + scaled[b].astype(int)
        out = []
        for pw in range(3):
            sel = lower & (power == pw)
            out.append(sp.csr_matrix((v[sel], (idx[sel], r[sel])), shape=(self.n_band, P.shape[0])))
        return out

    def factor(self, wY, wA, beta1, kappas) -> CholeskyFactor:
        band = self.TY @ wY
        if self.TA is not None:
            band = band + self.TA[0] @ wA + beta1 * (self.TA[1] @ wA) + beta1**2 * (self.TA[2] @ wA)
        for k, q in zip(kappas, self.q_band):
            band = band + k * q
        return factorize_band(band.reshape(self.bw + 1, self.M), self.perm)

    def operators(self, beta1):
        scale = np.where(self.scaled, beta1, 1.0)
        nY = self.PY.shape[0]
        PY, PA, PYt, PAt = self.PY, self.PA, self.PYt, self.PAt

        def p_mul(x):
            xs = scale[:, None] * x if x.ndim == 2 else scale * x
            top = PY @ x
            return top if PA is None else np.concatenate([top, PA @ xs])

        def pt_mul(y):
            out = PYt @ y[:nY]
            if PA is not None:
                t = PAt @ y[nY:]
                out = out + (scale[:, None] * t if t.ndim == 2 else scale * t)
            return out

        return p_mul, pt_mul


def marginalize_fields(spec: FusionModelSpec, theta) -> FieldMarginal:
    """Integrate all latent fields out of the stacked [Y; A] likelihood."""
    vy = _vy(spec, theta)
    v = np.concatenate([vy, _va(spec, theta)]) if spec.has_proxy else vy
    if not spec.fields:
        return FieldMarginal(v)
    kappas = [theta[f.kappa_param] for f in spec.fields]
    if not all(k > 0 for k in kappas):
        raise ModelError("kappa must be positive")
    if np.any(v <= 0):
        raise ModelError("noise variances must be positive")
    beta1 = theta.get("beta1", 0.0)
    plan = spec.field_plan
    w = 1.0 / v
    factor = plan.factor(w[: spec.n_obs], w[spec.n_obs :], beta1, kappas)
    p_mul, pt_mul = plan.operators(beta1)
    return FieldMarginal(v, factor, p_mul, pt_mul, list(zip(plan.ranks, kappas)))


def marginalize_phi(spec: FusionModelSpec, theta) -> FieldMarginal:
    """Sigma_A^{-1} applicator and log|Sigma_A|^{-1/2} for the proxy alone."""
    phi = [f for f in spec.fields if f.name == "phi"]
    if not spec.has_proxy or not phi:
        raise ModelError("marginalize_phi needs a proxy likelihood with a discrepancy field")
    f = phi[0]
    kappa = theta[f.kappa_param]
    if not kappa > 0:
        raise ModelError("kappa must be positive")
    return FieldMarginal.from_sparse(_va(spec, theta), f.a_map, kappa * f.prior.Q, [(f.prior.rank, kappa)])


def marginalize_joint(spec: FusionModelSpec, theta) -> FieldMarginal:
    """Integration over phi* = {g, phi} on the stacked likelihood."""
    if len(spec.fields) < 2:
        raise ModelError("joint marginalization needs both g and phi fields")
    return marginalize_fields(spec, theta)


# ---- coefficient marginalization -------------------------------------------

def stacked_design(spec: FusionModelSpec, beta1: float) -> np.ndarray:
    """[Z_Y; Z_A] with zero padding so that Z_Y b and Z_A b pick their blocks."""
    nY, nA = spec.n_obs, spec.n_proxy
    top = np.hstack([spec.Z_y, spec.PY_ZL, np.zeros((nY, spec.p_a))])
    if not nA:
        return top
    bottom = np.hstack([np.zeros((nA, spec.p_y)), beta1 * spec.PA_ZL,
                        spec.Z_a if spec.p_a else np.zeros((nA, 0))])
    return np.vstack([top, bottom])


def stacked_data(spec: FusionModelSpec) -> np.ndarray:
    return np.concatenate([spec.y, spec.A]) if spec.has_proxy else spec.y.copy()


def stacked_delta_map(spec: FusionModelSpec) -> np.ndarray:
    Pd = spec.P_delta.toarray()
    if spec.has_proxy:
        Pd = np.vstack([Pd, np.zeros((spec.n_proxy, spec.n_delta))])
    return Pd


def _lambda_diag(spec: FusionModelSpec, theta) -> np.ndarray:
    comp = [theta[spec.smooth_param(n)] for n in spec.smooth_names]
    out = np.full(spec.n_coef, spec.priors.fixed_effect_variance)
    pen = spec.groups >= 0
    if np.any(pen):
        out[pen] = np.asarray(comp)[spec.groups[pen]]
    return out


@dataclass
class CoefficientPosterior:
    mean: np.ndarray
    chol: tuple  # cho_factor of V_b^{-1}
    log_det_half: float  # log |V_b|^{1/2}

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        c, lower = self.chol
        L = np.tril(c) if lower else np.triu(c).T
        z = rng.standard_normal(self.mean.size)
        return self.mean + solve_triangular(L.T, z, lower=False)

    def cov(self) -> np.ndarray:
        return cho_solve(self.chol, np.eye(self.mean.size))


def marginalize_b(spec: FusionModelSpec, theta, marginal: FieldMarginal | None = None, delta=None):
    """Posterior of b given theta and delta, with all fields integrated out."""
    ev = evaluate(spec, theta, marginal=marginal)
    return ev.coefficient_posterior(theta_delta(spec, theta, delta))


def theta_delta(spec, theta, delta=None) -> np.ndarray:
    if delta is not None:
        return np.asarray(delta, dtype=float)
    d = getattr(theta, "delta", None)
    return np.zeros(spec.n_delta) if d is None or d.size != spec.n_delta else d


class Evaluation:
    """Everything about the marginal posterior at one theta that does not depend on delta."""

    def __init__(self, spec: FusionModelSpec, theta, marginal: FieldMarginal | None = None):
        self.spec = spec
        self.theta = theta
        self.marginal = marginalize_fields(spec, theta) if marginal is None else marginal
        beta1 = theta.get("beta1", 0.0)
        Z = stacked_design(spec, beta1)
        d = stacked_data(spec)
        Pd = stacked_delta_map(spec)
        self.Z, self.d, self.Pd = Z, d, Pd
        p = Z.shape[1]
        G = self.marginal.gram(np.column_stack([Z, d, Pd]))
        self.lam = _lambda_diag(spec, theta)
        prec = G[:p, :p] + np.diag(1.0 / self.lam)
        try:
            self.chol = cho_factor(prec, lower=True)
        except np.linalg.LinAlgError as exc:
            raise IndefiniteMatrixError(-1) from exc
        self.logdet_prec_b = float(2 * np.sum(np.log(np.diag(self.chol[0]))))
        # cross products needed for any delta
        self.ZSd = G[:p, p].copy()
        self.ZSP = G[:p, p + 1 :].copy()
        self.dSd = float(G[p, p])
        self.PSd = G[p + 1 :, p].copy()
        self.PSP = G[p + 1 :, p + 1 :].copy()
        self.log_lambda = float(np.sum(np.log(self.lam)))

    def _h(self, delta):
        return self.ZSd - self.ZSP @ delta

    def coefficient_posterior(self, delta) -> CoefficientPosterior:
        h = self._h(delta)
        return CoefficientPosterior(cho_solve(self.chol, h), self.chol, -0.5 * self.logdet_prec_b)

    def quadratic(self, delta) -> float:
        h = self._h(delta)
        rSr = self.dSd - 2 * delta @ self.PSd + delta @ self.PSP @ delta
        return float(rSr - h @ cho_solve(self.chol, h))

    def log_likelihood(self, delta) -> float:
        """log p(Y, A | theta, delta) up to theta-free constants."""
        return (
            -0.5 * self.log_lambda
            + self.marginal.log_det_term
            - 0.5 * self.logdet_prec_b
            - 0.5 * self.quadratic(delta)
        )

    def components(self, delta) -> dict:
        return {
            "log_lambda": -0.5 * self.log_lambda,
            "field_det": self.marginal.log_det_term,
            "coef_det": -0.5 * self.logdet_prec_b,
            "quadratic": -0.5 * self.quadratic(delta),
        }

    def delta_conditional(self):
        """Mean and precision of delta | theta, data."""
        s2 = self.theta["sigma2_h"]
        VbZSP = cho_solve(self.chol, self.ZSP)
        prec = np.eye(self.PSP.shape[0]) / s2 + self.PSP - self.ZSP.T @ VbZSP
        rhs = self.PSd - VbZSP.T @ self.ZSd
        mean = np.linalg.solve(prec, rhs)
        return mean, prec

    def sample_delta(self, rng: np.random.Generator) -> np.ndarray:
        if self.PSP.shape[0] == 0:
            return np.zeros(0)
        mean, prec = self.delta_conditional()
        L = np.linalg.cholesky(prec)
        return mean + solve_triangular(L.T, rng.standard_normal(mean.size), lower=False)

    def sample_latents(self, delta, rng: np.random.Generator, sample_fields: bool = True, index: int = 0):
        post = self.coefficient_posterior(delta)
        b = post.sample(rng)
        fields = {}
        if sample_fields and self.marginal.factor is not None:
            resid = self.d - self.Z @ b - self.Pd @ delta
            x = self.marginal.field_conditional(resid, rng)
            start = 0
            for f in self.spec.fields:
                fields[f.name] = x[start : start + f.dim]
                start += f.dim
        vals = dict(self.theta.values if isinstance(self.theta, HyperState) else self.theta)
        return LatentDraws(b, fields, index, vals)

    def field_mean(self, b, delta) -> np.ndarray:
        resid = self.d - self.Z @ b - self.Pd @ delta
        return self.marginal.field_conditional(resid)


def evaluate(spec: FusionModelSpec, theta, marginal: FieldMarginal | None = None) -> Evaluation:
    return Evaluation(spec, theta, marginal)


# ---- priors ------------------------------------------------------------------

def log_prior(spec: FusionModelSpec, theta) -> float:
    """Uniform priors on standard deviations, bounded normal on beta1.

    Fixed parameters contribute nothing.
    """
    fixed = spec.fixed_values()
    pr = spec.priors
    total = 0.0
    for p in spec.parameters():
        if p.name in fixed:
            continue
        v = theta[p.name]
        if p.name == "beta1":
            if abs(v) > pr.beta1_bound:
                return -math.inf
            z = pr.beta1_bound / pr.beta1_sd
            total += -0.5 * (v / pr.beta1_sd) ** 2 - math.log(pr.beta1_sd * math.sqrt(2 * math.pi)) \
                - math.log(ndtr(z) - ndtr(-z))
        elif p.name.startswith("kappa"):
            # sd = kappa^{-1/2} ~ U(0, B):  p(kappa) = kappa^{-3/2} / (2B)
            if not v > 0 or v ** -0.5 >= p.upper_sd:
                return -math.inf
            total += -1.5 * math.log(v) - math.log(2 * p.upper_sd)
        else:
            # sd = sqrt(v) ~ U(0, B):  p(v) = v^{-1/2} / (2B)
            if not v > 0 or math.sqrt(v) >= p.upper_sd:
                return -math.inf
            total += -0.5 * math.log(v) - math.log(2 * p.upper_sd)
    return total


def log_delta_prior(spec: FusionModelSpec, theta, delta) -> float:
    if spec.n_delta == 0:
        return 0.0
    s2 = theta["sigma2_h"]
    return float(-0.5 * delta @ delta / s2 - 0.5 * delta.size * math.log(2 * math.pi * s2))


def log_marginal_likelihood(spec: FusionModelSpec, theta, delta=None) -> float:
    return evaluate(spec, theta).log_likelihood(theta_delta(spec, theta, delta))


def log_marginal_posterior(spec: FusionModelSpec, theta, delta=None) -> float:
    """log p(theta, delta | Y, A) up to a theta-free constant; -inf outside the prior support."""
    lp = log_prior(spec, theta)
    if not math.isfinite(lp):
        return -math.inf
    delta = theta_delta(spec, theta, delta)
    ev = evaluate(spec, theta)
    return ev.log_likelihood(delta) + log_delta_prior(spec, theta, delta) + lp


def sample_delta(spec: FusionModelSpec, theta, rng: np.random.Generator) -> np.ndarray:
    return evaluate(spec, theta).sample_delta(rng)


def sample_latents_offline(spec: FusionModelSpec, theta, delta, rng: np.random.Generator,
                           sample_fields: bool = True) -> LatentDraws:
    """Draw b | theta, delta, data and then the fields | b, theta, data."""
    return evaluate(spec, theta).sample_latents(theta_delta(spec, theta, delta), rng, sample_fields)


# ---- held-out observations -------------------------------------------------------

@dataclass
class ObservationDesign:
    """What is needed to predict observations at new or held-out sites."""

    Z_y: np.ndarray
    P_Y: sp.csr_matrix
    field_maps: dict  # field name -> rows of its observation map
    n_i: np.ndarray
    n_month: np.ndarray

    @property
    def n(self) -> int:
        return self.Z_y.shape[0]


def observation_design(spec: FusionModelSpec, rows=None) -> ObservationDesign:
    rows = np.arange(spec.n_obs) if rows is None else np.asarray(rows)
    maps = {f.name: f.y_map[rows] for f in spec.fields if f.y_map is not None}
    return ObservationDesign(spec.Z_y[rows], spec.P_Y[rows], maps, spec.n_i[rows], spec.n_month[rows])


def split_observations(spec: FusionModelSpec, test_mask) -> tuple["FusionModelSpec", ObservationDesign]:
    """Drop test observations from the fit; co-located site indices are renumbered."""
    test_mask = np.asarray(test_mask, dtype=bool)
    train = np.flatnonzero(~test_mask)
    if train.size == 0:
        raise ModelError("no training observations left")
    coloc = spec.colocated_site[train]
    used = np.unique(coloc[coloc >= 0])
    remap = np.full(max(spec.n_delta, 1), -1)
    remap[used] = np.arange(used.size)
    coloc = np.where(coloc >= 0, remap[np.maximum(coloc, 0)], -1)
    fields = tuple(
        replace(f, y_map=f.y_map[train] if f.y_map is not None else None) for f in spec.fields
    )
    sub = replace(
        spec, y=spec.y[train], Z_y=spec.Z_y[train], P_Y=spec.P_Y[train], n_i=spec.n_i[train],
        n_month=spec.n_month[train], colocated_site=coloc, fields=fields,
    )
    return sub, observation_design(spec, np.flatnonzero(test_mask))


# ---- orthogonalization -----------------------------------------------------------

@dataclass
class OrthogonalizedDraw:
    phi: np.ndarray
    L: np.ndarray
    removed: np.ndarray  # c0 + c1 L, moved into the fitted proxy mean
    coef: np.ndarray


def orthogonalize(phi, L, mask=None) -> OrthogonalizedDraw:
    """Remove from phi its least-squares projection onto span{1, L}.

    ``mask`` restricts the fit to common cells; the projection is applied
    everywhere.  A numerically constant L projects onto {1} only.
    """
    phi = np.asarray(phi, dtype=float)
    L = np.asarray(L, dtype=float)
    sel = np.ones(phi.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    Ls = L[sel]
    spread = np.ptp(Ls) if Ls.size else 0.0
    if spread <= 1e-12 * max(1.0, np.abs(Ls).max(initial=0.0)):
        coef = np.array([phi[sel].mean(), 0.0])
    else:
        X = np.column_stack([np.ones(Ls.size), Ls])
        coef = np.linalg.lstsq(X, phi[sel], rcond=None)[0]
    removed = coef[0] + coef[1] * L
    return OrthogonalizedDraw(phi - removed, L.copy(), removed, coef)
