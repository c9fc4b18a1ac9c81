"""Simulated focal process, observations and proxy for the six discrepancy scenarios.

The layout (land mask, covariate surfaces, monitor sites, distances to roads)
is fixed by ``layout_seed``; each replicate redraws the residual surface, the
discrepancy fields and all noise.  Scenarios 1-5 of a replicate share those
draws and differ only in which components enter the proxy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .grid import RegularGrid

REFERENCE_NCOL = 175  # ranges below are quoted for a 175-column domain

SCENARIOS = {
    1: dict(large=True, small=True, beta1=1.0),
    2: dict(large=True, small=True, beta1=0.0),
    3: dict(large=False, small=False, beta1=1.0),
    4: dict(large=True, small=False, beta1=1.0),
    5: dict(large=False, small=True, beta1=1.0),
    6: dict(large=True, small=True, beta1=1.0),
}


class GPError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int = 1
    nrow: int = 40
    ncol: int = 60
    cell_size: float = 1.0
    n_obs: int = 60
    n_obs_sparse: int = 40
    proxy_noise_var: float = 0.55**2
    obs_noise_var: float = 1.73**2
    residual_var: float = 2.5**2
    small_var: float = 1.64**2
    large_var: float = 2.0**2
    covariate_var: float = 0.93**2
    nu: float = 2.0
    residual_range: float = 340.0
    large_range: float = 413.0
    small_range: float = 24.0
    coefficients: tuple = (0.2, -0.3, 0.01, 0.01, 0.1)
    n_replicates: int = 3
    seed: int = 2024
    layout_seed: int = 7
    max_dense_cells: int = 4000

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be 1-6, got {self.scenario}")

    @property
    def beta1(self) -> float:
        return SCENARIOS[self.scenario]["beta1"]

    @property
    def range_scale(self) -> float:
        return self.ncol / REFERENCE_NCOL

    @property
    def kappa_scale(self) -> float:
        """Factor keeping a fixed TPS precision equally smooth in domain units on a coarser grid."""
        return self.range_scale**2

    def effective_range(self, which: str) -> float:
        """Range in grid units, scaled to keep range-to-domain ratios."""
        return getattr(self, f"{which}_range") * self.range_scale * self.cell_size

    @property
    def n_sites(self) -> int:
        return self.n_obs_sparse if self.scenario == 6 else self.n_obs


# ---- Matérn --------------------------------------------------------------------------

def matern_correlation(d, nu: float, decay: float) -> np.ndarray:
    """(a d)^nu K_nu(a d) / (2^(nu-1) Gamma(nu)), equal to 1 at d = 0."""
    x = decay * np.asarray(d, dtype=float)
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    out[pos] = xp**nu * kv(nu, xp) / (2 ** (nu - 1) * gamma_fn(nu))
    # K_nu underflows far out; correlation there is zero to double precision
    out[pos & ~np.isfinite(out)] = 0.0
    return out


@lru_cache(maxsize=64)
def calibrate_decay(effective_range: float, nu: float, level: float = 0.05) -> float:
    """Decay a such that correlation(effective_range) = level."""
    f = lambda log_a: matern_correlation(np.array([effective_range]), nu, math.exp(log_a))[0] - level
    return math.exp(brentq(f, math.log(1e-8 / effective_range), math.log(1e4 / effective_range), xtol=1e-14))


# ---- Gaussian process draws ------------------------------------------------------------

_FACTORS: dict = {}


def _dense_factor(coords: np.ndarray, nu: float, decay: float, key) -> np.ndarray:
    hit = _FACTORS.get(key)
    if hit is not None:
        return hit
    # lattice coordinates repeat few distinct distances; evaluate K_nu once per distance
    sq = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    uniq, inv = np.unique(np.round(sq, 9), return_inverse=True)
    C = matern_correlation(np.sqrt(uniq), nu, decay)[inv].reshape(sq.shape)
    C[np.diag_indices_from(C)] += 1e-8
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise GPError("Matérn covariance not positive definite after 1e-8 jitter") from exc
    if len(_FACTORS) >= 8:
        _FACTORS.clear()
    _FACTORS[key] = L
    return L


def sample_gp(grid: RegularGrid, variance: float, effective_range: float, rng: np.random.Generator,
              nu: float = 2.0, max_dense_cells: int = 4000, size: int | None = None) -> np.ndarray:
    """Matérn GP on cell centroids.

    Exact dense draw when the grid has at most ``max_dense_cells`` cells;
    otherwise an exact draw on a coarser lattice spanning the same extent,
    bilinearly interpolated to the cell centroids.
    """
    decay = calibrate_decay(float(effective_range), float(nu))
    if grid.size <= max_dense_cells:
        coords = grid.centroids()
        key = ("grid", grid.nrow, grid.ncol, grid.cell_size, grid.origin, nu, decay)
        L = _dense_factor(coords, nu, decay, key)
        z = rng.standard_normal((grid.size, 1 if size is None else size))
        out = math.sqrt(variance) * (L @ z)
        return out[:, 0] if size is None else out.T
    step = math.ceil(math.sqrt(grid.size / max_dense_cells))
    xmin, xmax, ymin, ymax = grid.extent
    nx = math.ceil(grid.ncol / step) + 1
    ny = math.ceil(grid.nrow / step) + 1
    xs = np.linspace(xmin, xmax, nx)
    ys = np.linspace(ymin, ymax, ny)
    X, Y = np.meshgrid(xs, ys)
    coarse = np.column_stack([X.ravel(), Y.ravel()])
    key = ("coarse", nx, ny, xmin, xmax, ymin, ymax, nu, decay)
    L = _dense_factor(coarse, nu, decay, key)
    k = 1 if size is None else size
    draws = math.sqrt(variance) * (L @ rng.standard_normal((coarse.shape[0], k)))
    cent = grid.centroids()
    out = np.empty((k, grid.size))
    for j in range(k):
        interp = RegularGridInterpolator((ys, xs), draws[:, j].reshape(ny, nx))
        out[j] = interp(cent[:, ::-1])
    return out[0] if size is None else out


# ---- fixed layout -------------------------------------------------------------------------

def coastline_mask(nrow: int, ncol: int) -> np.ndarray:
    """Deterministic land mask: sea along the east edge with a bay, about 87% land."""
    r, c = np.divmod(np.arange(nrow * ncol), ncol)
    u = r / max(nrow - 1, 1)
    shore = ncol * (0.86 + 0.05 * np.sin(2.3 * math.pi * u) + 0.03 * np.cos(5.1 * math.pi * u))
    bay = ((c - 0.72 * ncol) / (0.07 * ncol)) ** 2 + ((r - 0.35 * nrow) / (0.10 * nrow)) ** 2 < 1
    return (c < shore) & ~bay


@dataclass
class Layout:
    grid: RegularGrid
    covariates: dict  # generation versions on cells: pop, elev, road1, road2, road3, emis
    effect: np.ndarray  # true covariate contribution to L, variance-calibrated on land
    fit_covariates: dict  # misspecified versions used when fitting
    site_cells: np.ndarray
    site_xy: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    local: np.ndarray  # within-pixel variability at sites, centred


def _standard(z, land):
    return (z - z[land].mean()) / z[land].std()


def make_layout(cfg: ScenarioConfig) -> Layout:
    rng = np.random.default_rng(cfg.layout_seed)
    land = coastline_mask(cfg.nrow, cfg.ncol)
    grid = RegularGrid(cfg.nrow, cfg.ncol, cfg.cell_size, land_mask=land)
    span = cfg.ncol * cfg.cell_size
    smooth = lambda frac: sample_gp(grid, 1.0, frac * span, rng, cfg.nu, cfg.max_dense_cells)
    urban = smooth(0.25)
    tails = lambda scale: scale * rng.standard_t(3, grid.size)
    # natural units: people/km^2, metres, metres of road per km^2, tons per county
    pop = np.exp(4.5 + 1.2 * urban + 0.6 * smooth(0.04) + tails(0.3))
    elev = np.exp(5.4 + 0.9 * smooth(0.5) - 0.3 * urban + 0.2 * smooth(0.05))
    # each road class is mostly its own fine-scale network
    road1, road2, road3 = (12000.0 * np.exp(0.15 * urban + 0.6 * smooth(0.03) + 0.25 * rng.standard_normal(grid.size))
                           for _ in range(3))
    # county averages: constant on 8 x 8 blocks
    county = (np.arange(grid.size) // cfg.ncol // 8) * 1000 + (np.arange(grid.size) % cfg.ncol) // 8
    raw_emis = 25.0 * np.exp(0.8 * urban + 0.5 * smooth(0.2))
    emis = np.empty(grid.size)
    for cid in np.unique(county):
        sel = county == cid
        emis[sel] = raw_emis[sel].mean()
    b = cfg.coefficients
    eff = (b[0] * np.log(pop) + b[1] * np.log(elev) + b[2] * np.sqrt(road1) + b[3] * np.sqrt(road2)
           + b[4] * np.sqrt(emis))
    eff = eff - eff[land].mean()
    eff = eff * math.sqrt(cfg.covariate_var) / eff[land].std()
    fit = {
        "log_pop": _standard(np.log(pop), land),
        "elev500": _standard(np.minimum(elev, 500.0), land),
        "road3": _standard(road3, land),
        "log_emis": _standard(np.log(emis), land),
    }
    land_cells = np.flatnonzero(land)
    n = cfg.n_obs
    site_cells = rng.choice(land_cells, size=n, replace=False)
    r, c = np.divmod(site_cells, cfg.ncol)
    x0, y0 = grid.origin
    site_xy = np.column_stack([
        x0 + (c + rng.uniform(0.05, 0.95, n)) * cfg.cell_size,
        y0 + (r + rng.uniform(0.05, 0.95, n)) * cfg.cell_size,
    ])
    d1 = np.maximum(5.0, np.exp(math.log(284.0) + rng.standard_normal(n)))
    d2 = np.maximum(5.0, np.exp(math.log(115.0) + rng.standard_normal(n)))
    local = 50 * d1**-0.77 + 10 * d2**-0.77
    local = local - local.mean()
    covs = dict(pop=pop, elev=elev, road1=road1, road2=road2, road3=road3, emis=emis)
    return Layout(grid, covs, eff, fit, site_cells, site_xy, d1, d2, local)


# ---- replicates ----------------------------------------------------------------------------

@dataclass
class Components:
    g: np.ndarray
    phi_large: np.ndarray
    phi_small: np.ndarray
    proxy_noise: np.ndarray
    obs_noise: np.ndarray


def draw_components(cfg: ScenarioConfig, layout: Layout, rng: np.random.Generator) -> Components:
    grid = layout.grid
    gp = lambda var, which: sample_gp(grid, var, cfg.effective_range(which), rng, cfg.nu, cfg.max_dense_cells)
    return Components(
        g=gp(cfg.residual_var, "residual"),
        phi_large=gp(cfg.large_var, "large"),
        phi_small=gp(cfg.small_var, "small"),
        proxy_noise=math.sqrt(cfg.proxy_noise_var) * rng.standard_normal(grid.size),
        obs_noise=math.sqrt(cfg.obs_noise_var) * rng.standard_normal(cfg.n_obs),
    )


@dataclass
class ReplicateData:
    scenario: int
    grid: RegularGrid
    L: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    site_cells: np.ndarray
    site_xy: np.ndarray
    obs_covariates: dict  # fitting versions: clipped distances
    cell_covariates: dict  # fitting versions on cells
    truth: dict = field(default_factory=dict)

    @property
    def land(self) -> np.ndarray:
        return self.grid.land_mask


def compose(cfg: ScenarioConfig, layout: Layout, comp: Components) -> ReplicateData:
    """Assemble one scenario from shared draws."""
    s = SCENARIOS[cfg.scenario]
    L = layout.effect + comp.g
    phi = np.zeros_like(L)
    if s["large"]:
        phi = phi + comp.phi_large
    if s["small"]:
        phi = phi + comp.phi_small
    A = s["beta1"] * L + phi + comp.proxy_noise
    n = cfg.n_sites
    cells = layout.site_cells[:n]
    Y = L[cells] + layout.local[:n] + comp.obs_noise[:n]
    obs_cov = {
        "d1": np.clip(layout.d1[:n], 10.0, 500.0),
        "d2": np.clip(layout.d2[:n], 10.0, 500.0),
    }
    truth = dict(g=comp.g, phi=phi, phi_large=comp.phi_large if s["large"] else np.zeros_like(L),
                 phi_small=comp.phi_small if s["small"] else np.zeros_like(L), effect=layout.effect,
                 local=layout.local[:n])
    return ReplicateData(cfg.scenario, layout.grid, L, A, Y, cells, layout.site_xy[:n], obs_cov,
                         dict(layout.fit_covariates), truth)


def replicate_seeds(cfg: ScenarioConfig) -> list[int]:
    ss = np.random.SeedSequence(cfg.seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(cfg.n_replicates)]


def generate_scenario(cfg: ScenarioConfig, rng: np.random.Generator, layout: Layout | None = None) -> ReplicateData:
    layout = make_layout(cfg) if layout is None else layout
    return compose(cfg, layout, draw_components(cfg, layout, rng))


def generate_study(cfg: ScenarioConfig, scenarios=(1, 2, 3, 4, 5, 6)):
    """{replicate index: {scenario: ReplicateData}} with shared draws per replicate."""
    layout = make_layout(cfg)
    out = {}
    for r, seed in enumerate(replicate_seeds(cfg)):
        comp = draw_components(cfg, layout, np.random.default_rng(seed))
        out[r] = {s: compose(replace(cfg, scenario=s), layout, comp) for s in scenarios}
    return out
