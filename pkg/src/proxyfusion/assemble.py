"""Build model specifications from tabular data.

Tables
------
observations : site_id, x, y, value, n_i, n_month, optional ``colocated``,
               plus any observation-level covariate columns
proxy        : cell, value, optional ``count`` (retrievals, AOD mode)
cells        : one row per base cell in row-major order, covariate columns
land         : one ``land`` column of 0/1 flags
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .grid import RegularGrid, point_to_cell, read_land_mask, selection_matrix, write_land_mask
from .model import FusionModelSpec, LatentField, ModelError, ObservationDesign, Priors, VariantFlags
from .mrf import tps_precision
from .splines import cubic_rbf_basis, knots_quantile, space_filling_knots, tps2d_basis

VARIANTS = ("full", "no_proxy", "no_discrepancy", "large_scale", "fix_beta1", "proxy_covariate")
TRANSFORMS = ("identity", "log", "sqrt")


class DataError(ValueError):
    """Input tables are missing, malformed or inconsistent with the grid."""


@dataclass(frozen=True)
class Term:
    """One covariate: a table column, optional clipping and transform, linear or smooth."""

    column: str
    transform: str = "identity"
    lower: float | None = None
    upper: float | None = None
    smooth: bool = False
    knots: int = 5

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"term {self.column}: transform must be one of {TRANSFORMS}")

    @classmethod
    def parse(cls, item) -> "Term":
        if isinstance(item, Term):
            return item
        if isinstance(item, str):
            return cls(item)
        if isinstance(item, dict):
            unknown = set(item) - {"column", "transform", "lower", "upper", "smooth", "knots"}
            if unknown or "column" not in item:
                raise ValueError(f"bad covariate term {item!r}")
            return cls(**item)
        raise ValueError(f"bad covariate term {item!r}")

    def values(self, frame: pd.DataFrame) -> np.ndarray:
        if self.column not in frame:
            raise DataError(f"covariate column {self.column!r} not found")
        x = frame[self.column].to_numpy(dtype=float)
        if not np.all(np.isfinite(x)):
            raise DataError(f"covariate column {self.column!r} has missing or non-finite values")
        if self.lower is not None or self.upper is not None:
            x = np.clip(x, self.lower, self.upper)
        if self.transform == "log":
            if np.any(x <= 0):
                raise DataError(f"log transform of nonpositive values in {self.column!r}")
            x = np.log(x)
        elif self.transform == "sqrt":
            if np.any(x < 0):
                raise DataError(f"sqrt transform of negative values in {self.column!r}")
            x = np.sqrt(x)
        return x


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    orthogonalize: bool = False
    proxy_kind: str = "cmaq"
    proxy_land_only: bool = True
    cell_terms: tuple = ()
    obs_terms: tuple = ()
    spatial_knots: int = 30
    joint_coarsen: int | None = None  # g as a TPS-MRF on a grid coarser by this factor
    large_scale_kappa: float = 1000.0
    fixed: dict = field(default_factory=lambda: {"sigma2_eps": 1.5})
    priors: Priors = Priors()
    knot_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "cell_terms", tuple(Term.parse(t) for t in self.cell_terms))
        object.__setattr__(self, "obs_terms", tuple(Term.parse(t) for t in self.obs_terms))
        if self.orthogonalize and self.variant in ("no_proxy", "proxy_covariate", "no_discrepancy"):
            raise ValueError(f"orthogonalize needs a discrepancy field, not variant {self.variant!r}")
        if self.joint_coarsen is not None and self.joint_coarsen < 1:
            raise ValueError("joint_coarsen must be a positive integer")

    @property
    def uses_proxy_likelihood(self) -> bool:
        return self.variant not in ("no_proxy", "proxy_covariate")


# ---- tables ------------------------------------------------------------------------------

@dataclass
class FusionData:
    grid: RegularGrid
    observations: pd.DataFrame
    cells: pd.DataFrame
    proxy: pd.DataFrame | None = None


def _require(frame, cols, what):
    missing = [c for c in cols if c not in frame]
    if missing:
        raise DataError(f"{what} table is missing columns {missing}")


def read_tables(grid: RegularGrid, observations, cells, proxy=None, land=None) -> FusionData:
    try:
        obs = pd.read_csv(observations)
        cell = pd.read_csv(cells)
        prox = None if proxy is None else pd.read_csv(proxy)
        mask = None if land is None else read_land_mask(land, grid)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if mask is not None:
        grid = grid.with_land_mask(mask)
    data = FusionData(grid, obs, cell, prox)
    validate(data)
    return data


def validate(data: FusionData) -> None:
    _require(data.observations, ["site_id", "x", "y", "value", "n_i"], "observations")
    if len(data.cells) != data.grid.size:
        raise DataError(f"cells table has {len(data.cells)} rows, grid has {data.grid.size} cells")
    if not np.all(np.isfinite(data.observations["value"].to_numpy(dtype=float))):
        raise DataError("observation values must be finite")
    if data.proxy is not None:
        _require(data.proxy, ["cell", "value"], "proxy")
        c = data.proxy["cell"].to_numpy()
        if np.any(c < 0) or np.any(c >= data.grid.size):
            raise DataError("proxy cell ids outside the grid")
        if np.unique(c).size != c.size:
            raise DataError("proxy table has duplicate cell ids")


def write_tables(data: FusionData, outdir) -> dict:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "observations": out / "observations.csv",
        "cells": out / "cells.csv",
        "land": out / "land.csv",
    }
    data.observations.to_csv(paths["observations"], index=False, float_format="%.17g")
    data.cells.to_csv(paths["cells"], index=False, float_format="%.17g")
    write_land_mask(paths["land"], data.grid.land_mask)
    if data.proxy is not None:
        paths["proxy"] = out / "proxy.csv"
        data.proxy.to_csv(paths["proxy"], index=False, float_format="%.17g")
    return {k: str(v) for k, v in paths.items()}


def replicate_tables(rep) -> FusionData:
    """Tables for one simulated replicate; the proxy covers every cell."""
    n = rep.Y.size
    obs = pd.DataFrame({
        "site_id": np.arange(n),
        "x": rep.site_xy[:, 0],
        "y": rep.site_xy[:, 1],
        "value": rep.Y,
        "n_i": np.ones(n),
        "n_month": np.ones(n),
        **rep.obs_covariates,
    })
    cells = pd.DataFrame(rep.cell_covariates)
    proxy = pd.DataFrame({"cell": np.arange(rep.grid.size), "value": rep.A})
    return FusionData(rep.grid, obs, cells, proxy)


# ---- design --------------------------------------------------------------------------------

@dataclass
class _Design:
    cols: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    names: list = field(default_factory=list)

    def add(self, block, group, name):
        block = np.atleast_2d(np.asarray(block, dtype=float).T).T
        self.cols.append(block)
        self.groups += [group] * block.shape[1]
        self.names += [name] * block.shape[1]

    def matrix(self, n):
        return np.hstack(self.cols) if self.cols else np.zeros((n, 0))


def _standardize(x, ref):
    sd = ref.std()
    if sd <= 0:
        raise DataError("covariate is constant over the fitting cells")
    return (x - ref.mean()) / sd


def _add_terms(design, terms, frame, ref_rows, smooth_names, prefix):
    """Append covariate blocks; returns a function rebuilding the same columns for a new frame."""
    makers = []
    for t in terms:
        raw = t.values(frame)
        ref = raw[ref_rows]
        mu, sd = ref.mean(), ref.std()
        if sd <= 0:
            raise DataError(f"covariate {t.column!r} is constant over the fitting rows")
        x = (raw - mu) / sd
        if not t.smooth:
            design.add(x, -1, t.column)
            makers.append(lambda f, t=t, mu=mu, sd=sd: ((t.values(f) - mu) / sd)[:, None])
            continue
        basis = cubic_rbf_basis(x, knots_quantile(x[ref_rows], t.knots), name=t.column)
        design.add(basis.design[:, 1:2], -1, t.column)
        smooth_names.append(f"{prefix}:{t.column}")
        design.add(basis.design[:, basis.penalized_cols], len(smooth_names) - 1, t.column)
        makers.append(lambda f, t=t, mu=mu, sd=sd, basis=basis: basis.evaluate((t.values(f) - mu) / sd)[:, 1:])

    def rebuild(f):
        n = len(f)
        return np.hstack([m(f) for m in makers]) if makers else np.zeros((n, 0))

    return rebuild


def colocation_index(site_ids, flags=None) -> np.ndarray:
    """delta index per observation: sites holding several monitors share one effect."""
    ids = np.asarray(site_ids)
    uniq, inv, counts = np.unique(ids, return_inverse=True, return_counts=True)
    shared = counts[inv] > 1
    if flags is not None:
        flags = np.asarray(flags, dtype=bool)
        for s in np.unique(ids[flags != shared]):
            raise DataError(f"site {s}: colocated flag disagrees with the number of monitors at the site")
    out = np.full(ids.size, -1)
    sites = np.unique(ids[shared])
    lookup = {s: k for k, s in enumerate(sites)}
    for i in np.flatnonzero(shared):
        out[i] = lookup[ids[i]]
    return out


@dataclass
class Assembled:
    spec: FusionModelSpec
    coef_names: list
    obs_cells: np.ndarray
    site_ids: np.ndarray
    obs_builder: object = None

    def point_design(self, grid: RegularGrid, frame: pd.DataFrame) -> ObservationDesign:
        """Design for new point locations (x, y and the observation covariates)."""
        _require(frame, ["x", "y"], "prediction points")
        try:
            P = point_to_cell(grid, frame[["x", "y"]].to_numpy(dtype=float)).matrix
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        n = len(frame)
        n_i = frame["n_i"].to_numpy(dtype=float) if "n_i" in frame else np.ones(n)
        n_month = frame["n_month"].to_numpy(dtype=float) if "n_month" in frame else n_i.copy()
        maps = {f.name: sp.csr_matrix(P @ self.spec.g_to_base) for f in self.spec.fields
                if f.name == "g" and self.spec.g_to_base is not None}
        return ObservationDesign(self.obs_builder(frame), sp.csr_matrix(P), maps, n_i, n_month)


def build_spec(data: FusionData, cfg: ModelConfig) -> Assembled:
    grid = data.grid
    land = grid.land_mask
    obs = data.observations
    xy = obs[["x", "y"]].to_numpy(dtype=float)
    try:
        P_Y = point_to_cell(grid, xy).matrix
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    obs_cells = P_Y.indices.copy()
    n_i = obs["n_i"].to_numpy(dtype=float)
    n_month = obs["n_month"].to_numpy(dtype=float) if "n_month" in obs else n_i.copy()
    coloc = colocation_index(obs["site_id"].to_numpy(), obs["colocated"] if "colocated" in obs else None)

    has_proxy_table = data.proxy is not None
    if cfg.variant != "no_proxy" and not has_proxy_table:
        raise DataError(f"variant {cfg.variant!r} needs a proxy table")

    smooth_names: list[str] = []
    # observation-level design: no intercept, L carries it
    zy = _Design()
    obs_builder = _add_terms(zy, cfg.obs_terms, obs, np.arange(len(obs)), smooth_names, "y")

    zl = _Design()
    joint = cfg.joint_coarsen is not None
    if not joint:
        zl.add(np.ones(grid.size), -1, "intercept")
    _add_terms(zl, cfg.cell_terms, data.cells, land, smooth_names, "L")
    if cfg.variant == "proxy_covariate":
        a = np.full(grid.size, np.nan)
        a[data.proxy["cell"].to_numpy()] = data.proxy["value"].to_numpy(dtype=float)
        if np.any(np.isnan(a[land])):
            raise DataError("proxy as covariate needs a proxy value on every land cell")
        a = np.where(np.isnan(a), np.nanmean(a[land]), a)
        zl.add(_standardize(a, a[land]), -1, "proxy")
    if not joint and cfg.spatial_knots > 0:
        cent = grid.centroids()
        scale = max(grid.extent[1] - grid.extent[0], grid.extent[3] - grid.extent[2])
        u = (cent - cent[land].mean(axis=0)) / scale
        knots = space_filling_knots(u[land], cfg.spatial_knots, np.random.default_rng(cfg.knot_seed))
        tps = tps2d_basis(u, knots, name="spatial")
        zl.add(tps.design[:, 1:3], -1, "spatial")
        smooth_names.append("L:spatial")
        zl.add(tps.design[:, tps.penalized_cols], len(smooth_names) - 1, "spatial")
    Z_L = zl.matrix(grid.size)

    A = P_A = Z_a = None
    proxy_n = proxy_n_month = None
    fields = []
    za = _Design()
    if cfg.uses_proxy_likelihood:
        prox = data.proxy
        cells = prox["cell"].to_numpy(dtype=int)
        keep = land[cells] if cfg.proxy_land_only else np.ones(cells.size, dtype=bool)
        order = np.argsort(cells[keep], kind="stable")
        cells = cells[keep][order]
        A = prox["value"].to_numpy(dtype=float)[keep][order]
        if not np.all(np.isfinite(A)):
            raise DataError("proxy values must be finite")
        P_A = selection_matrix(cells, grid.size)
        if cfg.proxy_kind == "aod":
            if "count" not in prox:
                raise DataError("AOD proxy needs a count column")
            proxy_n = prox["count"].to_numpy(dtype=float)[keep][order]
            proxy_n_month = (prox["n_month"].to_numpy(dtype=float)[keep][order] if "n_month" in prox
                             else np.full(cells.size, float(proxy_n.max())))
        if cfg.variant == "no_discrepancy":
            # without phi the proxy needs its own intercept
            za.add(np.ones(A.size), -1, "proxy_intercept")
        else:
            fields.append(LatentField("phi", tps_precision(grid), "kappa", None, P_A, False))
    g_to_base = None
    if joint:
        k = cfg.joint_coarsen
        coarse = RegularGrid(-(-grid.nrow // k), -(-grid.ncol // k), grid.cell_size * k, grid.origin)
        g_to_base = point_to_cell(coarse, grid.centroids()).matrix
        fields.insert(0, LatentField("g", tps_precision(coarse), "kappa_g", sp.csr_matrix(P_Y @ g_to_base),
                                     None if P_A is None else sp.csr_matrix(P_A @ g_to_base), True))
    if za.cols:
        Z_a = za.matrix(A.size)

    mode = {"no_proxy": "no_proxy", "proxy_covariate": "proxy_as_covariate"}.get(cfg.variant, "two_likelihood")
    flags = VariantFlags(
        mode=mode,
        include_discrepancy=cfg.variant != "no_discrepancy",
        fix_kappa=cfg.large_scale_kappa if cfg.variant == "large_scale" else None,
        fix_beta1=1.0 if cfg.variant == "fix_beta1" else None,
        orthogonalize=cfg.orthogonalize,
    )
    groups = np.array(zy.groups + zl.groups + za.groups, dtype=int)
    try:
        spec = FusionModelSpec(
            y=obs["value"].to_numpy(dtype=float),
            Z_y=zy.matrix(len(obs)),
            Z_L=Z_L,
            P_Y=P_Y,
            groups=groups,
            smooth_names=tuple(smooth_names),
            n_i=n_i,
            n_month=n_month,
            colocated_site=coloc,
            A=A,
            P_A=P_A,
            Z_a=Z_a,
            fields=tuple(fields),
            proxy_kind=cfg.proxy_kind,
            proxy_n=proxy_n,
            proxy_n_month=proxy_n_month,
            flags=flags,
            priors=cfg.priors,
            fixed=dict(cfg.fixed),
            g_to_base=g_to_base,
        )
    except ModelError as exc:
        raise DataError(str(exc)) from exc
    names = [f"y:{n}" for n in zy.names] + [f"L:{n}" for n in zl.names] + [f"a:{n}" for n in za.names]
    return Assembled(spec, names, obs_cells, obs["site_id"].to_numpy(), obs_builder)


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    return replace(base, variant=variant, orthogonalize=base.orthogonalize and variant in ("full", "large_scale", "fix_beta1"))


def simulation_model_config(**kw) -> ModelConfig:
    """Fitting covariates for simulated data: deliberately mismatched with the generating ones."""
    base = dict(
        cell_terms=("log_pop", "elev500", "road3", "log_emis"),
        obs_terms=("d1", "d2"),
        spatial_knots=30,
    )
    base.update(kw)
    return ModelConfig(**base)
