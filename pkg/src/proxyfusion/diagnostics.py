"""Variograms, the discrepancy-scale curve M(d), prediction scores and site-level CV."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import RegularGrid
from .model import FusionModelSpec, ObservationDesign, split_observations

Z90 = 1.6448536269514722


class DiagnosticWarning(UserWarning):
    pass


# ---- pairs and variograms -------------------------------------------------------------

def default_bins(grid: RegularGrid) -> np.ndarray:
    """Unit-lag bins (in cell units, centred on integers) up to half the grid diagonal."""
    half_diag = 0.5 * math.hypot(grid.nrow, grid.ncol)
    top = max(1, int(math.floor(half_diag)))
    return (np.arange(0.5, top + 1.0, 1.0)) * grid.cell_size


@dataclass(frozen=True)
class PairSet:
    """Cell pairs (i < j) grouped into distance bins, shared across fields."""

    i: np.ndarray
    j: np.ndarray
    bin: np.ndarray
    edges: np.ndarray
    exact: bool

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1


def _offsets(grid, max_dist):
    """Half-plane of (dr, dc) offsets with 0 < distance < max_dist."""
    h = grid.cell_size
    rmax = min(int(math.floor(max_dist / h)), max(grid.nrow, grid.ncol))
    for dr in range(0, min(rmax, grid.nrow - 1) + 1):
        for dc in range(-min(rmax, grid.ncol - 1), min(rmax, grid.ncol - 1) + 1):
            if dr == 0 and dc <= 0:
                continue
            d = h * math.hypot(dr, dc)
            if d < max_dist:
                yield dr, dc, d


def _shifted(arr2d, dr, dc):
    """Aligned views of cells (r, c) and (r + dr, c + dc)."""
    rows, cols = arr2d.shape
    c0, c1 = max(0, -dc), min(cols, cols - dc)
    return arr2d[: rows - dr, c0:c1], arr2d[dr:, c0 + dc : c1 + dc]


def _offset_pairs(grid, valid, max_dist):
    idx = np.arange(grid.size).reshape(grid.shape)
    I, J, D = [], [], []
    for dr, dc, d in _offsets(grid, max_dist):
        a, b = (x.ravel() for x in _shifted(idx, dr, dc))
        keep = valid[a] & valid[b]
        I.append(a[keep])
        J.append(b[keep])
        D.append(np.full(int(keep.sum()), d))
    if not I:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    return np.concatenate(I), np.concatenate(J), np.concatenate(D)


def _count_offset_pairs(grid, valid, max_dist):
    v = valid.reshape(grid.shape).astype(np.int64)
    return sum(int((a * b).sum()) for a, b in (_shifted(v, dr, dc) for dr, dc, _ in _offsets(grid, max_dist)))


def build_pairs(grid: RegularGrid, mask=None, edges=None, pair_budget: int = 1_000_000,
                rng: np.random.Generator | None = None) -> PairSet:
    """All pairs within the largest bin edge, or a uniform random subsample above the budget."""
    valid = np.ones(grid.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    if valid.sum() < 2:
        raise ValueError("variogram needs at least two unmasked cells")
    edges = default_bins(grid) if edges is None else np.asarray(edges, dtype=float)
    max_dist = float(edges[-1])
    if _count_offset_pairs(grid, valid, max_dist) <= pair_budget:
        i, j, d = _offset_pairs(grid, valid, max_dist)
        exact = True
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        cells = np.flatnonzero(valid)
        xy = grid.centroids()
        i_list, j_list, d_list, got = [], [], [], 0
        # draw pairs uniformly among all distinct valid pairs, keep those in range
        while got < pair_budget:
            a = rng.choice(cells, size=pair_budget)
            b = rng.choice(cells, size=pair_budget)
            ok = a != b
            a, b = np.minimum(a[ok], b[ok]), np.maximum(a[ok], b[ok])
            dist = np.hypot(*(xy[a] - xy[b]).T)
            inr = dist < max_dist
            need = pair_budget - got
            i_list.append(a[inr][:need])
            j_list.append(b[inr][:need])
            d_list.append(dist[inr][:need])
            got += min(need, int(inr.sum()))
        i, j, d = (np.concatenate(x) for x in (i_list, j_list, d_list))
        exact = False
    bins = np.searchsorted(edges, d, side="right") - 1
    keep = (bins >= 0) & (bins < edges.size - 1)
    return PairSet(i[keep], j[keep], bins[keep], edges, exact)


@dataclass
class Variogram:
    edges: np.ndarray
    centers: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    se: np.ndarray

    def reported(self):
        """Bins with at least one pair."""
        ok = self.counts > 0
        return self.centers[ok], self.gamma[ok], self.counts[ok]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "semivariance", "count"])
            for c, g, n in zip(*self.reported()):
                w.writerow([f"{c:.17g}", f"{g:.17g}", int(n)])


def variogram_from_pairs(values, pairs: PairSet) -> Variogram:
    f = np.asarray(values, dtype=float).ravel()
    half_sq = 0.5 * (f[pairs.i] - f[pairs.j]) ** 2
    nb = pairs.n_bins
    counts = np.bincount(pairs.bin, minlength=nb).astype(float)
    s1 = np.bincount(pairs.bin, weights=half_sq, minlength=nb)
    s2 = np.bincount(pairs.bin, weights=half_sq**2, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, s1 / counts, np.nan)
        var = np.where(counts > 1, (s2 - counts * gamma**2) / (counts - 1), np.nan)
        se = np.sqrt(np.maximum(var, 0.0) / counts)
    centers = 0.5 * (pairs.edges[:-1] + pairs.edges[1:])
    return Variogram(pairs.edges, centers, gamma, counts.astype(int), se)


def empirical_variogram(field, grid: RegularGrid, mask=None, edges=None, pair_budget: int = 1_000_000,
                        rng: np.random.Generator | None = None) -> Variogram:
    """Classical estimator: half the mean squared difference per distance bin."""
    return variogram_from_pairs(field, build_pairs(grid, mask, edges, pair_budget, rng))


# ---- M(d) ----------------------------------------------------------------------------

@dataclass
class DiagnosticCurve:
    centers: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    draws: np.ndarray  # (n_draws, n_bins), NaN where a denominator vanished

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "M", "count"])
            for c, v, n in zip(self.centers, self.values, self.counts):
                w.writerow([f"{c:.17g}", f"{v:.17g}", int(n)])


def _semivariances(F: np.ndarray, pairs: PairSet, chunk: int = 200_000) -> np.ndarray:
    """Bin semivariances for each row of F (n_draws, n_cells)."""
    nb = pairs.n_bins
    counts = np.bincount(pairs.bin, minlength=nb).astype(float)
    out = np.zeros((F.shape[0], nb))
    for s in range(0, pairs.i.size, chunk):
        i, j, b = pairs.i[s : s + chunk], pairs.j[s : s + chunk], pairs.bin[s : s + chunk]
        onehot = sp.csr_matrix((np.ones(b.size), (np.arange(b.size), b)), shape=(b.size, nb))
        sq = 0.5 * (F[:, i] - F[:, j]) ** 2
        out += np.asarray((onehot.T @ sq.T).T)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, out / counts, np.nan)


def discrepancy_diagnostic(phi_draws, L_draws, beta1_draws, pairs: PairSet) -> DiagnosticCurve:
    """M(d) = V(phi) / (V(phi + beta1 L) + V(beta1 L)) per draw; pointwise mean over draws."""
    phi = np.atleast_2d(np.asarray(phi_draws, dtype=float))
    L = np.atleast_2d(np.asarray(L_draws, dtype=float))
    b1 = np.asarray(beta1_draws, dtype=float).reshape(-1, 1)
    if not (phi.shape == L.shape and b1.shape[0] == phi.shape[0]):
        raise ValueError("phi, L and beta1 draws must have matching draw counts and grids")
    bl = b1 * L
    v_phi = _semivariances(phi, pairs)
    v_a = _semivariances(phi + bl, pairs)
    v_l = _semivariances(bl, pairs)
    denom = v_a + v_l
    with np.errstate(invalid="ignore", divide="ignore"):
        M = np.where(denom > 0, v_phi / denom, np.nan)
    ok = np.any(np.isfinite(M), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(M[:, ok], axis=0)
    centers = 0.5 * (pairs.edges[:-1] + pairs.edges[1:])
    counts = np.bincount(pairs.bin, minlength=pairs.n_bins)
    return DiagnosticCurve(centers[ok], mean, counts[ok], M[:, ok])


# ---- prediction scores ----------------------------------------------------------------------

def mspe(predicted, truth, mask=None) -> float:
    p = np.asarray(predicted, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.shape != t.shape:
        raise ValueError("predicted and truth must align")
    m = np.ones(p.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    if not m.any():
        raise ValueError("empty mask")
    return float(np.mean((p[m] - t[m]) ** 2))


@dataclass
class PredictiveSummary:
    mean: np.ndarray
    sd: np.ndarray

    @property
    def lower(self):
        return self.mean - Z90 * self.sd

    @property
    def upper(self):
        return self.mean + Z90 * self.sd


def summarize_draws(mean_draws, noise_var=None) -> PredictiveSummary:
    """Predictive mean and sd: spread of the draw means plus average noise variance."""
    D = np.atleast_2d(np.asarray(mean_draws, dtype=float))
    var = D.var(axis=0, ddof=1) if D.shape[0] > 1 else np.zeros(D.shape[1])
    if noise_var is not None:
        var = var + np.atleast_2d(noise_var).mean(axis=0)
    return PredictiveSummary(D.mean(axis=0), np.sqrt(var))


def score(pred_mean, observed, pred_sd=None) -> dict:
    """R^2 (squared correlation; 0 for constant predictions), RMSPE and 90% coverage."""
    p = np.asarray(pred_mean, dtype=float)
    y = np.asarray(observed, dtype=float)
    if np.ptp(p) <= 1e-12 * max(1.0, np.abs(p).max()) or np.ptp(y) == 0:
        r2 = 0.0
    else:
        r2 = float(np.corrcoef(p, y)[0, 1] ** 2)
    out = {"r2": r2, "rmspe": float(np.sqrt(np.mean((p - y) ** 2))), "n": int(y.size)}
    if pred_sd is not None:
        sd = np.asarray(pred_sd, dtype=float)
        out["coverage90"] = float(np.mean(np.abs(y - p) <= Z90 * sd))
    return out


def predict_observations(spec: FusionModelSpec, latents, design: ObservationDesign) -> PredictiveSummary:
    """Posterior predictive of Z_y b_y + P_Y L at new sites, new-site effect included."""
    means, noise = [], []
    for d in latents:
        b_y, b_L, _ = spec.split_b(d.b)
        m = design.Z_y @ b_y + design.P_Y @ (spec.Z_L @ b_L)
        for name, M in design.field_maps.items():
            if name in d.fields:
                m = m + M @ d.fields[name]
        th = d.values
        k = 1.0 / design.n_i - 1.0 / design.n_month
        means.append(m)
        noise.append(th["sigma2_eps"] / design.n_i + k * th.get("sigma2_sub", 0.0) + th["sigma2_h"])
    return summarize_draws(np.array(means), np.array(noise))


def predict_field(spec: FusionModelSpec, latents) -> PredictiveSummary:
    """Posterior mean and sd of the focal process L on base cells."""
    draws = np.array([spec.focal_process(d.b, d.fields) for d in latents])
    return summarize_draws(draws)


# ---- cross-validation ------------------------------------------------------------------------

def site_folds(site_ids, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Assign whole sites to k folds; folds with fewer than 2 sites join a neighbour."""
    if k < 2:
        raise ValueError("need at least two folds")
    order = rng.permutation(np.unique(site_ids))
    groups = [list(g) for g in np.array_split(order, k)]
    while len(groups) > 1 and min(len(g) for g in groups) < 2:
        i = min(range(len(groups)), key=lambda j: len(groups[j]))
        warnings.warn(f"fold with {len(groups[i])} site(s) merged into a neighbouring fold",
                      DiagnosticWarning, stacklevel=2)
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < len(groups)]
        target = min(nbrs, key=lambda j: len(groups[j]))
        groups[target].extend(groups.pop(i))
    if len(groups) < 2:
        raise ValueError("fewer than two usable folds after merging small ones")
    return [np.asarray(g) for g in groups]


def cross_validate(spec: FusionModelSpec, site_ids, folds: int, fit, rng: np.random.Generator) -> dict:
    """Refit per fold with whole sites held out and score predictions of them.

    ``fit(train_spec) -> latent draws`` runs the sampler; returns per-fold and
    pooled R^2, RMSPE and 90% coverage.
    """
    site_ids = np.asarray(site_ids)
    groups = site_folds(site_ids, folds, rng)
    per_fold, pm, psd, pobs = [], [], [], []
    for g in groups:
        test = np.isin(site_ids, g)
        train_spec, design = split_observations(spec, test)
        pred = predict_observations(train_spec, fit(train_spec), design)
        obs = spec.y[test]
        per_fold.append(score(pred.mean, obs, pred.sd))
        pm.append(pred.mean)
        psd.append(pred.sd)
        pobs.append(obs)
    pooled = score(np.concatenate(pm), np.concatenate(pobs), np.concatenate(psd))
    return {"folds": per_fold, "pooled": pooled, "assignment": groups,
            "predictions": (np.concatenate(pm), np.concatenate(psd), np.concatenate(pobs))}
