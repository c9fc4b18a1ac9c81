"""Adaptive blocked random-walk Metropolis over hyperparameters.

Each block carries its own proposal covariance, tuned with a diminishing
Robbins-Monro recursion (step ``t**-0.6``) on the running mean, covariance and
a global log-scale aimed at acceptance 0.234.  Site effects are refreshed by
an exact Gibbs step after every sweep, and latent draws are taken off-line.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.optimize import minimize

from .model import (
    Evaluation,
    FusionModelSpec,
    HyperState,
    LatentDraws,
    Param,
    evaluate,
    log_delta_prior,
    log_prior,
    orthogonalize,
)


class ChainError(RuntimeError):
    def __init__(self, msg: str, state: dict | None = None):
        self.state = state or {}
        if state:
            msg = msg + " | state: " + ", ".join(f"{k}={v!r}" for k, v in state.items())
        super().__init__(msg)


@dataclass
class ChainConfig:
    burn_in: int = 10_000
    post_burn: int = 25_000
    thin: int = 10
    latent_stride: int = 10
    blocks: list | None = None
    target_accept: float = 0.234
    adapt_exponent: float = 0.6
    adapt_after_burn: bool = True
    init_optimize: bool = True
    seed: int = 0
    sample_fields: bool = True

    def __post_init__(self):
        if self.burn_in < 0 or self.post_burn <= 0:
            raise ValueError("need burn_in >= 0 and post_burn > 0")
        if self.thin < 1 or self.post_burn % self.thin:
            raise ValueError(f"thin={self.thin} must divide post_burn={self.post_burn}")
        if self.latent_stride < 1:
            raise ValueError("latent_stride must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not 0.5 < self.adapt_exponent <= 1:
            raise ValueError("adapt_exponent must lie in (0.5, 1] for diminishing adaptation")


@dataclass
class ChainOutput:
    names: list
    theta: np.ndarray  # (n_keep, n_params) natural scale, fixed columns included
    free: list
    delta: np.ndarray
    log_post: np.ndarray
    latents: list
    acceptance: dict
    ess: dict
    ess_flags: dict
    block_names: dict
    final_proposals: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.theta[:, self.names.index(name)]

    def posterior_mean(self) -> dict:
        return {n: float(self.theta[:, i].mean()) for i, n in enumerate(self.names)}

    def write_traces(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["draw", *self.names, "log_post"])
            for i in range(self.theta.shape[0]):
                w.writerow([i, *(f"{x:.17g}" for x in self.theta[i]), f"{self.log_post[i]:.17g}"])

    def write_delta(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["draw", *(f"delta_{j}" for j in range(self.delta.shape[1]))])
            for i in range(self.delta.shape[0]):
                w.writerow([i, *(f"{x:.17g}" for x in self.delta[i])])


# ---- targets ---------------------------------------------------------------------

class Target(Protocol):
    """What the sampler needs from a posterior."""

    def parameters(self) -> list[Param]: ...

    def fixed_values(self) -> dict: ...

    def initial(self) -> HyperState: ...

    def evaluate(self, state: HyperState): ...  # -> (log density, cache)

    def gibbs(self, state: HyperState, cache, rng) -> tuple: ...  # -> (state, log density)

    def latent(self, state: HyperState, cache, rng) -> LatentDraws | None: ...


class PosteriorTarget:
    """Marginal posterior of (theta, delta) for an assembled model."""

    def __init__(self, spec: FusionModelSpec, sample_fields: bool = True):
        self.spec = spec
        self.sample_fields = sample_fields

    def parameters(self):
        return self.spec.free_parameters()

    def fixed_values(self):
        return self.spec.fixed_values()

    def initial(self):
        return self.spec.default_state()

    def _logpost_at(self, ev: Evaluation, state: HyperState, lp: float) -> float:
        return ev.log_likelihood(state.delta) + log_delta_prior(self.spec, state.values, state.delta) + lp

    def evaluate(self, state):
        lp = log_prior(self.spec, state.values)
        if not math.isfinite(lp):
            return -math.inf, None
        ev = evaluate(self.spec, state.values)
        return self._logpost_at(ev, state, lp), ev

    def gibbs(self, state, cache, rng):
        if self.spec.n_delta == 0:
            return state, None
        new = state.with_delta(cache.sample_delta(rng))
        return new, self._logpost_at(cache, new, log_prior(self.spec, new.values))

    def latent(self, state, cache, rng):
        return cache.sample_latents(state.delta, rng, self.sample_fields)

    def profile(self, state):
        """Log posterior with delta at its conditional mean (for mode finding)."""
        val, ev = self.evaluate(state)
        if ev is None or self.spec.n_delta == 0:
            return val, state
        mean, _ = ev.delta_conditional()
        new = state.with_delta(mean)
        return self._logpost_at(ev, new, log_prior(self.spec, new.values)), new


# ---- transforms ------------------------------------------------------------------------

def _to_free(params, values) -> np.ndarray:
    out = np.empty(len(params))
    for i, p in enumerate(params):
        v = values[p.name]
        out[i] = math.log(v) if p.scale == "log" else v
    return out


def _from_free(params, u) -> dict:
    return {p.name: (math.exp(x) if p.scale == "log" else float(x)) for p, x in zip(params, u)}


def _log_jacobian(params, u) -> float:
    return float(sum(x for p, x in zip(params, u) if p.scale == "log"))


def default_blocks(params) -> list[list[str]]:
    """Variance family, smooth-variance family, and a {beta1, kappa} block."""
    fam = {"variance": [], "smooth": [], "beta_kappa": []}
    for p in params:
        if p.name == "beta1" or p.name.startswith("kappa"):
            fam["beta_kappa"].append(p.name)
        elif p.name.startswith("sigma2_b["):
            fam["smooth"].append(p.name)
        else:
            fam["variance"].append(p.name)
    return [v for v in fam.values() if v]


def _check_blocks(blocks, names):
    flat = [n for b in blocks for n in b]
    if sorted(flat) != sorted(names) or len(set(flat)) != len(flat):
        raise ValueError(f"blocks {blocks} do not partition the free parameters {names}")


class AdaptiveBlock:
    """Running proposal state for one block."""

    def __init__(self, idx, cov0, target_accept, exponent):
        d = len(idx)
        self.idx = np.asarray(idx)
        self.cov = np.array(cov0, dtype=float).reshape(d, d)
        self.mean = None
        self.log_scale = math.log(2.38**2 / d)
        self.target = target_accept
        self.exponent = exponent
        self.t = 0
        self.accepted = 0
        self.tried = 0

    def _chol(self):
        d = self.cov.shape[0]
        jitter = 1e-10 * max(np.trace(self.cov) / d, 1e-300)
        return np.linalg.cholesky(self.cov + jitter * np.eye(d))

    def propose(self, u, rng):
        step = math.exp(0.5 * self.log_scale) * (self._chol() @ rng.standard_normal(self.idx.size))
        out = u.copy()
        out[self.idx] += step
        return out

    def adapt(self, x, alpha):
        self.t += 1
        g = (self.t + 1) ** (-self.exponent)
        self.log_scale += g * (alpha - self.target)
        if self.mean is None:
            self.mean = x.copy()
        dx = x - self.mean
        self.mean = self.mean + g * dx
        self.cov = self.cov + g * (np.outer(dx, dx) - self.cov)
        # keep symmetric and away from degeneracy
        self.cov = 0.5 * (self.cov + self.cov.T)
        floor = 1e-12 * max(np.max(np.diag(self.cov)), 1e-300)
        self.cov[np.diag_indices_from(self.cov)] = np.maximum(np.diag(self.cov), floor)


# ---- mode finding ----------------------------------------------------------------------

def find_mode(target: PosteriorTarget, state: HyperState, maxiter: int = 200):
    """Maximize the (delta-profiled) log posterior on the transformed scale.

    Returns the state at the mode and an approximate covariance for proposals.
    """
    params = target.parameters()
    fixed = target.fixed_values()
    u0 = _to_free(params, state.values)
    best = {"val": -math.inf, "state": state}

    def nlp(u):
        vals = {**state.values, **_from_free(params, u), **fixed}
        st = HyperState(vals, best["state"].delta)
        try:
            val, st = target.profile(st)
        except (np.linalg.LinAlgError, ValueError):
            return 1e100
        if not math.isfinite(val):
            return 1e100
        val += _log_jacobian(params, u)
        if val > best["val"]:
            best["val"], best["state"] = val, st
        return -val

    res = minimize(nlp, u0, method="BFGS", options={"maxiter": maxiter, "gtol": 1e-4})
    d = len(params)
    hinv = np.atleast_2d(np.asarray(res.hess_inv)) if hasattr(res, "hess_inv") else np.eye(d)
    w, v = np.linalg.eigh(0.5 * (hinv + hinv.T))
    w = np.clip(w, 1e-4, 4.0)
    return best["state"], (v * w) @ v.T


# ---- the chain ---------------------------------------------------------------------------

def run_chain(spec_or_target, config: ChainConfig, rng: np.random.Generator | None = None,
              initial: HyperState | None = None) -> ChainOutput:
    """Run burn-in plus sampling; record thinned theta and delta and off-line latents."""
    target = (
        PosteriorTarget(spec_or_target, config.sample_fields)
        if isinstance(spec_or_target, FusionModelSpec) else spec_or_target
    )
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params = target.parameters()
    names_free = [p.name for p in params]
    fixed = target.fixed_values()
    state = target.initial() if initial is None else initial
    state = state.with_values(**fixed)

    cov0 = np.eye(len(params)) * 0.1
    if config.init_optimize and isinstance(target, PosteriorTarget) and params:
        state, cov0 = find_mode(target, state)
    logp, cache = target.evaluate(state)
    if not math.isfinite(logp):
        raise ChainError("initial state has zero posterior density", dict(state.values))

    blocks_spec = config.blocks or default_blocks(params)
    _check_blocks(blocks_spec, names_free)
    blocks = []
    for b in blocks_spec:
        idx = [names_free.index(n) for n in b]
        blocks.append(AdaptiveBlock(idx, cov0[np.ix_(idx, idx)], config.target_accept, config.adapt_exponent))

    all_names = list(state.values.keys())
    total = config.burn_in + config.post_burn
    n_keep = config.post_burn // config.thin
    theta_tr = np.empty((n_keep, len(all_names)))
    delta_tr = np.empty((n_keep, state.delta.size))
    lp_tr = np.empty(n_keep)
    latents = []
    u = _to_free(params, state.values)
    cur = logp + _log_jacobian(params, u)
    keep = 0

    for it in range(total):
        post = it >= config.burn_in
        adapting = (not post) or config.adapt_after_burn
        for blk in blocks:
            prop_u = blk.propose(u, rng)
            prop_state = HyperState({**state.values, **_from_free(params, prop_u)}, state.delta)
            try:
                val, pcache = target.evaluate(prop_state)
            except np.linalg.LinAlgError:
                val, pcache = -math.inf, None
            if math.isnan(val) or val == math.inf:
                raise ChainError(f"non-finite log posterior at iteration {it}", dict(prop_state.values))
            prop = val + _log_jacobian(params, prop_u) if math.isfinite(val) else -math.inf
            log_ratio = prop - cur
            alpha = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
            if rng.uniform() < alpha:
                u, state, cur, cache = prop_u, prop_state, prop, pcache
            if post:
                blk.tried += 1
                blk.accepted += int(u is prop_u)
            if adapting:
                blk.adapt(u[blk.idx], alpha)
        new_state, val = target.gibbs(state, cache, rng)
        if val is not None:
            if not math.isfinite(val):
                raise ChainError(f"non-finite log posterior after delta update at iteration {it}",
                                 dict(new_state.values))
            state, cur = new_state, val + _log_jacobian(params, u)
        if post:
            k = it - config.burn_in + 1
            if k % config.thin == 0:
                theta_tr[keep] = [state.values[n] for n in all_names]
                delta_tr[keep] = state.delta
                lp_tr[keep] = cur
                keep += 1
            if k % config.latent_stride == 0:
                draw = target.latent(state, cache, rng)
                if draw is not None:
                    draw.index = k
                    if getattr(target, "spec", None) is not None and target.spec.flags.orthogonalize:
                        draw = orthogonalize_draw(target.spec, draw)
                    latents.append(draw)

    acc = {"+".join(b): (blk.accepted / blk.tried if blk.tried else float("nan"))
           for b, blk in zip(blocks_spec, blocks)}
    ess, flags = {}, {}
    for i, n in enumerate(all_names):
        if n in names_free:
            ess[n], flags[n] = effective_sample_size(theta_tr[:, i], return_flag=True)
    return ChainOutput(
        names=all_names, theta=theta_tr, free=names_free, delta=delta_tr, log_post=lp_tr,
        latents=latents, acceptance=acc, ess=ess, ess_flags=flags,
        block_names={"+".join(b): list(b) for b in blocks_spec},
        final_proposals={"+".join(b): (blk.log_scale, blk.cov.copy()) for b, blk in zip(blocks_spec, blocks)},
    )


def orthogonalize_draw(spec: FusionModelSpec, draw: LatentDraws) -> LatentDraws:
    """Replace phi by its residual on span{1, L}; L (and predictions) are untouched."""
    if "phi" not in draw.fields:
        return draw
    L = spec.focal_process(draw.b, draw.fields)
    if spec.base_to_phi is not None:
        L = spec.base_to_phi @ L
    out = orthogonalize(draw.fields["phi"], L)
    fields = dict(draw.fields)
    fields["phi"] = out.phi
    fields["phi_removed"] = out.removed
    return LatentDraws(draw.b, fields, draw.index, dict(draw.values))


# ---- convergence summaries ---------------------------------------------------------------

def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    f = np.fft.rfft(xc, n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    return ac / n


def effective_sample_size(trace, return_flag: bool = False):
    """Geyer's initial monotone sequence estimator.

    A (numerically) constant trace gives 0 with the flag ``"constant"``.
    """
    x = np.asarray(trace, dtype=float)
    if x.ndim == 2:
        res = [effective_sample_size(x[:, j], True) for j in range(x.shape[1])]
        vals = np.array([r[0] for r in res])
        return (vals, [r[1] for r in res]) if return_flag else vals
    n = x.size
    if n < 4:
        raise ValueError("trace too short for an ESS estimate")
    scale = max(np.abs(x).max(), 1e-300)
    if np.ptp(x) <= 1e-12 * scale:
        return (0.0, "constant") if return_flag else 0.0
    gamma = _autocov(x)
    # pair sums Gamma_k = gamma_{2k} + gamma_{2k+1}; keep the initial positive, monotone run
    m = (n - 1) // 2
    pairs = gamma[0 : 2 * m : 2] + gamma[1 : 2 * m : 2]
    pos = np.flatnonzero(pairs <= 0)
    stop = pos[0] if pos.size else pairs.size
    pairs = np.minimum.accumulate(pairs[:stop])
    tau = (-gamma[0] + 2 * pairs.sum()) / gamma[0]
    ess = float(n / max(tau, 1.0 / n))
    ess = min(ess, n * math.log10(n))  # guard against antithetic blow-up
    return (ess, "") if return_flag else ess


def mcse(trace) -> float:
    x = np.asarray(trace, dtype=float)
    ess = effective_sample_size(x)
    return float(np.std(x, ddof=1) / math.sqrt(ess)) if ess > 0 else float("nan")


class GaussianTarget:
    """Standalone N(mu, sd^2) target in one natural-scale coordinate (for checking the sampler)."""

    def __init__(self, mu: float = 0.0, sd: float = 1.0, name: str = "x"):
        self.mu, self.sd, self.name = mu, sd, name

    def parameters(self):
        return [Param(self.name, "linear")]

    def fixed_values(self):
        return {}

    def initial(self):
        return HyperState({self.name: self.mu + 3 * self.sd}, np.zeros(0))

    def evaluate(self, state):
        z = (state[self.name] - self.mu) / self.sd
        return -0.5 * z * z, None

    def gibbs(self, state, cache, rng):
        return state, None

    def latent(self, state, cache, rng):
        return None
