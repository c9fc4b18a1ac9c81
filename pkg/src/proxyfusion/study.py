"""Simulation study: every scenario crossed with every model variant, scored by land-cell MSPE."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .assemble import VARIANTS, ModelConfig, build_spec, replicate_tables, simulation_model_config, variant_config
from .diagnostics import mspe
from .mcmc import ChainConfig, ChainError, run_chain
from .model import ModelError
from .sim import ScenarioConfig, generate_study

log = logging.getLogger(__name__)

# combinations left out because they add little (scenario 6 only probes sample size)
NOT_RUN = {(6, "no_discrepancy"), (6, "large_scale"), (6, "fix_beta1")}

# (label, variant, reference variant): differences are variant minus reference, paired by replicate
COMPARISONS = (
    ("full - no_proxy", "full", "no_proxy"),
    ("no_discrepancy - full", "no_discrepancy", "full"),
    ("large_scale - full", "large_scale", "full"),
    ("fix_beta1 - full", "fix_beta1", "full"),
    ("proxy_covariate - no_proxy", "proxy_covariate", "no_proxy"),
)


@dataclass(frozen=True)
class StudyConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    scenarios: tuple = (1, 2, 3, 4, 5, 6)
    variants: tuple = VARIANTS
    chain: ChainConfig = ChainConfig(burn_in=2000, post_burn=3000, thin=10, latent_stride=10, sample_fields=False)
    model: ModelConfig = field(default_factory=simulation_model_config)
    workers: int = 1
    scale_fixed_kappa: bool = True  # rescale the large-scale variant's kappa to the grid spacing
    only: tuple | None = None  # explicit (scenario, variant) cells; overrides the full crossing

    def __post_init__(self):
        bad = [v for v in self.variants if v not in VARIANTS]
        if self.only is not None:
            bad += [v for s, v in self.only if v not in VARIANTS or s not in self.scenarios]
        if bad:
            raise ValueError(f"unknown variants or scenarios {bad}")

    def jobs(self):
        """(scenario, variant) cells to fit; no-proxy fits for scenarios 1-5 collapse to one."""
        if self.only is not None:
            return [tuple(j) for j in self.only]
        out = []
        for s in self.scenarios:
            for v in self.variants:
                if (s, v) in NOT_RUN:
                    continue
                if v == "no_proxy" and s in (2, 3, 4, 5) and 1 in self.scenarios:
                    continue
                out.append((s, v))
        return out


@dataclass
class FitResult:
    replicate: int
    scenario: int
    variant: str
    mspe: float = np.nan
    beta1: float = np.nan
    status: str = "ok"
    L_mean: np.ndarray | None = None


def _job_seed(seed: int, r: int, s: int, v: str) -> int:
    ss = np.random.SeedSequence([seed, r, s, VARIANTS.index(v)])
    return int(ss.generate_state(1)[0])


def fit_replicate(rep, model_cfg: ModelConfig, chain_cfg: ChainConfig, seed: int):
    """Posterior mean of L on all cells, the chain output and the assembled spec."""
    assembled = build_spec(replicate_tables(rep), model_cfg)
    spec = assembled.spec
    out = run_chain(spec, replace(chain_cfg, seed=seed))
    L = np.mean([spec.focal_process(d.b, d.fields) for d in out.latents], axis=0)
    return L, out, spec


def job_model(cfg: StudyConfig, variant: str) -> ModelConfig:
    model = variant_config(cfg.model, variant)
    if cfg.scale_fixed_kappa:
        model = replace(model, large_scale_kappa=model.large_scale_kappa * cfg.scenario.kappa_scale)
    return model


def _run_job(args):
    r, s, v, rep, cfg = args
    res = FitResult(r, s, v)
    try:
        L, out, _ = fit_replicate(rep, job_model(cfg, v), cfg.chain, _job_seed(cfg.scenario.seed, r, s, v))
    except (ChainError, ModelError, np.linalg.LinAlgError, FloatingPointError) as exc:
        res.status = f"failed: {type(exc).__name__}: {str(exc).splitlines()[0]}"
        log.warning("replicate %d scenario %d %s %s", r, s, v, res.status)
        return res
    res.L_mean = L
    res.mspe = mspe(L, rep.L, rep.land)
    if "beta1" in out.names:
        res.beta1 = float(np.mean(out.column("beta1")))
    return res


@dataclass
class StudyResult:
    fits: list

    def records(self) -> pd.DataFrame:
        rows = [dict(replicate=f.replicate, scenario=f.scenario, variant=f.variant, mspe=f.mspe,
                     beta1=f.beta1, status=f.status) for f in self.fits]
        return pd.DataFrame(rows).sort_values(["scenario", "variant", "replicate"], kind="stable")

    def _ok(self):
        rec = self.records()
        return rec[rec.status == "ok"]

    def mspe_matrix(self, scenario: int, variant: str) -> pd.Series:
        rec = self._ok()
        sel = rec[(rec.scenario == scenario) & (rec.variant == variant)]
        return sel.set_index("replicate")["mspe"]

    def table(self) -> pd.DataFrame:
        """Mean MSPE and its standard error, variants by scenarios."""
        rec = self.records()
        rows = []
        for v in dict.fromkeys(rec.variant):
            row = {"variant": v}
            for s in sorted(set(rec.scenario)):
                sel = rec[(rec.scenario == s) & (rec.variant == v)]
                ok = sel[sel.status == "ok"].mspe.to_numpy()
                row[f"s{s}_mean"] = ok.mean() if ok.size else np.nan
                row[f"s{s}_se"] = ok.std(ddof=1) / np.sqrt(ok.size) if ok.size > 1 else np.nan
                row[f"s{s}_failed"] = int((sel.status != "ok").sum())
            rows.append(row)
        return pd.DataFrame(rows)

    def paired(self, scenario: int, variant: str, reference: str) -> tuple[float, float, int]:
        a, b = self.mspe_matrix(scenario, variant), self.mspe_matrix(scenario, reference)
        both = a.index.intersection(b.index)
        d = (a[both] - b[both]).to_numpy()
        if d.size == 0:
            return np.nan, np.nan, 0
        se = d.std(ddof=1) / np.sqrt(d.size) if d.size > 1 else np.nan
        return float(d.mean()), float(se), int(d.size)

    def differences(self) -> pd.DataFrame:
        rec = self.records()
        rows = []
        for s in sorted(set(rec.scenario)):
            for label, v, ref in COMPARISONS:
                mean, se, n = self.paired(s, v, ref)
                if n:
                    rows.append(dict(scenario=s, comparison=label, mean_diff=mean, se=se, n=n))
        return pd.DataFrame(rows)


def run_study(cfg: StudyConfig) -> StudyResult:
    data = generate_study(cfg.scenario, cfg.scenarios)
    jobs = []
    for r in sorted(data):
        for s, v in cfg.jobs():
            jobs.append((r, s, v, data[r][s], cfg))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            fits = list(pool.map(_run_job, jobs))
    else:
        fits = [_run_job(j) for j in jobs]
    # scenarios 1-5 share truth and observations, so they share the no-proxy fit
    shared = [f for f in fits if f.variant == "no_proxy" and f.scenario == 1]
    for f in shared:
        for s in cfg.scenarios:
            if s in (2, 3, 4, 5):
                rep = data[f.replicate][s]
                fits.append(FitResult(f.replicate, s, "no_proxy", mspe(f.L_mean, rep.L, rep.land) if f.L_mean is not None
                                      else np.nan, np.nan, f.status, f.L_mean))
    return StudyResult(fits)
