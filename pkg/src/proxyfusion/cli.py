"""Command-line entry points: fit, predict, simulate-study, diagnose, cv.

Every command reads one YAML config; ``--set key.path=value`` overrides any key.
Exit codes: 0 success, 2 bad config, 3 bad data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import fields as dc_fields
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .assemble import (
    VARIANTS,
    DataError,
    ModelConfig,
    build_spec,
    read_tables,
    replicate_tables,
    simulation_model_config,
    write_tables,
)
from .diagnostics import (
    build_pairs,
    cross_validate,
    default_bins,
    discrepancy_diagnostic,
    predict_field,
    predict_observations,
    variogram_from_pairs,
)
from .grid import GridError, grid_from_config
from .linalg import IndefiniteMatrixError
from .mcmc import ChainConfig, ChainError, effective_sample_size, run_chain
from .model import LatentDraws, ModelError, Priors
from .sim import ScenarioConfig, generate_study
from .study import StudyConfig, run_study

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("fit", "predict", "simulate-study", "diagnose", "cv")

log = logging.getLogger("proxyfusion")


class ConfigError(ValueError):
    pass


# ---- config loading -------------------------------------------------------------------------

class _Config:
    """Nested dict plus the source line of every key, for error messages."""

    def __init__(self, data: dict, lines: dict, source: str):
        self.data, self.lines, self.source = data, lines, source

    def where(self, path: str) -> str:
        line = self.lines.get(path)
        return f"{self.source}:{line}" if isinstance(line, int) else f"{self.source} ({line or 'default'})"

    def error(self, path: str, msg: str) -> ConfigError:
        return ConfigError(f"{self.where(path)}: {path}: {msg}")

    def section(self, name: str) -> dict:
        val = self.data.get(name, {})
        if val is None:
            return {}
        if not isinstance(val, dict):
            raise self.error(name, "must be a mapping")
        return val


def _key_lines(node, prefix="", out=None) -> dict:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    return out


def load_config(path, overrides=()) -> _Config:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping")
    lines = _key_lines(node) if node is not None else {}
    base = p.parent
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key.path=value")
        key, raw = item.split("=", 1)
        try:
            val = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {item!r}: bad value") from exc
        cur = data
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = cur.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set {item!r}: {part} is not a mapping")
            cur = nxt
        cur[parts[-1]] = val
        lines[key] = "--set"
    cfg = _Config(data, lines, str(path))
    cfg.base = base
    return cfg


TOP_KEYS = {"seed", "output", "grid", "data", "model", "chain", "diagnose", "cv", "predict", "study"}


def _build(cls, section: dict, cfg: _Config, prefix: str, **extra):
    """Dataclass from a config mapping, rejecting unknown keys with their line."""
    names = {f.name for f in dc_fields(cls)}
    for k in section:
        if k not in names:
            raise cfg.error(f"{prefix}.{k}", f"unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = dict(section)
    kwargs.update(extra)
    for k, v in list(kwargs.items()):
        if isinstance(v, list) and k not in ("blocks",):
            kwargs[k] = tuple(v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        bad = next((k for k in section if k in str(exc)), None)
        raise cfg.error(f"{prefix}.{bad}" if bad else prefix, str(exc)) from exc


def _check_top(cfg: _Config):
    for k in cfg.data:
        if k not in TOP_KEYS:
            raise cfg.error(k, f"unknown section (allowed: {', '.join(sorted(TOP_KEYS))})")
    seed = cfg.data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise cfg.error("seed", "must be a nonnegative integer")


def chain_config(cfg: _Config) -> ChainConfig:
    sec = dict(cfg.section("chain"))
    sec.setdefault("seed", cfg.data.get("seed", 0))
    return _build(ChainConfig, sec, cfg, "chain")


def model_config(cfg: _Config, simulated: bool = False) -> ModelConfig:
    sec = dict(cfg.section("model"))
    priors = sec.pop("priors", None) or {}
    if not isinstance(priors, dict):
        raise cfg.error("model.priors", "must be a mapping")
    pri = _build(Priors, priors, cfg, "model.priors")
    if "fixed" in sec and not isinstance(sec["fixed"], dict):
        raise cfg.error("model.fixed", "must be a mapping of parameter name to value")
    if simulated:
        base = simulation_model_config()
        names = {f.name for f in dc_fields(ModelConfig)}
        for k in sec:
            if k not in names:
                raise cfg.error(f"model.{k}", "unknown key")
        try:
            return replace(base, priors=pri, **{k: (tuple(v) if isinstance(v, list) else v) for k, v in sec.items()})
        except (TypeError, ValueError) as exc:
            raise cfg.error("model", str(exc)) from exc
    return _build(ModelConfig, sec, cfg, "model", priors=pri)


def _path(cfg: _Config, key: str, required=True):
    sec = cfg.section("data")
    if key not in sec or sec[key] is None:
        if required:
            raise cfg.error(f"data.{key}", "missing path")
        return None
    p = Path(sec[key])
    if not p.is_absolute():
        p = cfg.base / p
    if not p.exists():
        raise cfg.error(f"data.{key}", f"file not found: {p}")
    return p


def load_data(cfg: _Config, mc: ModelConfig):
    sec = cfg.section("data")
    for k in sec:
        if k not in ("observations", "cells", "proxy", "land"):
            raise cfg.error(f"data.{k}", "unknown key (allowed: cells, land, observations, proxy)")
    try:
        grid = grid_from_config(cfg.section("grid"))
    except (GridError, TypeError, ValueError) as exc:
        raise cfg.error("grid", str(exc)) from exc
    need_proxy = mc.variant != "no_proxy"
    paths = dict(
        observations=_path(cfg, "observations"),
        cells=_path(cfg, "cells"),
        proxy=_path(cfg, "proxy", required=need_proxy),
        land=_path(cfg, "land", required=False),
    )
    if not need_proxy:
        paths["proxy"] = None
    return read_tables(grid, **paths)


def output_dir(cfg: _Config) -> Path:
    out = cfg.data.get("output")
    if not out:
        raise cfg.error("output", "missing output directory")
    p = Path(out)
    if not p.is_absolute():
        p = cfg.base / p
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---- writers ----------------------------------------------------------------------------------

def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_matrix(path, header, rows, index_name="draw"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([index_name, *header])
        for i, r in enumerate(rows):
            w.writerow([i, *(_fmt(x) for x in r)])


def write_frame(path, frame: pd.DataFrame):
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: _Config, files: list[str], extra: dict | None = None):
    """Everything needed to rerun: the resolved config, seed, version and output checksums."""
    man = {
        "command": command,
        "version": __version__,
        "seed": cfg.data.get("seed", 0),
        "config": cfg.data,
        "outputs": {f: _sha256(out / f) for f in sorted(files)},
    }
    if extra:
        man.update(extra)
    with open(out / "manifest.yaml", "w") as fh:
        yaml.safe_dump(man, fh, sort_keys=True, default_flow_style=False)


def _theta_columns(latents) -> list[str]:
    names = []
    for d in latents:
        for k in d.values:
            if k not in names:
                names.append(k)
    return names


def write_latents(out: Path, assembled, latents) -> list[str]:
    spec = assembled.spec
    tnames = _theta_columns(latents)
    header = list(assembled.coef_names) + [f"theta:{t}" for t in tnames]
    # coefficient names repeat across basis columns; number them
    seen = {}
    uniq = []
    for h in header:
        seen[h] = seen.get(h, -1) + 1
        uniq.append(f"{h}[{seen[h]}]" if not h.startswith("theta:") else h)
    rows = [np.r_[d.b, [d.values.get(t, np.nan) for t in tnames]] for d in latents]
    write_matrix(out / "b_draws.csv", uniq, rows)
    files = ["b_draws.csv"]
    for f in spec.fields:
        if latents and f.name in latents[0].fields:
            write_matrix(out / f"{f.name}_draws.csv", [f"c{j}" for j in range(f.dim)],
                         [d.fields[f.name] for d in latents])
            files.append(f"{f.name}_draws.csv")
    return files


def read_latents(run: Path, assembled) -> list[LatentDraws]:
    spec = assembled.spec
    path = run / "b_draws.csv"
    if not path.exists():
        raise DataError(f"{path}: no coefficient draws (run 'fit' first)")
    frame = pd.read_csv(path)
    tcols = [c for c in frame.columns if c.startswith("theta:")]
    bcols = [c for c in frame.columns if c != "draw" and c not in tcols]
    if len(bcols) != spec.n_coef:
        raise DataError(f"{path}: {len(bcols)} coefficients, model has {spec.n_coef}")
    fields = {}
    for f in spec.fields:
        fp = run / f"{f.name}_draws.csv"
        if fp.exists():
            fields[f.name] = pd.read_csv(fp).drop(columns="draw").to_numpy(dtype=float)
    out = []
    B = frame[bcols].to_numpy(dtype=float)
    T = frame[tcols].to_numpy(dtype=float)
    for i in range(len(frame)):
        out.append(LatentDraws(B[i], {k: v[i] for k, v in fields.items()}, i,
                               {c[6:]: float(T[i, j]) for j, c in enumerate(tcols)}))
    return out


def write_prediction(out: Path, grid, spec, latents) -> str:
    pred = predict_field(spec, latents)
    r, c = np.divmod(np.arange(grid.size), grid.ncol)
    frame = pd.DataFrame({"cell": np.arange(grid.size), "row": r, "col": c,
                          "land": grid.land_mask.astype(int), "mean": pred.mean, "sd": pred.sd})
    write_frame(out / "prediction.csv", frame)
    return "prediction.csv"


def _diag_settings(cfg: _Config) -> dict:
    sec = cfg.section("diagnose")
    allowed = {"pair_budget", "max_draws", "run"}
    for k in sec:
        if k not in allowed:
            raise cfg.error(f"diagnose.{k}", f"unknown key (allowed: {', '.join(sorted(allowed))})")
    budget = sec.get("pair_budget", 1_000_000)
    max_draws = sec.get("max_draws", 200)
    for k, v in (("pair_budget", budget), ("max_draws", max_draws)):
        if not isinstance(v, (int, float)) or v < 1:
            raise cfg.error(f"diagnose.{k}", "must be a positive number")
    return {"pair_budget": int(budget), "max_draws": int(max_draws)}


def write_mdiag(out: Path, cfg: _Config, grid, spec, latents) -> list[str]:
    """M(d) over the proxy likelihood cells; nothing when there is no discrepancy field."""
    if not spec.has_proxy or not latents or "phi" not in latents[0].fields:
        return []
    ds = _diag_settings(cfg)
    step = max(1, -(-len(latents) // ds["max_draws"]))
    use = latents[::step]
    mask = np.zeros(grid.size, dtype=bool)
    mask[spec.P_A.indices] = True
    rng = np.random.default_rng([cfg.data.get("seed", 0), 7])
    pairs = build_pairs(grid, mask, default_bins(grid), ds["pair_budget"], rng)
    phi = np.array([d.fields["phi"] for d in use])
    L = np.array([spec.focal_process(d.b, d.fields) for d in use])
    b1 = np.array([d.values["beta1"] for d in use])
    curve = discrepancy_diagnostic(phi, L, b1, pairs)
    with open(out / "mdiag.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "M", "count"])
        for c_, v, n in zip(curve.centers, curve.values, curve.counts):
            w.writerow([_fmt(c_), _fmt(v), int(n)])
    rows = []
    for name, field in (("phi", phi.mean(0)), ("L", L.mean(0)), ("A_fitted", (b1[:, None] * L + phi).mean(0))):
        v = variogram_from_pairs(field, pairs)
        for c_, g, n in zip(*v.reported()):
            rows.append((name, _fmt(c_), _fmt(g), int(n)))
    with open(out / "variograms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field", "bin_center", "semivariance", "count"])
        w.writerows(rows)
    return ["mdiag.csv", "variograms.csv"]


def write_ess(out: Path, chain) -> str:
    with open(out / "ess.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "mean", "ess", "flag", "acceptance_block"])
        block_of = {n: b for b, names in chain.block_names.items() for n in names}
        for n in chain.names:
            x = chain.column(n)
            ess, flag = effective_sample_size(x, return_flag=True)
            w.writerow([n, _fmt(x.mean()), _fmt(ess), flag or "", block_of.get(n, "fixed")])
    return "ess.csv"


# ---- commands ---------------------------------------------------------------------------------

def cmd_fit(cfg: _Config) -> int:
    _check_top(cfg)
    mc = model_config(cfg)
    cc = chain_config(cfg)
    data = load_data(cfg, mc)
    out = output_dir(cfg)
    assembled = build_spec(data, mc)
    spec = assembled.spec
    chain = run_chain(spec, cc)
    chain.write_traces(out / "traces.csv")
    chain.write_delta(out / "delta_trace.csv")
    files = ["traces.csv", "delta_trace.csv", write_ess(out, chain)]
    files += write_latents(out, assembled, chain.latents)
    files.append(write_prediction(out, data.grid, spec, chain.latents))
    files += write_mdiag(out, cfg, data.grid, spec, chain.latents)
    acc = {k: float(v) for k, v in chain.acceptance.items()}
    write_manifest(out, "fit", cfg, files, {"acceptance": acc, "mode": spec.flags.mode})
    log.info("fit: %d draws written to %s", chain.theta.shape[0], out)
    return EXIT_OK


def _run_dir(cfg: _Config, key: str) -> Path:
    sec = cfg.section(key)
    run = sec.get("run") or cfg.data.get("output")
    if not run:
        raise cfg.error(f"{key}.run", "missing run directory")
    p = Path(run)
    return p if p.is_absolute() else cfg.base / p


def cmd_predict(cfg: _Config) -> int:
    _check_top(cfg)
    sec = cfg.section("predict")
    for k in sec:
        if k not in ("run", "points"):
            raise cfg.error(f"predict.{k}", "unknown key (allowed: points, run)")
    mc = model_config(cfg)
    data = load_data(cfg, mc)
    assembled = build_spec(data, mc)
    run = _run_dir(cfg, "predict")
    latents = read_latents(run, assembled)
    out = output_dir(cfg)
    files = [write_prediction(out, data.grid, assembled.spec, latents)]
    if sec.get("points"):
        pts = Path(sec["points"])
        pts = pts if pts.is_absolute() else cfg.base / pts
        if not pts.exists():
            raise cfg.error("predict.points", f"file not found: {pts}")
        frame = pd.read_csv(pts)
        design = assembled.point_design(data.grid, frame)
        pred = predict_observations(assembled.spec, latents, design)
        res = pd.DataFrame({"point": np.arange(len(frame)), "mean": pred.mean, "sd": pred.sd,
                            "lower90": pred.lower, "upper90": pred.upper})
        write_frame(out / "point_prediction.csv", res)
        files.append("point_prediction.csv")
    write_manifest(out, "predict", cfg, files)
    return EXIT_OK


def cmd_diagnose(cfg: _Config) -> int:
    _check_top(cfg)
    mc = model_config(cfg)
    data = load_data(cfg, mc)
    assembled = build_spec(data, mc)
    run = _run_dir(cfg, "diagnose")
    latents = read_latents(run, assembled)
    out = output_dir(cfg)
    files = write_mdiag(out, cfg, data.grid, assembled.spec, latents)
    if not files:
        log.info("diagnose: no discrepancy field in this model; M(d) not defined")
    write_manifest(out, "diagnose", cfg, files)
    return EXIT_OK


def cmd_cv(cfg: _Config) -> int:
    _check_top(cfg)
    sec = cfg.section("cv")
    for k in sec:
        if k != "folds":
            raise cfg.error(f"cv.{k}", "unknown key (allowed: folds)")
    folds = sec.get("folds", 10)
    if not isinstance(folds, int) or folds < 2:
        raise cfg.error("cv.folds", "must be an integer >= 2")
    mc = model_config(cfg)
    cc = replace(chain_config(cfg), sample_fields=mc.joint_coarsen is not None)
    data = load_data(cfg, mc)
    out = output_dir(cfg)
    assembled = build_spec(data, mc)
    seed = cfg.data.get("seed", 0)
    counter = iter(range(10**6))

    def fit(train):
        return run_chain(train, replace(cc, seed=int(np.random.SeedSequence([seed, next(counter)]).generate_state(1)[0]))).latents

    res = cross_validate(assembled.spec, assembled.site_ids, folds, fit, np.random.default_rng([seed, 11]))
    rows = [dict(fold=i, n_sites=len(g), **s) for i, (g, s) in enumerate(zip(res["assignment"], res["folds"]))]
    rows.append(dict(fold="pooled", n_sites=sum(len(g) for g in res["assignment"]), **res["pooled"]))
    write_frame(out / "cv_summary.csv", pd.DataFrame(rows))
    write_manifest(out, "cv", cfg, ["cv_summary.csv"])
    return EXIT_OK


def study_config(cfg: _Config) -> tuple[StudyConfig, bool]:
    sec = dict(cfg.section("study"))
    scen = sec.pop("scenario", None) or {}
    if not isinstance(scen, dict):
        raise cfg.error("study.scenario", "must be a mapping")
    scen = dict(scen)
    scen.setdefault("seed", cfg.data.get("seed", 0))
    sc = _build(ScenarioConfig, scen, cfg, "study.scenario")
    write_data = bool(sec.pop("write_data", False))
    for k in sec:
        if k not in ("scenarios", "variants", "workers"):
            raise cfg.error(f"study.{k}", "unknown key (allowed: scenario, scenarios, variants, workers, write_data)")
    scenarios = tuple(sec.get("scenarios", (1, 2, 3, 4, 5, 6)))
    if not scenarios or any(s not in range(1, 7) for s in scenarios):
        raise cfg.error("study.scenarios", "scenarios must be drawn from 1-6")
    variants = tuple(sec.get("variants", VARIANTS))
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise cfg.error("study.variants", f"unknown variants {bad}; allowed {list(VARIANTS)}")
    chain = replace(chain_config(cfg), sample_fields=False)
    mc = model_config(cfg, simulated=True)
    workers = sec.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise cfg.error("study.workers", "must be a positive integer")
    return StudyConfig(sc, scenarios, variants, chain, mc, workers), write_data


def cmd_simulate_study(cfg: _Config) -> int:
    _check_top(cfg)
    sc, write_data = study_config(cfg)
    out = output_dir(cfg)
    files = []
    if write_data:
        for r, reps in generate_study(sc.scenario, sc.scenarios).items():
            for s, rep in reps.items():
                d = Path(f"data/rep{r}_s{s}")
                paths = write_tables(replicate_tables(rep), out / d)
                files += [str(Path(p).relative_to(out)) for p in paths.values()]
                write_frame(out / d / "truth.csv", pd.DataFrame({"L": rep.L, **{k: v for k, v in rep.truth.items()
                                                                                if np.ndim(v) == 1 and len(v) == rep.L.size}}))
                files.append(str(d / "truth.csv"))
    result = run_study(sc)
    write_frame(out / "study_records.csv", result.records())
    write_frame(out / "mspe_table.csv", result.table())
    write_frame(out / "paired_differences.csv", result.differences())
    files += ["study_records.csv", "mspe_table.csv", "paired_differences.csv"]
    failed = int((result.records().status != "ok").sum())
    write_manifest(out, "simulate-study", cfg, files, {"failed_fits": failed})
    if failed:
        log.warning("simulate-study: %d fits failed and were excluded", failed)
    return EXIT_OK


HANDLERS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "simulate-study": cmd_simulate_study,
    "diagnose": cmd_diagnose,
    "cv": cmd_cv,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxyfusion", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("-c", "--config", required=True, help="YAML run configuration")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. chain.burn_in=500")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GridError, ModelError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ChainError, IndefiniteMatrixError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
