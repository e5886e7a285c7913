"""
Pipeline command line: ``funvar <stage> --config run.json``.

Stages and their outputs under ``output_dir``::

    simulate   data/cross_sections.csv, data/macro.csv, truth/
    ingest     data/cleaned_panel.csv, data/cleaning_report.json, data/cross_sections.csv
    densities  densities/clr_t0001.csv ...
    factorize  factors/flat_H.csv, mean.csv, scores.csv, loading.json
    fit        fit/*.csv, fit/manifest.json, fit/chain_state.json
    irf        irf/irf.csv, irf/firf/*.csv, irf/firf/firf_manifest.json

Every stage writes ``<stage>_manifest.json`` with the content hashes of its
inputs and of its config section. ``fit`` and ``irf`` run any missing upstream
stage first. Exit codes: 0 success, 2 invalid configuration, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import density_panel as dp
from . import dgp_sim, favar_core, ingest, structural, tensor_factor
from .exceptions import (ConvergenceError, FunVarError, InvalidConfigError, NumericalError, RankError,
                         ValidationError)

logger = logging.getLogger("funvar")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
STAGES = ("simulate", "ingest", "densities", "factorize", "fit", "irf")

DEFAULTS = {
    "output_dir": "run",
    "source": "simulate",
    "paths": {"micro_csv": None, "macro_csv": None, "deflator_csv": None, "cross_sections_csv": None},
    "simulate": {"T": 250, "n_obs": 2809, "n_y": 2, "K_true": 4, "p": 1, "seed": 0, "burn_in": 50},
    "grid": {"points_per_dim": [25, 25], "bounds_per_dim": [[-2.2, 2.2], [-2.2, 2.2]]},
    "bandwidth": "silverman",
    "micro_columns": ["x1", "x2"],
    "ingest": {"rules": {}, "detrended_columns": ["capital", "labor"], "deflate": ["capital"]},
    "macro": {"series": None, "detrend": []},
    "factor": {"method": "flat", "ranks": [4], "threshold": None, "restarts": 10, "epsilon": 1e-9, "seed": 0},
    "prior": {"kind": "niw"},
    "p": 1,
    "m": 1,
    "gibbs": {"iterations": 2000, "burn": 500, "thin": 1, "seed": 0, "store_factors": False},
    "shock_index": 0,
    "hmax": 24,
    "horizons": [4, 8, 24],
    "levels": {"aggregate": [0.05, 0.5, 0.95], "firf": 0.70},
    "firf_max_draws": 2000,
}


# -- config ---------------------------------------------------------------------

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ValidationError(["config must be a JSON object"])
    unknown = sorted(set(raw) - set(DEFAULTS))
    cfg = _merge(DEFAULTS, raw)
    cfg["_unknown"] = unknown
    cfg["_base"] = str(Path(path).resolve().parent)
    return cfg


def _path(cfg, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _positive_int(problems, name, v, minimum=1):
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        problems.append(f"{name} must be an integer >= {minimum}, got {v!r}")


def validate(cfg: dict, stage: str) -> list:
    """Every violated field for ``stage`` and the stages it may trigger."""
    problems = [f"unknown config key {k!r}" for k in cfg.get("_unknown", [])]
    try:
        grid = dp.GridSpec.from_dict(cfg["grid"])
    except (FunVarError, KeyError, TypeError, ValueError) as exc:
        problems.append(f"grid: {exc}")
        grid = None
    if cfg["source"] not in ("simulate", "ingest", "cross_sections"):
        problems.append("source must be 'simulate', 'ingest' or 'cross_sections'")
    paths = cfg["paths"]
    need_files = []
    if stage == "ingest" or (cfg["source"] == "ingest" and stage != "simulate"):
        need_files += [("paths.micro_csv", paths.get("micro_csv")), ("paths.macro_csv", paths.get("macro_csv"))]
        if paths.get("deflator_csv"):
            need_files.append(("paths.deflator_csv", paths.get("deflator_csv")))
    if cfg["source"] == "cross_sections" and stage not in ("simulate", "ingest"):
        need_files += [("paths.cross_sections_csv", paths.get("cross_sections_csv")),
                       ("paths.macro_csv", paths.get("macro_csv"))]
    for name, p in need_files:
        if not p:
            problems.append(f"{name} is required")
        elif not _path(cfg, p).is_file():
            problems.append(f"{name}: file {p} does not exist")

    sim = cfg["simulate"]
    for key in ("T", "n_obs", "n_y", "K_true", "p"):
        _positive_int(problems, f"simulate.{key}", sim.get(key), 2 if key == "n_obs" else 1)
    _positive_int(problems, "simulate.seed", sim.get("seed"), 0)
    if cfg["source"] == "simulate" and grid is not None and grid.dims != 2:
        problems.append("grid must be 2-dimensional for simulated data")

    bw = cfg["bandwidth"]
    if not (bw == "silverman" or (isinstance(bw, list) and all(isinstance(b, (int, float)) and b > 0 for b in bw))):
        problems.append("bandwidth must be 'silverman' or a list of positive numbers")
    elif isinstance(bw, list) and grid is not None and len(bw) != grid.dims:
        problems.append("bandwidth list length must equal the grid dimension")

    fac = cfg["factor"]
    if fac.get("method") not in tensor_factor.METHODS:
        problems.append(f"factor.method must be one of {list(tensor_factor.METHODS)}")
    if fac.get("ranks") is None and fac.get("threshold") is None:
        problems.append("factor.ranks or factor.threshold is required")
    if fac.get("ranks") is not None:
        r = fac["ranks"]
        if not (isinstance(r, list) and r and all(isinstance(k, int) and k >= 1 for k in r)):
            problems.append("factor.ranks must be a list of positive integers")
        elif fac.get("method") == "tucker" and grid is not None and len(r) != grid.dims:
            problems.append("factor.ranks needs one rank per grid dimension for tucker")
    if fac.get("threshold") is not None and not 0 < fac["threshold"] < 1:
        problems.append("factor.threshold must lie in (0, 1)")
    _positive_int(problems, "factor.restarts", fac.get("restarts"))

    _positive_int(problems, "p", cfg["p"])
    _positive_int(problems, "m", cfg["m"])
    g = cfg["gibbs"]
    _positive_int(problems, "gibbs.iterations", g.get("iterations"))
    _positive_int(problems, "gibbs.burn", g.get("burn"), 0)
    _positive_int(problems, "gibbs.thin", g.get("thin"))
    _positive_int(problems, "gibbs.seed", g.get("seed"), 0)
    if isinstance(g.get("iterations"), int) and isinstance(g.get("burn"), int) and g["burn"] >= g["iterations"]:
        problems.append("gibbs.burn must be smaller than gibbs.iterations")
    try:
        prior = _prior(cfg)
        problems += [f"prior: {p}" for p in prior.validate(2)]
    except (TypeError, ValueError) as exc:
        problems.append(f"prior: {exc}")

    _positive_int(problems, "shock_index", cfg["shock_index"], 0)
    _positive_int(problems, "hmax", cfg["hmax"], 0)
    hz = cfg["horizons"]
    if not (isinstance(hz, list) and hz and all(isinstance(h, int) and 0 <= h <= cfg["hmax"] for h in hz
                                                 if isinstance(cfg["hmax"], int))):
        problems.append("horizons must be a nonempty list of integers in [0, hmax]")
    lv = cfg["levels"]
    if not all(isinstance(q, (int, float)) and 0 < q < 1 for q in lv.get("aggregate", [])):
        problems.append("levels.aggregate quantiles must lie in (0, 1)")
    if not (isinstance(lv.get("firf"), (int, float)) and 0 < lv["firf"] < 1):
        problems.append("levels.firf must lie in (0, 1)")
    return problems


def _prior(cfg) -> favar_core.PriorConfig:
    pc = dict(cfg["prior"])
    ss = pc.pop("shrinkage", None)
    for key in ("s2", "S0", "B0", "V0"):
        if pc.get(key) is not None:
            pc[key] = np.asarray(pc[key], dtype=float)
    prior = favar_core.PriorConfig(**pc)
    if ss:
        prior.shrinkage = favar_core.SpikeSlabConfig(**ss)
    return prior


# -- helpers --------------------------------------------------------------------

def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _label(path, out: Path) -> str:
    path = Path(path)
    try:
        return str(path.resolve().relative_to(out.resolve()))
    except ValueError:
        return path.name


def _write_manifest(out: Path, stage: str, config_section, inputs, outputs, extra=None):
    man = {
        "stage": stage,
        "config_hash": _hash_obj(config_section),
        "inputs": {_label(p, out): _hash_file(p) for p in inputs},
        "outputs": sorted(str(Path(o).relative_to(out)) for o in outputs),
    }
    man.update(extra or {})
    (out / f"{stage}_manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def _grid(cfg) -> dp.GridSpec:
    return dp.GridSpec.from_dict(cfg["grid"])


def _read_long_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [r for r in rd if r]
    return header, rows


class Pipeline:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = _path(cfg, cfg["output_dir"])

    # simulate ---------------------------------------------------------------
    def dgp_config(self) -> dgp_sim.DgpConfig:
        s = self.cfg["simulate"]
        return dgp_sim.DgpConfig(n_y=s["n_y"], K_true=s["K_true"], p=s["p"], T=s["T"], grid=_grid(self.cfg),
                                 n_obs=s["n_obs"], burn_in=s["burn_in"])

    def simulate(self):
        dcfg = self.dgp_config()
        sim = dgp_sim.simulate(dcfg, seed=self.cfg["simulate"]["seed"])
        data = self.out / "data"
        data.mkdir(parents=True, exist_ok=True)
        dgp_sim.write_cross_sections(data / "cross_sections.csv", sim, self.cfg["micro_columns"])
        dgp_sim.write_aggregates(data / "macro.csv", sim)
        dgp_sim.write_truth(self.out / "truth", dcfg, sim, Hmax=self.cfg["hmax"], horizons=self.cfg["horizons"])
        outputs = [data / "cross_sections.csv", data / "macro.csv"] + sorted((self.out / "truth").iterdir())
        _write_manifest(self.out, "simulate", [self.cfg["simulate"], self.cfg["grid"]], [], outputs)

    # ingest ---------------------------------------------------------------------
    def ingest(self):
        cfg, paths = self.cfg, self.cfg["paths"]
        ic = cfg["ingest"]
        micro = _path(cfg, paths["micro_csv"])
        panel = ingest.clean_firm_panel(micro, ic.get("rules"))
        data = self.out / "data"
        data.mkdir(parents=True, exist_ok=True)
        panel.write(data / "cleaned_panel.csv", data / "cleaning_report.json")
        inputs = [micro]
        if paths.get("deflator_csv"):
            dfile = _path(cfg, paths["deflator_csv"])
            header, rows = _read_long_csv(dfile)
            deflator = {int(r[0]): float(r[1]) for r in rows}
            inputs.append(dfile)
        else:
            deflator = {int(t): 1.0 for t in panel.rows["period"].unique()}
        cols = ic.get("detrended_columns", ["capital", "labor"])
        df, dropped = ingest.deflate_and_detrend(panel, deflator, columns=cols, deflate=ic.get("deflate", []))
        periods, samples = ingest.panel_to_cross_sections(df, [f"{c}_dt" for c in cols])
        names = cfg["micro_columns"]
        with open(data / "cross_sections.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["period", *names])
            for t, xs in zip(periods, samples):
                for row in xs:
                    w.writerow([int(t)] + [repr(float(v)) for v in row])
        _write_manifest(self.out, "ingest", ic, inputs,
                        [data / "cleaned_panel.csv", data / "cleaning_report.json", data / "cross_sections.csv"],
                        {"dropped_short_firms": sorted(map(str, dropped))})

    # densities --------------------------------------------------------------------
    def cross_sections_path(self) -> Path:
        if self.cfg["source"] == "cross_sections":
            return _path(self.cfg, self.cfg["paths"]["cross_sections_csv"])
        return self.out / "data" / "cross_sections.csv"

    def macro_path(self) -> Path:
        if self.cfg["source"] == "simulate":
            return self.out / "data" / "macro.csv"
        return _path(self.cfg, self.cfg["paths"]["macro_csv"])

    def densities(self):
        src = self.cross_sections_path()
        if not src.is_file():
            self._upstream()
        header, rows = _read_long_csv(src)
        grid = _grid(self.cfg)
        if len(header) != grid.dims + 1:
            raise ValidationError([f"{src.name}: expected {grid.dims} variables, got {len(header) - 1}"])
        arr = np.array(rows, dtype=float)
        periods = np.unique(arr[:, 0]).astype(int)
        bw = self.cfg["bandwidth"]
        bw = None if bw == "silverman" else np.asarray(bw, dtype=float)
        d = self.out / "densities"
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("clr_t*.csv"):
            old.unlink()
        outputs = []
        for t in periods:
            sample = arr[arr[:, 0] == t, 1:]
            f = dp.estimate_density(sample, grid, bw)
            path = d / f"clr_t{t:04d}.csv"
            dp.write_field_csv(path, dp.clr(f), self.cfg["micro_columns"])
            outputs.append(path)
        _write_manifest(self.out, "densities", [self.cfg["grid"], self.cfg["bandwidth"]], [src], outputs,
                        {"periods": [int(t) for t in periods]})

    def _upstream(self):
        if self.cfg["source"] == "simulate":
            self.run_stage("simulate")
        elif self.cfg["source"] == "ingest":
            self.run_stage("ingest")
        else:
            raise OSError(f"cross-section file {self.cross_sections_path()} not found")

    def _clr_matrix(self):
        """``N_grid x T`` CLR matrix (column-major node order) and the observed mask.

        Column ``t`` belongs to the ``t``-th macro period; unobserved columns stay zero.
        """
        grid = _grid(self.cfg)
        man = json.loads((self.out / "densities_manifest.json").read_text())
        have = set(man["periods"])
        periods = self._macro_periods()
        T = len(periods)
        mask = favar_core.build_selector(T, self.cfg["m"])
        missing = [int(periods[t]) for t in np.flatnonzero(mask) if int(periods[t]) not in have]
        if missing:
            raise ValidationError([f"no cross-section for observed periods {missing[:10]}"])
        L = np.zeros((grid.size, T))
        for t in np.flatnonzero(mask):
            path = self.out / "densities" / f"clr_t{int(periods[t]):04d}.csv"
            fld = dp.read_field_csv(path, grid, dp.ClrField)
            L[:, t] = np.asarray(fld.values).ravel(order="F")
        return L, mask

    def _macro_periods(self) -> np.ndarray:
        header, rows = _read_long_csv(self.macro_path())
        return np.array([int(float(r[0])) for r in rows])

    # factorize ----------------------------------------------------------------------
    def factorize(self):
        if not (self.out / "densities_manifest.json").is_file():
            self.run_stage("densities")
        grid = _grid(self.cfg)
        L, mask = self._clr_matrix()
        fields = L[:, mask]
        tensor = dp.ClrTensor(grid, fields.reshape(*grid.shape, -1, order="F"))
        fc = self.cfg["factor"]
        loading, scores = tensor_factor.factorize(tensor, fc["method"], fc.get("ranks"), fc.get("threshold"),
                                                  restarts=fc["restarts"], epsilon=fc["epsilon"], seed=fc["seed"])
        d = self.out / "factors"
        tensor_factor.save_loading(d, loading, scores)
        _write_manifest(self.out, "factorize", fc, sorted((self.out / "densities").glob("clr_t*.csv")),
                        sorted(d.iterdir()))

    # fit ----------------------------------------------------------------------------------
    def fit(self):
        if not (self.out / "factorize_manifest.json").is_file():
            self.run_stage("factorize")
        loading, _ = tensor_factor.load_loading(self.out / "factors")
        L, mask = self._clr_matrix()
        l = L - loading.mean[:, None]
        l[:, ~mask] = 0.0
        mc = self.cfg["macro"]
        macro = ingest.MacroPanel.from_csv(self.macro_path(), detrend=mc.get("detrend", []), series=mc.get("series"))
        y = macro.matrix()
        data = favar_core.StateSpaceData(y, l, loading.flat_H, m=self.cfg["m"], obs_mask=mask)
        g = self.cfg["gibbs"]
        d = self.out / "fit"
        resume = None
        section = {k: self.cfg[k] for k in ("prior", "p", "m", "factor", "macro")}
        section["gibbs"] = {k: v for k, v in g.items() if k != "iterations"}
        if (d / "manifest.json").is_file() and (d / "chain_state.json").is_file():
            old = json.loads((d / "manifest.json").read_text())
            if old.get("resume_key") == _hash_obj(section) and old.get("iterations", 0) < g["iterations"]:
                resume = favar_core.load_draws(d)
                logger.info("resuming chain from iteration %d", resume.iterations)
        draws = favar_core.gibbs_run(data, _prior(self.cfg), self.cfg["p"], g["iterations"], g["burn"], g["thin"],
                                     g["seed"], store_factors=g.get("store_factors", False), resume=resume)
        obs = favar_core.observed_periods(mask)
        favar_core.save_draws(d, draws, {"m": self.cfg["m"], "resume_key": _hash_obj(section),
                                         "series": list(macro.values.columns)})
        inputs = [self.macro_path()] + sorted((self.out / "factors").glob("*.csv"))
        _write_manifest(self.out, "fit", section, inputs, sorted(d.iterdir()),
                        {"m": self.cfg["m"], "observed_periods": obs, "iterations": g["iterations"]})

    # irf ------------------------------------------------------------------------------------
    def irf(self):
        if not (self.out / "fit_manifest.json").is_file():
            self.run_stage("fit")
        draws = favar_core.load_draws(self.out / "fit")
        loading, _ = tensor_factor.load_loading(self.out / "factors")
        man = json.loads((self.out / "fit" / "manifest.json").read_text())
        names = man.get("series") or [f"y{i + 1}" for i in range(draws.n_y)]
        names = list(names) + [f"f{k + 1}" for k in range(draws.K)]
        lv = self.cfg["levels"]
        ir = structural.irf_draws(draws, self.cfg["hmax"], self.cfg["shock_index"], names, tuple(lv["aggregate"]))
        d = self.out / "irf"
        d.mkdir(parents=True, exist_ok=True)
        ir.write_csv(d / "irf.csv")
        fr = structural.firf(ir, loading, structural.steady_state_scores(draws, loading.K), _grid(self.cfg),
                             draws.n_y, self.cfg["horizons"], lv["firf"], self.cfg.get("firf_max_draws"))
        worst = float(np.max(np.abs(fr.integrals())))
        if worst > 1e-8:
            raise NumericalError(f"functional response does not integrate to zero ({worst:.3g})")
        fman = structural.write_firf(d / "firf", fr, self.cfg["micro_columns"])
        section = {k: self.cfg[k] for k in ("shock_index", "hmax", "horizons", "levels", "firf_max_draws")}
        inputs = sorted((self.out / "fit").glob("*.csv")) + sorted((self.out / "factors").glob("*.csv"))
        outputs = [d / "irf.csv"] + sorted((d / "firf").iterdir())
        _write_manifest(self.out, "irf", section, inputs, outputs,
                        {"n_explosive": int(draws.explosive.sum()), "firf_max_abs_integral": fman["max_abs_integral"]})

    def run_stage(self, stage):
        logger.info("stage %s", stage)
        getattr(self, stage)()


class RunLock:
    """Exclusive lock file in the run directory."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".funvar.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise OSError(f"run directory is locked by another process ({self.path})") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def run(stage: str, cfg: dict) -> int:
    """Run one stage; returns the process exit code."""
    problems = validate(cfg, stage)
    if problems:
        print(f"{stage}: invalid configuration", file=sys.stderr)
        for p in problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    pipe = Pipeline(cfg)
    try:
        with RunLock(pipe.out):
            pipe.run_stage(stage)
    except (ValidationError, InvalidConfigError) as exc:
        print(f"stage {stage} failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ConvergenceError, RankError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"stage {stage} failed (numerical): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"stage {stage} failed (I/O): {exc}", file=sys.stderr)
        return EXIT_IO
    except FunVarError as exc:
        print(f"stage {stage} failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funvar", description="Functional augmented VAR pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage, help=f"run the {stage} stage")
        sp.add_argument("--config", "-c", required=True, help="JSON run configuration")
        sp.add_argument("--output-dir", "-o", help="override output_dir from the config")
    sub.add_parser("defaults", help="print the default configuration")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.stage == "defaults":
        print(json.dumps(DEFAULTS, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    if args.output_dir:
        cfg["output_dir"] = str(Path(args.output_dir).resolve())
    return run(args.stage, cfg)


if __name__ == "__main__":
    sys.exit(main())
