"""Command-line interface: ``stdpg <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .assess import (
    DEFAULT_GRID,
    AssessmentGrid,
    assess,
    density_raster,
    qq_export,
    risk_boundaries,
    write_assessment_csv,
    write_boundaries_csv,
    write_raster_csv,
)
from .data import Dataset, load_cases, load_landmarks, window_slice
from .errors import ConfigError, STDPGError
from .rolling import FLAT_PRIOR, WindowResult, fit_window, run_rolling, window_seed
from .sampler import (
    Draws,
    PosteriorSummary,
    SamplerConfig,
    state_from_dict,
    state_to_dict,
    write_trace_csv,
)
from .synth import spec_from_dict, write_simulation

log = logging.getLogger("stdpg")

CONVENTIONS = {
    "time_jitter": "t = (day offset + (rank within day + 0.5) / cases that day) / window length",
    "window_label": "windows are half-open [start, end) and labelled by their end date",
    "km_conversion": "omega * mean of haversine km per degree latitude and longitude at the domain centroid",
    "domain": "case bounding box padded by 2% of its width per side",
    "init": "window-1 centers at random landmark sites (cases if none) plus jitter; "
            "omega_s = omega_l = half RMS distance to the nearest landmark; omega_t = 0.25",
}


@dataclass
class RunConfig:
    cases: str | None = None
    landmarks: str | None = None
    out: str | None = None
    study_start: str | None = None
    study_end: str | None = None
    window_start: str | None = None
    window_days: int = 14
    M: int | None = None
    n_iter: int = 20000
    n_burn: int = 10000
    thin: int = 1
    seed: int = 0
    mh_step: float | None = None
    adapt: bool = True
    hyper_a: float = 1.0
    hyper_b: float = 0.25
    landmark_normalizer: str = "linear"
    draw_thin: int = 10
    c_mult: float = 2.0
    days_scale: float = 28.0
    carry_time: bool = False
    use_prior: bool = True
    carry_centers: bool = True
    grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    raster_res: int = 100
    raster_slices: int = 3
    threads: int = 1

    @property
    def truncation(self) -> int:
        if self.M is not None:
            return int(self.M)
        return 120 if self.window_days <= 14 else 200

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            M=self.truncation, n_iter=self.n_iter, n_burn=self.n_burn, thin=self.thin,
            seed=self.seed, mh_step=self.mh_step, adapt=self.adapt, hyper_a=self.hyper_a,
            hyper_b=self.hyper_b, landmark_normalizer=self.landmark_normalizer,
            draw_thin=self.draw_thin, threads=self.threads,
        ).validate()

    def validate(self) -> "RunConfig":
        if self.window_days < 1:
            raise ConfigError("--window-days must be positive")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError("--grid needs three positive counts")
        if self.c_mult <= 0 or self.days_scale <= 0:
            raise ConfigError("--c-mult and --days-scale must be positive")
        for name in ("study_start", "study_end", "window_start"):
            value = getattr(self, name)
            if value is not None:
                try:
                    dt.date.fromisoformat(value)
                except ValueError:
                    raise ConfigError(f"--{name.replace('_', '-')}: not an ISO date: {value}") from None
        self.sampler()
        return self

    def reproducible(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("threads")
        d["M"] = self.truncation
        return d


def _date(s):
    return None if s is None else dt.date.fromisoformat(s)


def build_config(args) -> RunConfig:
    """Merge defaults, an optional JSON config file, and explicit CLI flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"--config: file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: invalid JSON: {exc}") from None
        names = {f.name for f in dataclasses.fields(RunConfig)}
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in names:
                raise ConfigError(f"unknown config key {k!r}")
            values[key] = v
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if values.get("threads") is None:
        env = os.environ.get("STDPG_THREADS")
        values["threads"] = int(env) if env else (os.cpu_count() or 1)
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def _require_file(path, flag):
    if path is None:
        raise ConfigError(f"{flag} is required")
    if not Path(path).is_file():
        raise ConfigError(f"{flag}: file not found: {path}")


def _metadata(cfg: RunConfig, extra=None) -> dict:
    meta = {"software": "stdpg", "version": __version__, "config": cfg.reproducible(),
            "seed": cfg.seed, "conventions": CONVENTIONS}
    if extra:
        meta.update(extra)
    return meta


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=str))


def write_run(run_dir: Path, data: Dataset, trace, summary: PosteriorSummary, km: float,
              cfg: RunConfig, meta: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    write_trace_csv(trace, run_dir / "trace.csv")
    meta = dict(meta)
    meta["conversions"] = {"km_per_degree": km, "days_scale": cfg.days_scale}
    meta["domain"] = data.domain.to_dict()
    meta["landmark_types"] = list(data.landmark_types)
    meta["n_cases"] = data.n
    meta["accept_rate"] = trace.accept_rate.tolist()
    meta["mh_step_final"] = trace.steps.tolist()
    summary.save(run_dir / "summary.json", metadata={"seed": meta["seed"]})
    data.save(run_dir / "dataset.npz")
    trace.save_draws(run_dir / "draws.npz")
    _write_json(run_dir / "final_state.json", state_to_dict(trace.final_state))
    _write_json(run_dir / "metadata.json", meta)
    _assess_dir(run_dir, cfg.grid)
    _raster_dir(run_dir, cfg.raster_res, cfg.raster_slices)
    _boundaries_dir(run_dir)


def _assess_dir(run_dir: Path, grid_dims):
    data = Dataset.load(run_dir / "dataset.npz")
    draws = Draws.load(run_dir / "draws.npz")
    grid = AssessmentGrid(data.domain, *grid_dims)
    res = assess(draws, data, grid)
    write_assessment_csv(run_dir / "assessment.csv", grid, res.p_obs, res.p_theo, res.p_theo_raw)
    qq_export(res.p_theo, res.p_obs, run_dir / "qq.csv")
    return res


def _raster_dir(run_dir: Path, res: int, slices: int):
    data = Dataset.load(run_dir / "dataset.npz")
    draws = Draws.load(run_dir / "draws.npz")
    rasters = density_raster(draws, data.domain, res, slices)
    write_raster_csv(run_dir / "raster.csv", rasters)
    return rasters


def _boundaries_dir(run_dir: Path):
    state = state_from_dict(json.loads((run_dir / "final_state.json").read_text()))
    meta = json.loads((run_dir / "metadata.json").read_text())
    bounds = risk_boundaries(state, meta["conversions"]["km_per_degree"])
    write_boundaries_csv(run_dir / "boundaries.csv", bounds)
    return bounds


def cmd_fit(cfg: RunConfig) -> Path:
    _require_file(cfg.cases, "--cases")
    if cfg.landmarks is not None:
        _require_file(cfg.landmarks, "--landmarks")
    if cfg.out is None:
        raise ConfigError("--out is required")
    cases = load_cases(cfg.cases, _date(cfg.study_start), _date(cfg.study_end))
    catalog = load_landmarks(cfg.landmarks) if cfg.landmarks else None
    start = _date(cfg.window_start) or _date(cfg.study_start) or min(c.date for c in cases)
    in_window = window_slice(cases, start, cfg.window_days)
    data, trace, summary, km = fit_window(
        in_window, start, cfg.window_days, catalog, cfg.sampler(), FLAT_PRIOR, None,
        cfg.seed, cfg.days_scale, cfg.carry_time)
    out = Path(cfg.out)
    end = start + dt.timedelta(days=cfg.window_days)
    write_run(out, data, trace, summary, km, cfg,
              _metadata(cfg, {"window": {"start": start.isoformat(), "end": end.isoformat(),
                                         "label": end.isoformat()}}))
    return out


def _window_dir(index: int, end: dt.date) -> str:
    return f"window_{index + 1:02d}_{end.isoformat()}"


def cmd_rolling_fit(cfg: RunConfig) -> Path:
    _require_file(cfg.cases, "--cases")
    if cfg.landmarks is not None:
        _require_file(cfg.landmarks, "--landmarks")
    if cfg.out is None:
        raise ConfigError("--out is required")
    study_start = _date(cfg.study_start)
    study_end = _date(cfg.study_end)
    cases = load_cases(cfg.cases, study_start, study_end)
    catalog = load_landmarks(cfg.landmarks) if cfg.landmarks else None
    if study_start is None:
        study_start = min(c.date for c in cases)
    if study_end is None:
        study_end = max(c.date for c in cases) + dt.timedelta(days=1)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "windows.json"
    manifest = {"software": "stdpg", "version": __version__, "config": cfg.reproducible(),
                "study_start": study_start.isoformat(), "study_end": study_end.isoformat(),
                "label_convention": CONVENTIONS["window_label"], "windows": []}
    resume = {}
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("config") != manifest["config"]:
            raise ConfigError(f"--out: {out} holds a study with a different configuration")
        for entry in old["windows"]:
            wdir = out / entry["dir"]
            if entry.get("status") == "complete" and (wdir / "final_state.json").exists():
                summary = PosteriorSummary.load(wdir / "summary.json")
                state = state_from_dict(json.loads((wdir / "final_state.json").read_text()))
                resume[entry["index"]] = (summary, state)
                manifest["windows"].append(entry)
        if resume:
            log.info("resuming after %d completed windows", len(resume))

    sampler_cfg = cfg.sampler()

    def on_window(res: WindowResult):
        name = _window_dir(res.index, res.end)
        meta = _metadata(cfg, {
            "window": {"index": res.index, "start": res.start.isoformat(),
                       "end": res.end.isoformat(), "label": res.label},
            "window_seed": window_seed(cfg.seed, res.index),
            "prior": res.prior.to_dict(),
        })
        write_run(out / name, res.data, res.trace, res.summary, res.km_scale, cfg, meta)
        manifest["windows"].append({"index": res.index, "start": res.start.isoformat(),
                                    "end": res.end.isoformat(), "label": res.label,
                                    "n_cases": res.n_cases, "dir": name, "status": "complete"})
        manifest["windows"].sort(key=lambda e: e["index"])
        _write_json(manifest_path, manifest)
        log.info("window %d (%s) done: %d cases", res.index + 1, res.label, res.n_cases)

    _write_json(manifest_path, manifest)
    run_rolling(cases, catalog, study_start, study_end, cfg.window_days, sampler_cfg,
                c_mult=cfg.c_mult, use_prior=cfg.use_prior, carry_centers=cfg.carry_centers,
                carry_time=cfg.carry_time, days_scale=cfg.days_scale,
                on_window=on_window, resume=resume)
    return out


def _run_dirs(path: Path):
    """Window directories of a study, or the path itself for a single run."""
    manifest = path / "windows.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())["windows"]
        return [(e["label"], path / e["dir"]) for e in entries]
    if (path / "summary.json").exists():
        meta_path = path / "metadata.json"
        label = path.name
        if meta_path.exists():
            label = json.loads(meta_path.read_text()).get("window", {}).get("label", label)
        return [(label, path)]
    raise STDPGError(f"{path} is neither a run nor a study directory")


def _fmt(s: dict) -> str:
    return f"{s['mean']:.2f} ({s['hpd_lo']:.2f}, {s['hpd_hi']:.2f})"


def summary_table(path: Path) -> str:
    rows = []
    header = None
    for label, run_dir in _run_dirs(path):
        f = run_dir / "summary.json"
        if not f.exists():
            raise STDPGError(f"incomplete run directory: {run_dir} lacks summary.json")
        d = json.loads(f.read_text())
        conv = d["converted"]
        types = d.get("landmark_types", [])
        names = ["omega_s", "omega_t"] + [f"omega_{k + 1}" for k in range(len(types))]
        cols = ["space", "time"] + types
        if header is None:
            header = ["window"] + cols
        rows.append([label] + [_fmt(conv[n]) for n in names])
    widths = [max(len(str(r[k])) for r in [header] + rows) for k in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    return "\n".join(lines)


def cmd_summary(path) -> str:
    table = summary_table(Path(path))
    print(table)
    return table


def _add_fit_args(p):
    p.add_argument("--config", help="flat JSON file of option values")
    p.add_argument("--cases", help="case CSV with header lon,lat,date")
    p.add_argument("--landmarks", help="landmark CSV with header type,lon,lat")
    p.add_argument("--out", help="output directory")
    p.add_argument("--study-start", dest="study_start")
    p.add_argument("--study-end", dest="study_end", help="exclusive end date")
    p.add_argument("--window-days", dest="window_days", type=int)
    p.add_argument("--M", "--truncation", dest="M", type=int)
    p.add_argument("--n-iter", dest="n_iter", type=int)
    p.add_argument("--n-burn", dest="n_burn", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mh-step", dest="mh_step", type=float)
    p.add_argument("--no-adapt", dest="adapt", action="store_const", const=False)
    p.add_argument("--landmark-normalizer", dest="landmark_normalizer",
                   choices=["linear", "squared"])
    p.add_argument("--draw-thin", dest="draw_thin", type=int)
    p.add_argument("--days-scale", dest="days_scale", type=float)
    p.add_argument("--carry-time", dest="carry_time", action="store_const", const=True)
    p.add_argument("--grid", type=int, nargs=3, metavar=("N_LON", "N_LAT", "N_T"))
    p.add_argument("--raster-res", dest="raster_res", type=int)
    p.add_argument("--raster-slices", dest="raster_slices", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stdpg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stdpg {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $STDPG_THREADS or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a single window")
    _add_fit_args(p)
    p.add_argument("--window-start", dest="window_start")

    p = sub.add_parser("rolling-fit", help="fit consecutive windows sequentially")
    _add_fit_args(p)
    p.add_argument("--c-mult", dest="c_mult", type=float)
    p.add_argument("--no-prior", dest="use_prior", action="store_const", const=False)
    p.add_argument("--no-carry", dest="carry_centers", action="store_const", const=False)

    p = sub.add_parser("simulate", help="simulate cases from the model")
    p.add_argument("--spec", required=True, help="JSON simulation spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("assess", help="grid goodness-of-fit for a run or study")
    p.add_argument("run_dir")
    p.add_argument("--grid", type=int, nargs=3, default=list(DEFAULT_GRID),
                   metavar=("N_LON", "N_LAT", "N_T"))

    p = sub.add_parser("raster", help="posterior mean density raster")
    p.add_argument("run_dir")
    p.add_argument("--res", type=int, default=100)
    p.add_argument("--slices", type=int, default=3, help="time slices; 0 for the window aggregate")

    p = sub.add_parser("boundaries", help="cluster centers with 2*omega_s risk radii")
    p.add_argument("run_dir")

    p = sub.add_parser("summary", help="table of posterior means and HPD intervals")
    p.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fit":
            out = cmd_fit(build_config(args))
            print(out)
        elif args.command == "rolling-fit":
            out = cmd_rolling_fit(build_config(args))
            print(out)
        elif args.command == "simulate":
            try:
                raw = json.loads(Path(args.spec).read_text())
                spec = spec_from_dict(raw)
            except FileNotFoundError:
                raise ConfigError(f"--spec: file not found: {args.spec}") from None
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"--spec: invalid simulation spec: {exc}") from None
            for k, v in write_simulation(spec, args.out).items():
                print(f"{k}: {v}")
        elif args.command == "assess":
            for label, run_dir in _run_dirs(Path(args.run_dir)):
                res = _assess_dir(run_dir, args.grid)
                print(f"{label}  MSE={res.mse:.8f}  QQ-corr={res.qq_correlation:.4f}")
        elif args.command == "raster":
            for label, run_dir in _run_dirs(Path(args.run_dir)):
                _raster_dir(run_dir, args.res, args.slices)
                print(run_dir / "raster.csv")
        elif args.command == "boundaries":
            for label, run_dir in _run_dirs(Path(args.run_dir)):
                b = _boundaries_dir(run_dir)
                print(f"{label}  {len(b)} clusters -> {run_dir / 'boundaries.csv'}")
        elif args.command == "summary":
            cmd_summary(args.run_dir)
    except ConfigError as exc:
        print(f"stdpg: error: {exc}", file=sys.stderr)
        return 2
    except (STDPGError, OSError, ValueError, KeyError) as exc:
        print(f"stdpg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
