"""Stage functions behind the command line and the landmark protocol.

Every stage writes plain CSV with 17 significant digits, so a rerun under
the same seeds reproduces the files byte for byte.  Wall-clock times are
kept out of the hashed outputs (``timings.json``).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from .config import SettingConfig
from .diagnostics import ScoreRecord, forecast, gaussian_kl, one_step_scores, summarise_scores
from .engine import LikelihoodEngine
from .mcmc import McmcConfig, McmcResult, posterior_mcmc
from .observation import SurveillanceData
from .params import DEFAULT_PRIORS, NAMES, ParameterSpace, scenario_space
from .simulator import ScenarioConfig, sampling_calendar, simulate_dataset, write_dataset
from .smc import KernelConfig, SMCSampler, StepReport
from .smc.sampler import ParticleSet, weighted_quantile

log = logging.getLogger(__name__)

PROBS = (0.025, 0.5, 0.975)


class PipelineError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# small I/O helpers


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            values = [r[h] for h in header] if isinstance(r, dict) else r
            w.writerow([fmt(v) for v in values])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(seed: int, *keys) -> int:
    """Stable 32-bit seed for a named sub-task of a run."""
    ints = [int(seed)] + [k if isinstance(k, int) else int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little")
                          for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def set_threads(n: int | None):
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def load_data(path, cfg: SettingConfig) -> SurveillanceData:
    return SurveillanceData.from_csv(path, n_ages=cfg.n_ages, n_days=cfg.horizon_days)


def make_engine(cfg: SettingConfig, data: SurveillanceData, scenario: str) -> LikelihoodEngine:
    return LikelihoodEngine(cfg, data, streams=cfg.streams(scenario))


def transform_space(names) -> ParameterSpace:
    """Space used only for its transforms (base values are irrelevant)."""
    return ParameterSpace(list(names), np.zeros(len(NAMES)), DEFAULT_PRIORS)


# ----------------------------------------------------------------------------
# simulate


def simulate_stage(cfg: SettingConfig, scenario: str, seed: int, out) -> tuple[SurveillanceData, dict, list[Path]]:
    data, truth = simulate_dataset(ScenarioConfig(cfg, scenario, seed=seed))
    return data, truth, write_dataset(data, truth, out)


# ----------------------------------------------------------------------------
# MCMC


def mcmc_stage(cfg: SettingConfig, data: SurveillanceData, scenario: str, days, config: McmcConfig, out,
               seeds: dict | None = None) -> tuple[dict[int, McmcResult], list[Path]]:
    """Reference chains at each day; ``posterior.csv`` holds one row per retained draw."""
    space = scenario_space(cfg, scenario)
    engine = make_engine(cfg, data, scenario)
    engine.cache_days = 0
    results = {}
    rows, summ = [], []
    for d in days:
        c = McmcConfig(**{**asdict(config), "seed": (seeds or {}).get(d, config.seed)})
        res = posterior_mcmc(engine, space, d, c)
        results[d] = res
        theta = space.to_natural(res.samples)[:, space.free_index]
        for k in range(theta.shape[0]):
            rows.append([d, k, res.log_post[k], *theta[k]])
        summ.append([d, c.seed, res.samples.shape[0], res.accept_rate, res.n_evals, res.scale])
    out = Path(out)
    files = [
        write_csv(out / "posterior.csv", ["day", "draw", "log_post", *space.free], rows),
        write_csv(out / "mcmc_summary.csv", ["day", "seed", "draws", "accept_rate", "n_evals", "scale"], summ),
    ]
    return results, files


def read_posterior(path) -> tuple[dict[int, np.ndarray], list[str]]:
    """Natural-scale draws per day from a ``posterior.csv``."""
    rows = read_csv(path)
    if not rows:
        return {}, []
    names = [k for k in rows[0] if k not in ("day", "draw", "log_post")]
    by = {}
    for r in rows:
        by.setdefault(int(r["day"]), []).append([float(r[n]) for n in names])
    return {d: np.array(v) for d, v in by.items()}, names


# ----------------------------------------------------------------------------
# SMC


@dataclass
class SmcSettings:
    scenario: str = "1"
    mode: str = "continuous"
    kernel: str = "hybrid"
    r_A_star: float = 0.1
    particles: int = 10_000
    seed: int = 0
    epsilon_L: float = 0.5
    stopping: str = "icc"
    fixed_iters: int = 1
    max_mh_iters: int = 500
    score: bool = True
    snapshot_days: tuple = ()

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(kind=self.kernel, epsilon_L=self.epsilon_L, r_A_star=self.r_A_star,
                            max_mh_iters=self.max_mh_iters, stopping=self.stopping, fixed_iters=self.fixed_iters)


def seed_from_chain(samples, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` starting particles from an MCMC sample: evenly spaced draws, or resampled when too few."""
    samples = np.asarray(samples)
    m = samples.shape[0]
    if m >= n:
        return samples[np.linspace(0, m - 1, n).round().astype(np.int64)].copy()
    return samples[rng.integers(0, m, size=n)].copy()


def step_row(rep: StepReport, cum: int) -> dict:
    prop, acc = rep.totals()
    iters = sum(r.iterations for r in rep.rejuvenations)
    r_last = rep.rejuvenations[-1].r_A[-1] if rep.rejuvenations and rep.rejuvenations[-1].r_A else float("nan")
    return {
        "day": rep.day, "mode": rep.mode, "n_rejuvenations": rep.n_rejuvenations, "mh_iterations": iters,
        "deltas": ";".join(f"{d:.17g}" for d in rep.deltas), "ess_min": min(rep.ess), "ess_final": rep.ess[-1],
        "r_A_final": r_last, "proposals": prop, "accepted": acc, "acceptance_rate": acc / prop if prop else float("nan"),
        "n_evals": rep.n_evals, "cum_evals": cum, "log_score": -rep.log_evidence, "severe": rep.severe,
        "stale": any(r.stale for r in rep.rejuvenations),
    }


STEP_COLUMNS = ["day", "mode", "n_rejuvenations", "mh_iterations", "deltas", "ess_min", "ess_final", "r_A_final",
                "proposals", "accepted", "acceptance_rate", "n_evals", "cum_evals", "log_score", "severe", "stale"]
SCORE_COLUMNS = ["day", "age_group", "stream", "y", "rps", "null_mean", "null_var", "pit_lower", "pit_upper"]


def smc_stage(cfg: SettingConfig, data: SurveillanceData, settings: SmcSettings, out, last_day: int,
              start_z=None, start_day: int = 0, resume: ParticleSet | None = None,
              engine: LikelihoodEngine | None = None) -> dict:
    """Run the sampler from ``start_day`` (or a resumed set) to ``last_day``.

    Writes ``state_summary.csv``, ``step_report.csv``, ``particles.csv``
    (weighted particles on ``snapshot_days`` and the final day),
    ``predictive.csv`` when scoring, and ``checkpoint.bin``.
    """
    out = Path(out)
    space = scenario_space(cfg, settings.scenario)
    engine = engine or make_engine(cfg, data, settings.scenario)
    # expected streams are only needed up to the last assimilated day
    engine.cache_days = int(last_day)
    sampler = SMCSampler(engine, space, settings.kernel_config(), settings.mode, settings.seed)
    evals0 = engine.n_evals
    if resume is not None:
        sampler.particles = resume
        if resume.cache.shape[2] < last_day:
            res = engine.evaluate(resume.theta, resume.t_index, store=True)
            resume.cache = res.cache
    elif start_z is None:
        sampler.initialise_from_prior(settings.particles)
    else:
        sampler.initialise(start_z, start_day)
    snapshot = set(int(d) for d in settings.snapshot_days) | {int(last_day)}
    summary_rows, step_rows, part_rows, scores = [], [], [], []
    init_evals = engine.n_evals - evals0
    cum = init_evals
    reports = []
    while sampler.particles.t_index < last_day:
        ps = sampler.particles
        day = ps.t_index + 1
        if settings.score:
            scores.extend(one_step_scores(engine, ps.theta, ps.cache, ps.weights(), day))
        rep = sampler.assimilate(day)
        reports.append(rep)
        cum += rep.n_evals
        step_rows.append(step_row(rep, cum))
        ps = sampler.particles
        w = ps.weights()
        for j, name in enumerate(space.free):
            x = ps.theta[:, space.free_index[j]]
            q = weighted_quantile(x, w, PROBS)
            summary_rows.append([day, name, float(w @ x), *q])
        if day in snapshot:
            th = ps.theta[:, space.free_index]
            for k in range(ps.n):
                part_rows.append([day, k, w[k], *th[k]])
    files = [
        write_csv(out / "state_summary.csv", ["day", "parameter", "mean", "q0.025", "q0.5", "q0.975"], summary_rows),
        write_csv(out / "step_report.csv", STEP_COLUMNS, step_rows),
        write_csv(out / "particles.csv", ["day", "particle", "weight", *space.free], part_rows),
    ]
    if settings.score:
        files.append(write_csv(out / "predictive.csv", SCORE_COLUMNS,
                               [[r.day, r.age, r.stream, r.y, r.rps, r.null_mean, r.null_var, r.pit_lower, r.pit_upper]
                                for r in scores]))
    meta = {"config": cfg.raw, "scenario": settings.scenario, "settings": asdict(settings), "free": list(space.free)}
    files.append(ckpt.save(sampler.particles, out / "checkpoint.bin", meta))
    warns = [w for r in reports for w in r.warnings]
    return {"sampler": sampler, "reports": reports, "files": files, "n_evals": engine.n_evals - evals0,
            "init_evals": init_evals, "warnings": warns}


# ----------------------------------------------------------------------------
# compare / diagnose / forecast


def read_particles(path) -> tuple[dict[int, tuple[np.ndarray, np.ndarray]], list[str]]:
    rows = read_csv(path)
    if not rows:
        return {}, []
    names = [k for k in rows[0] if k not in ("day", "particle", "weight")]
    by = {}
    for r in rows:
        by.setdefault(int(r["day"]), ([], []))
        by[int(r["day"])][0].append(float(r["weight"]))
        by[int(r["day"])][1].append([float(r[n]) for n in names])
    return {d: (np.array(w), np.array(x)) for d, (w, x) in by.items()}, names


def kl_by_day(smc: dict, mcmc: dict, smc_names, mcmc_names, exclude=()) -> list[list]:
    """``KL(MCMC || SMC)`` on the unconstrained scale for every common day."""
    if list(smc_names) != list(mcmc_names):
        raise PipelineError("SMC and MCMC outputs have different parameters")
    space = transform_space(smc_names)
    full = np.zeros((1, len(NAMES)))

    def to_z(x):
        th = np.repeat(full, x.shape[0], axis=0)
        th[:, space.free_index] = x
        return space.to_unconstrained(th)

    rows = []
    for d in sorted(set(smc) & set(mcmc)):
        w, xs = smc[d]
        kl = gaussian_kl(to_z(mcmc[d]), to_z(xs), weights1=w, exclude=list(exclude), names=list(smc_names))
        rows.append([d, kl, mcmc[d].shape[0], xs.shape[0]])
    return rows


def compare_stage(smc_dir, mcmc_dir, out, exclude=("beta_B",)) -> list[Path]:
    smc, sn = read_particles(Path(smc_dir) / "particles.csv")
    mc, mn = read_posterior(Path(mcmc_dir) / "posterior.csv")
    rows = kl_by_day(smc, mc, sn, mn, exclude)
    return [write_csv(Path(out) / "kl_by_day.csv", ["day", "kl", "n_mcmc", "n_smc"], rows)]


def read_scores(paths) -> list[ScoreRecord]:
    recs = []
    for p in paths:
        for r in read_csv(p):
            recs.append(ScoreRecord(int(r["day"]), int(r["age_group"]), r["stream"], float(r["y"]), float(r["rps"]),
                                    float(r["null_mean"]), float(r["null_var"]), float(r["pit_lower"]),
                                    float(r["pit_upper"])))
    return recs


def diagnose_stage(run_dirs, out, bins: int = 10) -> list[Path]:
    """PIT histograms and z statistics from the ``predictive.csv`` of one or more runs."""
    if isinstance(run_dirs, (str, Path)):
        run_dirs = [run_dirs]
    paths = [Path(d) / "predictive.csv" for d in run_dirs]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise PipelineError(f"no predictive scores in {missing}; run smc with scoring enabled")
    scores, pit = summarise_scores(read_scores(paths), bins)
    out = Path(out)
    return [
        write_csv(out / "scores.csv", ["stream", "n", "mean_rps", "null_mean", "null_var_of_mean", "z_rps", "pit_chi2", "pit_p"], scores),
        write_csv(out / "pit_hist.csv", ["stream", "bin", "lower", "upper", "height"], pit),
    ]


def forecast_stage(checkpoint_path, horizon: int, out, cfg: SettingConfig | None = None,
                   max_particles: int = 2000, seed: int = 0) -> list[Path]:
    ps, meta = ckpt.load(checkpoint_path)
    cfg = cfg or SettingConfig(meta["config"])
    scenario = meta.get("scenario", "1")
    streams = cfg.streams(scenario)
    first = ps.t_index + 1
    horizon = min(int(horizon), cfg.horizon_days - ps.t_index)
    if horizon < 1:
        raise PipelineError("checkpoint is already at the end of the horizon")
    engine = LikelihoodEngine(cfg, None, streams=streams)
    den = {}
    for s in ("virology", "serology"):
        if s in streams:
            cal = sampling_calendar(s, cfg.sampling(), cfg.horizon_days, cfg.populations)
            den[s] = np.array([cal.get(first + h, np.zeros(cfg.n_ages)) for h in range(horizon)])
    bands = forecast(ps.theta, ps.weights(), engine, first, horizon, streams, PROBS, max_particles,
                     np.random.default_rng(derive_seed(seed, "forecast", first)), den)
    rows = []
    for s in streams:
        for h in range(horizon):
            for a in range(cfg.n_ages):
                if np.all(np.isfinite(bands[s][h, a])):
                    rows.append([first + h, a, s, *bands[s][h, a]])
    return [write_csv(Path(out) / "forecast_bands.csv", ["day", "age_group", "stream", "q0.025", "q0.5", "q0.975"], rows)]


# ----------------------------------------------------------------------------
# the landmark protocol


@dataclass
class PipelineSettings:
    scenario: str = "1"
    seed: int = 0
    particles: int = 10_000
    mcmc_iterations: int = 100_000
    mcmc_burn_in: int | None = None
    mcmc_thin: int = 10
    mode: str = "continuous"
    kernel: str = "hybrid"
    r_A_star: float = 0.1
    landmarks: tuple | None = None
    kl_days: tuple | None = None
    exclude: tuple = ("beta_B",)
    forecast_horizon: int = 20
    score: bool = True
    extra: dict = field(default_factory=dict)

    def resolved(self, cfg: SettingConfig) -> "PipelineSettings":
        s = PipelineSettings(**asdict(self))
        s.landmarks = tuple(int(d) for d in (self.landmarks or cfg.landmarks))
        s.kl_days = tuple(int(d) for d in (self.kl_days if self.kl_days is not None else cfg.kl_days))
        if s.mcmc_burn_in is None:
            s.mcmc_burn_in = s.mcmc_iterations // 5
        return s


def validate(cfg: SettingConfig, settings: PipelineSettings) -> PipelineSettings:
    s = settings.resolved(cfg)
    cfg.streams(s.scenario)
    lm = list(s.landmarks)
    if len(lm) < 2 or lm != sorted(set(lm)) or lm[0] < 1 or lm[-1] > cfg.horizon_days:
        raise PipelineError(f"landmarks must be at least two increasing days within 1..{cfg.horizon_days}")
    McmcConfig(iterations=s.mcmc_iterations, burn_in=s.mcmc_burn_in, thin=s.mcmc_thin)
    SmcSettings(kernel=s.kernel, r_A_star=s.r_A_star, mode=s.mode).kernel_config()
    if s.mode not in ("discrete", "continuous"):
        raise PipelineError(f"unknown mode {s.mode!r}")
    if s.particles < 2:
        raise PipelineError("need at least two particles")
    return s


def versions() -> dict:
    import numba
    import scipy

    return {"flusmc": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
            "python": platform.python_version()}


def pipeline_run(cfg: SettingConfig, settings: PipelineSettings, out, dry_run: bool = False) -> dict:
    """simulate -> MCMC at landmarks and KL days -> SMC over each interval -> compare -> diagnose -> forecast.

    Returns the manifest (also written to ``manifest.json``).  A failing
    stage is recorded and re-raised as :class:`PipelineError` after the
    manifest is written.
    """
    s = validate(cfg, settings)
    out = Path(out)
    lm = list(s.landmarks)
    intervals = list(zip(lm[:-1], lm[1:]))
    kl_days = sorted({b for _, b in intervals} | {d for d in s.kl_days if lm[0] < d <= lm[-1]})
    mcmc_days = sorted(set(lm[:-1]) | set(kl_days))
    seeds = {
        "simulate": int(s.seed),
        "mcmc": {d: derive_seed(s.seed, "mcmc", d) for d in mcmc_days},
        "smc": {f"{a}-{b}": derive_seed(s.seed, "smc", a, b) for a, b in intervals},
    }
    manifest = {
        "config_hash": cfg.digest(), "config_name": cfg.name, "scenario": s.scenario, "master_seed": int(s.seed),
        "seeds": {"simulate": seeds["simulate"], "mcmc": {str(k): v for k, v in seeds["mcmc"].items()},
                  "smc": seeds["smc"]},
        "settings": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(s).items()},
        "versions": versions(), "stages": [], "warnings": [], "files": {}, "complete": False, "dry_run": dry_run,
    }
    if dry_run:
        manifest["plan"] = {"intervals": intervals, "mcmc_days": mcmc_days, "kl_days": kl_days}
        return manifest
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    files: list[Path] = []

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result, n_evals = fn()
        except Exception as exc:
            manifest["stages"].append({"name": name, "status": f"failed: {type(exc).__name__}: {exc}", "n_evals": None})
            _finish(manifest, out, files, timings)
            raise PipelineError(f"stage {name} failed: {exc}") from exc
        timings[name] = time.perf_counter() - t0
        manifest["stages"].append({"name": name, "status": "ok", "n_evals": n_evals})
        return result

    def do_simulate():
        data, truth, fs = simulate_stage(cfg, s.scenario, seeds["simulate"], out / "simulate")
        files.extend(fs)
        return data, 0

    data = stage("simulate", do_simulate)

    mc_cfg = McmcConfig(iterations=s.mcmc_iterations, burn_in=s.mcmc_burn_in, thin=s.mcmc_thin,
                        landmark_days=tuple(lm))

    def do_mcmc():
        res, fs = mcmc_stage(cfg, data, s.scenario, mcmc_days, mc_cfg, out / "mcmc", seeds["mcmc"])
        files.extend(fs)
        return res, sum(r.n_evals for r in res.values())

    chains = stage("mcmc", do_mcmc)
    smc_dirs = []
    for a, b in intervals:
        key = f"{a}-{b}"

        def do_smc(a=a, b=b, key=key):
            st = SmcSettings(scenario=s.scenario, mode=s.mode, kernel=s.kernel, r_A_star=s.r_A_star,
                             particles=s.particles, seed=seeds["smc"][key], score=s.score,
                             snapshot_days=tuple(d for d in kl_days if a < d <= b))
            z0 = seed_from_chain(chains[a].samples, s.particles, np.random.default_rng(seeds["smc"][key]))
            r = smc_stage(cfg, data, st, out / "smc" / key, b, start_z=z0, start_day=a)
            files.extend(r["files"])
            manifest["warnings"].extend(f"smc {key}: {w}" for w in r["warnings"])
            return r, r["n_evals"]

        stage(f"smc {key}", do_smc)
        smc_dirs.append(out / "smc" / key)

    def do_compare():
        rows = []
        mc, mn = read_posterior(out / "mcmc" / "posterior.csv")
        for (a, b), d in zip(intervals, smc_dirs):
            sm, sn = read_particles(d / "particles.csv")
            for r in kl_by_day(sm, mc, sn, mn, s.exclude):
                rows.append([f"{a}-{b}", *r])
        files.append(write_csv(out / "kl_by_day.csv", ["interval", "day", "kl", "n_mcmc", "n_smc"], rows))
        return rows, 0

    stage("compare", do_compare)
    if s.score:
        def do_diagnose():
            files.extend(diagnose_stage(smc_dirs, out / "diagnose"))
            return None, 0

        stage("diagnose", do_diagnose)
    if s.forecast_horizon > 0 and lm[-1] < cfg.horizon_days:
        def do_forecast():
            files.extend(forecast_stage(smc_dirs[-1] / "checkpoint.bin", s.forecast_horizon, out / "forecast", cfg,
                                        seed=s.seed))
            return None, 0

        stage("forecast", do_forecast)
    manifest["complete"] = True
    return _finish(manifest, out, files, timings)


def _finish(manifest: dict, out: Path, files, timings) -> dict:
    manifest["files"] = {str(Path(f).relative_to(out)): sha256_file(f) for f in sorted(set(map(Path, files)))}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "timings.json", "w") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
