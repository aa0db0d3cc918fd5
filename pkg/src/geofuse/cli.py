"""Command-line pipeline: generate -> simulate -> train -> assimilate -> analyze.

Every stage writes into its own directory under ``--out-dir`` with a
``manifest.json``; later stages read only those artifacts.  ``pipeline``
skips a stage whose manifest is complete and was produced from the same
configuration and master seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields as dc_fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import io as gio
from .analysis import band_area, ensemble_moments, field_error_metrics, kmeans, kmedoids_centers, percentiles
from .domain import Config, config_from_dict, dump_config, packaged_config, parse_config
from .esmda import EsmdaConfig, ObservationSet, interleaved_noise, run_esmda, sample_prior
from .exceptions import ArtifactError, ConfigError, GeofuseError, SolverError, TrainingError
from .geostat import CovarianceSpec, GeoModel, PcaBasis, fit_pca, generate_field, field_to_model, latent_to_logk
from .geostat import model_from_logk
from .seeding import rng_for, stage_seed
from .simulator.run import AuditLog, SimOutput, extract_observations, observation_index, salinity_accumulation
from .simulator.run import simulate
from .ufno import QUANTITIES, Normalizer, Surrogate, TrainConfig, UfnoConfig, UfnoParams, surrogate_outputs
from .ufno import train as train_surrogates

log = logging.getLogger("geofuse")

STAGES = ("generate", "simulate", "train", "assimilate", "analyze")


# -- configuration sections ---------------------------------------------------------------
def _section_obj(cls, block: dict, name: str, **extra):
    known = {f.name for f in dc_fields(cls)}
    unknown = set(block) - known
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    try:
        return cls(**{**block, **extra})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(name, str(exc)) from None


def covariance_of(cfg: Config) -> CovarianceSpec:
    block = {k: v for k, v in cfg.get("geostat").items() if k != "energy_fraction"}
    return _section_obj(CovarianceSpec, block, "geostat")


def ensemble_sizes(cfg: Config) -> tuple[int, int, int]:
    e = cfg.get("ensemble")
    n = int(e.get("n_members", 220))
    n_train = int(e.get("n_train", 200))
    n_test = int(e.get("n_test", n - n_train))
    if n < 2 or n_train < 2 or n_test < 1 or n_train + n_test > n:
        raise ConfigError("ensemble", f"need n_train >= 2, n_test >= 1 and n_train + n_test <= n_members "
                                      f"(got {n_train}, {n_test}, {n})")
    return n, n_train, n_test


def observation_times(cfg: Config) -> np.ndarray:
    o = cfg.get("observations")
    step = float(o.get("step", cfg.run.output_interval))
    start = float(o.get("start", step))
    stop = float(o.get("stop", cfg.run.output_times[-1]))
    if not (step > 0 and start <= stop):
        raise ConfigError("observations", "need step > 0 and start <= stop")
    return np.arange(start, stop + 0.5 * step, step)


def noise_levels(cfg: Config) -> tuple[float, float]:
    o = cfg.get("observations")
    sh, ss = float(o.get("sigma_head", 0.005)), float(o.get("sigma_salinity", 0.2))
    if sh < 0 or ss < 0:
        raise ConfigError("observations.sigma_head", "noise levels must be non-negative")
    return sh, ss


def ufno_config(cfg: Config) -> UfnoConfig:
    return _section_obj(UfnoConfig, dict(cfg.get("ufno")), "ufno")


def train_config(cfg: Config, master: int) -> TrainConfig:
    block = {k: v for k, v in cfg.get("train").items() if k != "speedup_reference"}
    return _section_obj(TrainConfig, block, "train", seed=stage_seed(master, "train") & 0x7FFFFFFF)


def esmda_config(cfg: Config, master: int) -> EsmdaConfig:
    block = {k: v for k, v in cfg.get("esmda").items() if k != "forward"}
    return _section_obj(EsmdaConfig, block, "esmda", seed=stage_seed(master, "esmda") & 0x7FFFFFFF)


def validate_sections(cfg: Config, master: int):
    covariance_of(cfg)
    ensemble_sizes(cfg)
    observation_times(cfg)
    noise_levels(cfg)
    ufno_config(cfg).validate_dims((cfg.grid.nz, cfg.grid.nx, cfg.run.n_outputs))
    train_config(cfg, master)
    esmda_config(cfg, master)
    if cfg.get("esmda").get("forward", "surrogate") not in ("surrogate", "simulator"):
        raise ConfigError("esmda.forward", "must be 'surrogate' or 'simulator'")
    ef = cfg.get("geostat").get("energy_fraction", 0.95)
    if not 0 < ef <= 1:
        raise ConfigError("geostat.energy_fraction", "must lie in (0, 1]")
    if int(cfg.get("analysis").get("k", 5)) < 1:
        raise ConfigError("analysis.k", "must be positive")


def fingerprint(cfg: Config, master: int) -> str:
    return hashlib.sha256(f"{dump_config(cfg)}|{master}".encode()).hexdigest()


# -- shared helpers -----------------------------------------------------------------------------
class Context:
    def __init__(self, cfg: Config, out_dir, master: int, jobs: int = 1, audit: bool = False):
        self.cfg, self.out, self.master, self.jobs, self.audit = cfg, Path(out_dir), int(master), jobs, audit
        self.fp = fingerprint(cfg, self.master)
        self.started: dict = {}

    def dir(self, stage: str) -> Path:
        return self.out / stage

    def new_manifest(self, stage: str) -> gio.Manifest:
        d = self.dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        old = d / gio.Manifest.FILE
        if old.exists():
            old.unlink()
        m = gio.Manifest(d, self.cfg.to_dict(), {"master": self.master})
        m.extra["fingerprint"] = self.fp
        return m

    def finish(self, m: gio.Manifest, stage: str):
        m.mark_stage(stage, f"geofuse {stage}", self.started.get(stage))
        m.save()

    def load(self, stage: str) -> gio.Manifest:
        d = self.dir(stage)
        if not gio.Manifest.exists(d):
            raise ArtifactError(f"missing artifacts in {d}; run the '{stage}' stage first")
        m = gio.Manifest.load(d)
        if stage not in m.stages:
            raise ArtifactError(f"stage '{stage}' in {d} did not complete; rerun it")
        return m

    def complete(self, stage: str) -> bool:
        try:
            m = self.load(stage)
        except ArtifactError:
            return False
        return m.extra.get("fingerprint") == self.fp


def _basis_from(m: gio.Manifest, cov: CovarianceSpec) -> PcaBasis:
    s = m.array("pca_singular_values")
    basis = m.array("pca_basis")
    return PcaBasis(mean=m.array("pca_mean"), basis=basis, singular_values=s, n_l=basis.shape[1],
                    n_members=int(m.extra["pca_members"]), shape=tuple(m.extra["grid_shape"]), cov=cov)


def _surrogates_from(m: gio.Manifest) -> dict:
    ucfg = UfnoConfig(**m.extra["ufno"])
    norm = Normalizer.from_dict(m.extra["normalizer"])
    out = {}
    for q in QUANTITIES:
        names = m.extra["param_names"]
        out[q] = Surrogate(q, UfnoParams({k: m.array(f"{q}.{k}") for k in names}), ucfg, norm)
    return out


# -- generate ---------------------------------------------------------------------------------
def cmd_generate(ctx: Context):
    cfg = ctx.cfg
    cov = covariance_of(cfg)
    n, n_train, _ = ensemble_sizes(cfg)
    seeds = [stage_seed(ctx.master, "generate", i) for i in range(n)]
    models = [field_to_model(generate_field(cfg.grid, cov, s), cov) for s in seeds]
    logk = np.stack([mm.logk for mm in models])
    phi = np.stack([mm.phi for mm in models])
    basis = fit_pca(logk[:n_train], cfg.get("geostat").get("energy_fraction", 0.95), cov)
    m = ctx.new_manifest("generate")
    m.add_array("logk", logk)
    m.add_array("phi", phi)
    m.add_array("seeds", np.array(seeds, dtype=np.int64))
    m.add_array("pca_mean", basis.mean)
    m.add_array("pca_basis", basis.basis)
    m.add_array("pca_singular_values", basis.singular_values)
    m.seeds["members"] = seeds
    m.extra.update({"pca_members": basis.n_members, "n_l": basis.n_l, "grid_shape": list(cfg.grid.shape)})
    ctx.finish(m, "generate")
    log.info("generated %d geomodels, PCA keeps %d components", n, basis.n_l)
    return m


# -- simulate ----------------------------------------------------------------------------------
def _simulate_member(args):
    raw, logk, phi, audit = args
    cfg = config_from_dict(raw)
    try:
        out = simulate(GeoModel(logk, phi), cfg.forcing(), cfg, audit=audit)
    except SolverError as exc:
        return None, str(exc)
    return out, ""


def _map_members(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def cmd_simulate(ctx: Context):
    cfg = ctx.cfg
    gen = ctx.load("generate")
    logk, phi = gen.array("logk"), gen.array("phi")
    n, n_train, n_test = ensemble_sizes(cfg)
    truth_idx = n_train
    tasks = [(cfg.to_dict(), logk[i], phi[i], ctx.audit) for i in range(n)]
    tic = time.perf_counter()
    results = _map_members(_simulate_member, tasks, ctx.jobs)
    times = cfg.run.output_times
    na = cfg.grid.n_active
    P = np.full((n, na, times.size), np.nan)
    C = np.full((n, na, times.size), np.nan)
    status = np.zeros(n, dtype=np.int64)
    audit_rows = []
    failures = {}
    m = ctx.new_manifest("simulate")
    for i, (out, err) in enumerate(results):
        if out is None:
            failures[i] = err
            log.warning("member %d failed: %s", i, err)
            continue
        P[i], C[i], status[i] = out.pressure_series, out.salinity_series, 1
        audit_rows.append((i, out.water_residual_max, out.salt_residual_max, out.n_steps))
        if ctx.audit:
            (ctx.dir("simulate") / "audit").mkdir(exist_ok=True)
            AuditLog(out.audit).write(ctx.dir("simulate") / "audit" / f"member_{i:04d}.csv")
    if status.sum() < 0.9 * n:
        raise SolverError("fewer than 90% of members simulated", failed=len(failures), members=n)
    if not status[truth_idx]:
        raise SolverError("the truth member failed", member=truth_idx, reason=failures.get(truth_idx, ""))
    log.info("simulated %d members in %.1f s (%d failed)", n, time.perf_counter() - tic, len(failures))

    obs_t = observation_times(cfg)
    truth = SimOutput(P[truth_idx], C[truth_idx], times.copy())
    clean = extract_observations(truth, cfg.grid, cfg.wells, obs_t, cfg.fluid)
    sh, ss = noise_levels(cfg)
    n_loc = sum(len(w) for w in cfg.wells)
    sigma = interleaved_noise(obs_t.size, n_loc, sh, ss)
    noisy = clean + sigma * rng_for(ctx.master, "observation-noise").standard_normal(clean.size)

    m.add_array("pressure", P)
    m.add_array("salinity", C)
    m.add_array("times", times)
    m.add_array("status", status)
    m.add_array("obs_times", obs_t)
    m.add_array("obs_clean", clean)
    m.add_array("obs_values", noisy)
    m.add_array("obs_sigma", sigma)
    m.extra.update({"truth_index": truth_idx, "failures": {str(k): v for k, v in failures.items()}})
    locs, _, _ = observation_index(cfg.grid, cfg.wells, obs_t, times)
    rows = []
    for j, t in enumerate(obs_t):
        for li, c in enumerate(locs):
            for qi, q in enumerate(("head", "salinity")):
                k = (j * len(locs) + li) * 2 + qi
                rows.append((t, int(c), q, clean[k], noisy[k], sigma[k]))
    gio.write_csv(ctx.dir("simulate") / "observations.csv",
                  ["time", "cell", "quantity", "truth", "observed", "sigma"], rows)
    gio.write_csv(ctx.dir("simulate") / "audit_summary.csv",
                  ["member", "water_residual_max", "salt_residual_max", "steps"], audit_rows)
    ctx.finish(m, "simulate")
    return m


# -- train --------------------------------------------------------------------------------------
def _dataset_fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _split_metrics(sur: Surrogate, logk, truth_full, times, active, baseline: float):
    pred = sur.predict(logk, times)
    _, rel, err = field_error_metrics(pred, truth_full, active)
    _, rel_b, _ = field_error_metrics(np.full_like(truth_full, baseline), truth_full, active)
    return rel, rel_b, float(err.max())


def measure_speedup(ctx: Context, surrogates: dict, model: GeoModel, ref_name: str) -> dict:
    """Wall time of one reference simulation against both surrogates evaluated
    at the reference output times for the same geomodel."""
    path = Path(ref_name)
    ref = parse_config(path if path.suffix in (".yaml", ".yml") else packaged_config(ref_name))
    tic = time.perf_counter()
    simulate(model, ref.forcing(), ref)
    t_sim = time.perf_counter() - tic
    times = ref.run.output_times
    walls = []
    for _ in range(3):
        tic = time.perf_counter()
        for q in QUANTITIES:
            surrogates[q].predict(model.logk[None], times)
        walls.append(time.perf_counter() - tic)
    t_sur = float(np.median(walls))
    return {"reference": ref_name, "simulate_seconds": t_sim, "surrogate_seconds": t_sur,
            "speedup": t_sim / t_sur, "n_times": int(times.size)}


def cmd_train(ctx: Context):
    cfg = ctx.cfg
    gen, sim = ctx.load("generate"), ctx.load("simulate")
    n, n_train, n_test = ensemble_sizes(cfg)
    logk, phi = gen.array("logk"), gen.array("phi")
    P, C, times, status = sim.array("pressure"), sim.array("salinity"), sim.array("times"), sim.array("status")
    tr = [i for i in range(n_train) if status[i]]
    te = [i for i in range(n_train, n_train + n_test) if status[i]]
    pairs = [(GeoModel(logk[i], phi[i]), SimOutput(P[i], C[i], times)) for i in tr]
    ucfg, tcfg = ufno_config(cfg), train_config(cfg, ctx.master)

    def progress(q, row):
        log.info("%s epoch %d train %.5g val %.5g (%.0f s)", q, *row)

    tic = time.perf_counter()
    surrogates, logs = train_surrogates(pairs, tcfg, ucfg, cfg.grid, progress=progress)
    t_train = time.perf_counter() - tic
    for q in QUANTITIES:
        vals = [r[1] for r in logs[q]] + [r[2] for r in logs[q] if np.isfinite(r[2])]
        if not np.all(np.isfinite(vals)):
            raise TrainingError(f"non-finite loss logged for {q}")

    m = ctx.new_manifest("train")
    params0 = surrogates[QUANTITIES[0]].params
    for q in QUANTITIES:
        for k, v in surrogates[q].params.items():
            m.add_array(f"{q}.{k}", v)
    norm = surrogates[QUANTITIES[0]].norm
    m.extra.update({"ufno": ucfg.to_dict(), "train": tcfg.to_dict(), "normalizer": norm.to_dict(),
                    "param_names": list(params0), "train_members": tr, "test_members": te,
                    "dataset": _dataset_fingerprint(logk[tr], P[tr], C[tr]), "train_seconds": t_train})
    gio.write_csv(ctx.dir("train") / "training_log.csv", ["network", "epoch", "train_loss", "val_loss", "wall_time"],
                  [(q, *r) for q in QUANTITIES for r in logs[q]])

    from .ufno.train import split_indices
    tr_i, va_i = split_indices(len(tr), tcfg.val_fraction, tcfg.seed)
    groups = {"train": [tr[i] for i in tr_i], "val": [tr[i] for i in va_i], "test": te}
    rows = []
    act = cfg.grid.active
    for q, arr in (("pressure", P), ("salinity", C)):
        for split, idx in groups.items():
            if not idx:
                continue
            full = np.stack([cfg.grid.to_full(arr[i], fill=0.0) for i in idx])
            rel, rel_b, mx = _split_metrics(surrogates[q], logk[idx], full, times, act, norm.out_mean[q])
            rows.append((q, split, len(idx), rel, rel_b, rel / rel_b, mx))
            log.info("%s %s: relative L2 %.4g (constant-mean baseline %.4g)", q, split, rel, rel_b)
    gio.write_csv(ctx.dir("train") / "metrics.csv",
                  ["quantity", "split", "members", "rel_l2", "baseline_rel_l2", "ratio", "max_abs_error"], rows)

    ref = cfg.get("train").get("speedup_reference")
    if ref and te:
        sp = measure_speedup(ctx, surrogates, GeoModel(logk[te[0]], phi[te[0]]), ref)
        m.extra["speedup"] = sp
        (ctx.dir("train") / "speedup.json").write_text(json.dumps(sp, indent=1, sort_keys=True))
        log.info("speedup %.0fx: simulator %.1f s, surrogates %.3f s", sp["speedup"], sp["simulate_seconds"],
                 sp["surrogate_seconds"])
    ctx.finish(m, "train")
    return m


# -- assimilate ------------------------------------------------------------------------------------
class _SurrogateForward:
    """Latent rows -> observation vectors; keeps the first and last full predictions."""

    def __init__(self, surrogates, basis, cfg: Config, times, obs_t):
        self.s, self.basis, self.cfg, self.times, self.obs_t = surrogates, basis, cfg, times, obs_t
        self.first = self.last = None

    def __call__(self, xi):
        logk = latent_to_logk(self.basis, xi).reshape((-1,) + self.cfg.grid.shape)
        outs = []
        for s in range(0, logk.shape[0], 20):
            outs += surrogate_outputs(self.s, logk[s:s + 20], self.cfg.grid, self.times)
        d = np.stack([extract_observations(o, self.cfg.grid, self.cfg.wells, self.obs_t, self.cfg.fluid)
                      for o in outs])
        pred = (np.stack([o.pressure_series for o in outs]), np.stack([o.salinity_series for o in outs]))
        if self.first is None:
            self.first = pred
        self.last = pred
        return d


def _simulator_forward(cfg: Config, basis, cov, obs_t):
    def fwd(xi):
        model = model_from_logk(latent_to_logk(basis, xi).reshape(cfg.grid.shape), cov)
        out = simulate(model, cfg.forcing(), cfg)
        return extract_observations(out, cfg.grid, cfg.wells, obs_t, cfg.fluid)
    return fwd


def cmd_assimilate(ctx: Context):
    cfg = ctx.cfg
    gen, sim, trn = ctx.load("generate"), ctx.load("simulate"), ctx.load("train")
    cov = covariance_of(cfg)
    basis = _basis_from(gen, cov)
    ecfg = esmda_config(cfg, ctx.master)
    times, obs_t = sim.array("times"), sim.array("obs_times")
    try:
        obs = ObservationSet(sim.array("obs_values"), sim.array("obs_sigma"))
    except ValueError as exc:
        raise ConfigError("observations", str(exc)) from None
    prior = sample_prior(ecfg.n_real, basis.n_l, ecfg.seed)
    surrogates = _surrogates_from(trn)
    fwd = _SurrogateForward(surrogates, basis, cfg, times, obs_t)
    tic = time.perf_counter()
    if cfg.get("esmda").get("forward", "surrogate") == "simulator":
        res = run_esmda(prior, _simulator_forward(cfg, basis, cov, obs_t), obs, ecfg)
        # full-field predictions still come from the surrogate
        fwd(prior.xi)
        fwd(res.posterior.xi)
    else:
        res = run_esmda(prior, None, obs, ecfg, forward_batch=fwd)
    log.info("ESMDA %d steps in %.1f s; mismatch %.4g -> %.4g", ecfg.n_assim, time.perf_counter() - tic,
             res.diagnostics[0][1], res.diagnostics[-1][1])
    m = ctx.new_manifest("assimilate")
    shape = (-1,) + cfg.grid.shape
    m.add_array("prior_latent", prior.xi)
    m.add_array("posterior_latent", res.posterior.xi)
    m.add_array("prior_logk", latent_to_logk(basis, prior.xi).reshape(shape))
    m.add_array("posterior_logk", latent_to_logk(basis, res.posterior.xi).reshape(shape))
    m.add_array("prior_pressure", fwd.first[0])
    m.add_array("prior_salinity", fwd.first[1])
    m.add_array("posterior_pressure", fwd.last[0])
    m.add_array("posterior_salinity", fwd.last[1])
    m.add_array("prior_data", res.data[0])
    m.add_array("posterior_data", res.data[-1])
    m.seeds["esmda"] = ecfg.seed
    m.extra["resampled"] = res.resampled
    gio.write_csv(ctx.dir("assimilate") / "diagnostics.csv", ["step", "mismatch", "latent_spread"], res.diagnostics)
    ctx.finish(m, "assimilate")
    return m


# -- analyze ------------------------------------------------------------------------------------------
def _accumulation(P, C, logk, cfg: Config, cov, times):
    rows = []
    for i in range(P.shape[0]):
        model = model_from_logk(logk[i], cov)
        rows.append(salinity_accumulation(SimOutput(P[i], C[i], times), model, cfg.grid, cfg.retention))
    return np.array(rows)


def _fan_rows(ps, truth):
    return [(t, ps.p10[j], ps.p50[j], ps.p90[j], truth[j]) for j, t in enumerate(ps.times)]


def _clusters(fields, k: int, seed: int):
    k = min(k, fields.shape[0])
    cl = kmeans(fields, k, seed)
    return cl.labels, kmedoids_centers(fields, cl.labels)


def cmd_analyze(ctx: Context):
    cfg = ctx.cfg
    gen, sim, trn, asm = (ctx.load(s) for s in ("generate", "simulate", "train", "assimilate"))
    d = ctx.dir("analyze")
    d.mkdir(parents=True, exist_ok=True)
    for old in list(d.glob("*.pgm")) + list(d.glob("*.csv")):
        old.unlink()
    cov = covariance_of(cfg)
    grid = cfg.grid
    act = grid.active
    times = sim.array("times")
    ti = int(sim.extra["truth_index"])
    truth_logk = gen.array("logk")[ti]
    truth_phi = gen.array("phi")[ti]
    tP, tC = sim.array("pressure")[ti], sim.array("salinity")[ti]
    truth_out = SimOutput(tP, tC, times)
    truth_acc = salinity_accumulation(truth_out, GeoModel(truth_logk, truth_phi), grid, cfg.retention)

    _, rows, _ = observation_index(grid, cfg.wells, [], times)
    well2 = int(rows[len(cfg.wells[0])]) if len(cfg.wells) > 1 else int(rows[0])
    metrics = {}
    fans = {}
    for tag in ("prior", "posterior"):
        P, C, lk = asm.array(f"{tag}_pressure"), asm.array(f"{tag}_salinity"), asm.array(f"{tag}_logk")
        ps_w = percentiles(C[:, well2, :], times=times)
        ps_a = percentiles(_accumulation(P, C, lk, cfg, cov, times), times=times)
        gio.write_csv(d / f"well2_salinity_{tag}.csv", ["time", "p10", "p50", "p90", "truth"],
                      _fan_rows(ps_w, tC[well2]))
        gio.write_csv(d / f"salinity_accumulation_{tag}.csv", ["time", "p10", "p50", "p90", "truth"],
                      _fan_rows(ps_a, truth_acc))
        fans[tag] = (ps_w, ps_a)
        mean, std = ensemble_moments(lk)
        fans[tag + "_moments"] = (mean, std)
        metrics[f"{tag}_logk_std_active_mean"] = float(std[act].mean())
        metrics[f"{tag}_well2_band_area"] = band_area(ps_w)
        metrics[f"{tag}_accumulation_band_area"] = band_area(ps_a)

    _, diag = gio.read_csv(ctx.dir("assimilate") / "diagnostics.csv")
    metrics["mismatch_initial"] = float(diag[0][1])
    metrics["mismatch_final"] = float(diag[-1][1])
    metrics["logk_std_ratio"] = metrics["posterior_logk_std_active_mean"] / metrics["prior_logk_std_active_mean"]
    metrics["accumulation_band_ratio"] = (metrics["posterior_accumulation_band_area"]
                                          / metrics["prior_accumulation_band_area"])

    # images: geomodel moments on shared scales, final salinity, error maps
    lo = min(fans["prior_moments"][0][act].min(), fans["posterior_moments"][0][act].min(), truth_logk[act].min())
    hi = max(fans["prior_moments"][0][act].max(), fans["posterior_moments"][0][act].max(), truth_logk[act].max())
    shi = max(fans["prior_moments"][1][act].max(), fans["posterior_moments"][1][act].max())
    gio.write_pgm(d / "truth_logk.pgm", truth_logk, lo, hi, act)
    for tag in ("prior", "posterior"):
        mean, std = fans[tag + "_moments"]
        gio.write_pgm(d / f"{tag}_logk_mean.pgm", mean, lo, hi, act)
        gio.write_pgm(d / f"{tag}_logk_std.pgm", std, 0.0, shi, act)
    c_max = cfg.fluid.c_sea
    post_C = asm.array("posterior_salinity")
    post_final = grid.to_full(post_C[:, :, -1].mean(axis=0))
    truth_final = grid.to_full(tC[:, -1])
    gio.write_pgm(d / "truth_salinity_final.pgm", truth_final, 0.0, c_max, act)
    gio.write_pgm(d / "posterior_mean_salinity_final.pgm", post_final, 0.0, c_max, act)
    err = np.abs(post_final - truth_final)
    gio.write_pgm(d / "posterior_salinity_error.pgm", err, 0.0, c_max, act)
    surs = _surrogates_from(trn)
    pred_truth = surs["salinity"].predict(truth_logk[None], times)[0]
    full_truth = grid.to_full(tC)
    mx, rel, e = field_error_metrics(pred_truth, full_truth, act)
    gio.write_pgm(d / "surrogate_salinity_final.pgm", pred_truth[..., -1], 0.0, c_max, act)
    gio.write_pgm(d / "surrogate_salinity_error.pgm", e[..., -1], 0.0, c_max, act)
    metrics["truth_surrogate_salinity_rel_l2"] = rel
    metrics["truth_surrogate_salinity_max_abs"] = mx

    k = int(cfg.get("analysis").get("k", 5))
    cseed = stage_seed(ctx.master, "cluster") & 0x7FFFFFFF
    for tag in ("prior", "posterior"):
        Cf = asm.array(f"{tag}_salinity")[:, :, -1]
        labels, med = _clusters(Cf, k, cseed)
        gio.write_csv(d / f"clusters_{tag}.csv", ["member_id", "cluster", "is_medoid"],
                      [(i, int(labels[i]), int(i in set(med.tolist()))) for i in range(Cf.shape[0])])
        for j, mi in enumerate(med):
            gio.write_pgm(d / f"{tag}_cluster{j + 1}_medoid.pgm", grid.to_full(Cf[mi]), 0.0, c_max, act)
    gio.write_csv(d / "metrics.csv", ["name", "value"], list(metrics.items()))
    lines = [f"{name}: {value:.6g}" for name, value in metrics.items()]
    (d / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    m = ctx.new_manifest("analyze")
    ctx.finish(m, "analyze")
    return m


COMMANDS = {"generate": cmd_generate, "simulate": cmd_simulate, "train": cmd_train,
            "assimilate": cmd_assimilate, "analyze": cmd_analyze}


def run_stage(ctx: Context, stage: str):
    ctx.started[stage] = datetime.now(timezone.utc).isoformat()
    return COMMANDS[stage](ctx)


def cmd_pipeline(ctx: Context, force: bool = False):
    """Run every stage in order, skipping stages already complete for this
    configuration and seed; a rerun stage invalidates the ones after it."""
    rerun = force
    for stage in STAGES:
        if not rerun and ctx.complete(stage):
            log.info("stage %s is up to date", stage)
            continue
        rerun = True
        log.info("running stage %s", stage)
        run_stage(ctx, stage)


# -- entry point ---------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geofuse", description="Seawater-intrusion surrogate and calibration pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="desk",
                        help="YAML file, or the name of a packaged config (reference, desk, ci)")
    common.add_argument("--out-dir", default="geofuse-out")
    common.add_argument("--seed", type=int, default=None, help="master seed (defaults to run.seed)")
    common.add_argument("--jobs", type=int, default=1, help="parallel simulator runs")
    common.add_argument("--audit", action="store_true", help="write per-step simulator audit logs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline"):
        sp = sub.add_parser(name, parents=[common])
        if name == "pipeline":
            sp.add_argument("--force", action="store_true", help="rerun every stage")
    return p


def load_config(spec: str) -> Config:
    path = Path(spec)
    if path.suffix in (".yaml", ".yml") or path.exists():
        return parse_config(path)
    return parse_config(packaged_config(spec))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        master = cfg.run.seed if args.seed is None else args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be at least 1")
        validate_sections(cfg, master)
        ctx = Context(cfg, args.out_dir, master, args.jobs, args.audit)
        if args.command == "pipeline":
            cmd_pipeline(ctx, args.force)
        else:
            run_stage(ctx, args.command)
    except GeofuseError as exc:
        print(f"geofuse {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"geofuse {args.command}: {exc}", file=sys.stderr)
        return ArtifactError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
