"""Command-line pipeline driver.

Subcommands: trace, generate, fit, evaluate, sweep, export.  Every run is
driven by a single JSON configuration document with a strict schema
(unknown keys are rejected) whose hash is recorded in each output manifest,
so any artifact can be regenerated from its manifest alone.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import importlib.resources
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, geometry, instrument, solver as solver_mod, synth
from .dynamics import RotationAxis, VelocityProfile, sample_perturbation
from .field import load_checkpoint, save_checkpoint
from .geodesics import (CameraSpec, IntegratorSettings, RayBundle,
                        build_bundle, euclidean_bundle)
from .render import export_frame_png, render_sequence
from .solver import SolveConfig, Solver, make_field, solve


class ConfigError(ValueError):
    pass


CACHE_ENV = "BHTOMO_CACHE_DIR"

DEFAULT_CONFIG = {
    "system": {
        "mass_solar": 4.0e6,
        "spin": 0.0,
        "distance_m": geometry.SGRA_DISTANCE_M,
    },
    "camera": {
        "view_direction": [0.0, 0.0, -1.0],
        "up_direction": [0.0, 1.0, 0.0],
        "image_pixels": 64,
        "field_half_width": 12.0,
        "start_radius": 100.0,
        "euclidean": False,
    },
    "integrator": {
        "rtol": 1e-9,
        "atol": 1e-9,
        "max_step": 5.0,
        "horizon_guard": 1e-3,
        "region_of_interest": 12.0,
        "max_samples_per_ray": 128,
        "max_steps": 100000,
        "lambda_max": 4000.0,
    },
    "grid": {"resolution": 64, "half_extent": 10.0},
    "dynamics": {
        "axis": [0.0, 0.0, 1.0],
        "profile": {"kind": "exact", "magnitude": 0.0, "corr_length": 1.0,
                    "seed": 0},
    },
    "hotspots": {
        "count": 1,
        "orbit_radius": 6.96,   # 1.16 x innermost stable orbit
        "std": 1.0,
        "amplitude": 1.0,
        "seed": 0,
        "radial_jitter": 0.0,
        "flare_times": None,
    },
    "observation": {
        "mode": "image",        # "image" | "uv"
        "catalog": "eht2017",   # builtin name or CSV path
        "start_utc": "2017-04-07T08:00:00",
        "ra_hours": 17.7611225,
        "dec_deg": -29.007797,
        "pixel_scale": 0.0,     # radians/pixel; 0 -> derived from the system
        "noise_seed": 0,
    },
    "timestamps": {"n_frames": 64, "duration_minutes": 40.0},
    "solver": {
        "iterations": 5000,
        "lr_start": 1e-4,
        "lr_end": 1e-6,
        "schedule_power": 1.0,
        "frames_per_step": 1,
        "axis_mode": "fixed",
        "axis_init": None,
        "axis_seed": 0,
        "dual_init": True,
        "axis_restarts": 0,
        "restart_frac": 0.25,
        "representation": "bh-nerf",
        "param_seed": 0,
        "mlp_hidden": 128,
        "mlp_layers": 4,
        "voxel_resolution": 32,
        "axis_lr_scale": 10.0,
        "deterministic": True,
    },
    "sweep": {
        "magnitudes": [0.0, 0.01, 0.1],
        "corr_lengths": [0.5, 1.0, 3.0],
        "seeds_per_cell": 5,
    },
    "seed": 0,
    "output_dir": "runs/default",
}


def _merge_strict(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"section {path or '<root>'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and defaults[key]:
            out[key] = _merge_strict(defaults[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = _merge_strict(DEFAULT_CONFIG, user)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    obs = cfg["observation"]
    if obs["mode"] not in ("image", "uv"):
        raise ConfigError(f"observation.mode must be image or uv, "
                          f"got {obs['mode']!r}")
    if obs["mode"] == "uv":
        catalog_file(obs["catalog"])  # existence check before any compute
    if cfg["timestamps"]["n_frames"] < 1:
        raise ConfigError("timestamps.n_frames must be >= 1")
    if cfg["timestamps"]["duration_minutes"] <= 0:
        raise ConfigError("timestamps.duration_minutes must be > 0")
    # constructor validation for the pieces with their own invariants
    system_from(cfg)
    camera_from(cfg)
    settings_from(cfg)
    axis_from(cfg)
    SolveConfig(**solver_kwargs(cfg))


def config_hash(cfg) -> str:
    """Digest of the scientific config; where outputs land is not part
    of what a run computes, so output_dir is excluded."""
    scrubbed = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(scrubbed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def catalog_file(name) -> Path:
    builtin = importlib.resources.files("bhtomo.data") / f"{name}.csv"
    if builtin.is_file():
        return Path(str(builtin))
    p = Path(name)
    if not p.is_file():
        raise ConfigError(f"array catalog {name!r} is neither a builtin "
                          f"catalog nor an existing CSV file")
    return p


def system_from(cfg) -> geometry.BlackHoleSystem:
    s = cfg["system"]
    return geometry.derive_scales(s["mass_solar"], s["spin"], s["distance_m"])


def camera_from(cfg) -> CameraSpec:
    c = cfg["camera"]
    return CameraSpec(view_direction=tuple(c["view_direction"]),
                      up_direction=tuple(c["up_direction"]),
                      image_pixels=int(c["image_pixels"]),
                      field_half_width=float(c["field_half_width"]),
                      start_radius=float(c["start_radius"]))


def settings_from(cfg) -> IntegratorSettings:
    return IntegratorSettings(**cfg["integrator"])


def axis_from(cfg) -> RotationAxis:
    return RotationAxis(tuple(cfg["dynamics"]["axis"]))


def profile_from(cfg) -> VelocityProfile:
    p = cfg["dynamics"]["profile"]
    if p["kind"] == "exact":
        return VelocityProfile()
    if p["kind"] == "perturbed":
        return sample_perturbation(p["magnitude"], p["corr_length"], p["seed"])
    raise ConfigError(f"unknown profile kind {p['kind']!r}")


def duration_geo_from(cfg) -> float:
    system = system_from(cfg)
    minutes = cfg["timestamps"]["duration_minutes"]
    return minutes * 60.0 / geometry.time_unit_seconds(system)


def solver_kwargs(cfg) -> dict:
    kw = dict(cfg["solver"])
    if kw["axis_init"] is not None:
        kw["axis_init"] = tuple(kw["axis_init"])
    kw["half_extent"] = cfg["grid"]["half_extent"]
    return kw


def cache_dir_for(cfg) -> Path:
    d = os.environ.get(CACHE_ENV) or str(Path(cfg["output_dir"]) / "cache")
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def get_bundle(cfg, log=print) -> RayBundle:
    camera = camera_from(cfg)
    settings = settings_from(cfg)
    if cfg["camera"]["euclidean"]:
        return euclidean_bundle(camera, settings)
    return build_bundle(camera, settings, cache_dir=cache_dir_for(cfg))


def write_manifest(outdir: Path, cfg, command: str, outputs: dict,
                   extra=None):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "version": __version__,
        "outputs": outputs,
    }
    if extra:
        manifest["extra"] = extra
    path = outdir / f"manifest_{command}.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _outdir(cfg, override=None) -> Path:
    out = Path(override) if override else Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_trace(cfg, args, log=print):
    out = _outdir(cfg, args.output)
    bundle = get_bundle(cfg, log)
    n_captured = int(np.sum(np.asarray(bundle.flags) == 1))
    n = bundle.n_pixels
    path = out / "bundle.bhrb"
    bundle.save(path)
    log(f"traced {n} rays: {n - n_captured} escaped, {n_captured} captured")
    log(f"bundle {bundle.content_hash[:16]} -> {path}")
    write_manifest(out, cfg, "trace",
                   {"bundle": str(path)},
                   extra={"bundle_hash": bundle.content_hash,
                          "captured": n_captured, "escaped": n - n_captured})
    return 0


def _truth_pieces(cfg):
    axis = axis_from(cfg)
    profile = profile_from(cfg)
    h = cfg["hotspots"]
    specs, field = synth.make_hotspots(
        h["count"], axis, h["orbit_radius"], h["std"], h["seed"],
        amplitude=h["amplitude"], flare_times=h["flare_times"],
        radial_jitter=h["radial_jitter"], profile=profile)
    return axis, profile, specs, field


def cmd_generate(cfg, args, log=print):
    out = _outdir(cfg, args.output)
    system = system_from(cfg)
    bundle = get_bundle(cfg, log)
    axis, profile, specs, field = _truth_pieces(cfg)
    grid = geometry.GridSpec(cfg["grid"]["resolution"],
                             cfg["grid"]["half_extent"])
    volume = synth.rasterize(field, grid)
    n_frames = cfg["timestamps"]["n_frames"]
    duration = duration_geo_from(cfg)
    obs_cfg = cfg["observation"]
    uv_frames, pixel_scale = None, 0.0
    if obs_cfg["mode"] == "uv":
        catalog = instrument.ArrayCatalog.from_csv(
            catalog_file(obs_cfg["catalog"]))
        t_geo = synth.frame_times_geometric(n_frames, duration)
        stamps = instrument.utc_ramp(obs_cfg["start_utc"], t_geo, system)
        uv_frames = instrument.project_baselines(
            catalog, obs_cfg["ra_hours"], obs_cfg["dec_deg"], stamps,
            t_geo=t_geo)
        pixel_scale = (obs_cfg["pixel_scale"] or
                       instrument.default_pixel_scale(system,
                                                      bundle.camera))
    obs, record = synth.make_dataset(field, axis, profile, bundle,
                                     n_frames, duration,
                                     mode=obs_cfg["mode"],
                                     uv_frames=uv_frames,
                                     pixel_scale=pixel_scale,
                                     noise_seed=obs_cfg["noise_seed"])
    vol_path = out / "truth.bhvl"
    synth.save_volume(vol_path, volume,
                      provenance={"config_hash": config_hash(cfg)})
    obs_path = out / "observations.jsonl"
    instrument.save_observations(obs_path, obs)
    record["hotspots"] = [{"center": list(s.center), "std": s.std,
                           "amplitude": s.amplitude,
                           "flare_time": s.flare_time} for s in specs]
    rec_path = out / "truth.json"
    with open(rec_path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    minutes = duration * geometry.time_unit_seconds(system) / 60.0
    log(f"dataset: {n_frames} frames over {minutes:.1f} minutes "
        f"({obs.n_measurements} measurements, mode={obs_cfg['mode']})")
    write_manifest(out, cfg, "generate",
                   {"volume": str(vol_path), "observations": str(obs_path),
                    "truth_record": str(rec_path)})
    return 0


def _load_dataset(dataset_dir: Path):
    obs = instrument.load_observations(dataset_dir / "observations.jsonl")
    with open(dataset_dir / "truth.json") as fh:
        record = json.load(fh)
    vol_path = dataset_dir / "truth.bhvl"
    truth = synth.load_volume(vol_path) if vol_path.exists() else None
    return obs, record, truth


def cmd_fit(cfg, args, log=print):
    out = _outdir(cfg, args.output)
    dataset_dir = Path(args.dataset) if args.dataset else out
    obs, record, truth = _load_dataset(dataset_dir)
    bundle = get_bundle(cfg, log)
    if bundle.content_hash != record["bundle_hash"]:
        raise ConfigError("configured camera/integrator does not match the "
                          "bundle used to generate the dataset")
    scfg = SolveConfig(**solver_kwargs(cfg))
    profile = VelocityProfile()  # reconstruction always assumes Keplerian flow
    true_axis = RotationAxis(tuple(record["true_axis_raw"]))
    if args.resume:
        state = solver_mod.load_state(args.resume)
        field = make_field(scfg, duration_geo=record["duration_geo"])
        run = Solver(scfg, obs, bundle, profile, field, state.axis_raw,
                     state=state)
        remaining = max(scfg.iterations - state.step_count, 0)
        run.run(remaining)
        states = [run.state]
        metrics = (solver_mod.evaluate(run.field, run.axis, truth, true_axis,
                                       final_chi2=run.full_chi2())
                   if truth is not None else None)
        best = run
    else:
        best, _, metrics, states = solve(scfg, obs, bundle, profile,
                                         truth_volume=truth,
                                         true_axis=true_axis,
                                         return_all=True)
    ckpt = out / "checkpoint.bhck"
    save_checkpoint(ckpt, best.field,
                    extra={"axis_raw": best.state.axis_raw.tolist(),
                           "config_hash": config_hash(cfg)})
    solver_mod.save_state(out / "solver_state.npz", best.state)
    traces = []
    for i, st in enumerate(states):
        tpath = out / f"loss_trace_{i}.csv"
        solver_mod.save_loss_trace(tpath, st)
        traces.append(str(tpath))
    outputs = {"checkpoint": str(ckpt), "loss_traces": traces,
               "solver_state": str(out / "solver_state.npz")}
    if metrics is not None:
        mpath = out / "metrics.json"
        solver_mod.save_metrics(mpath, metrics)
        outputs["metrics"] = str(mpath)
        log(f"fit done: psnr={metrics.psnr:.2f} dB, "
            f"axis_alignment={metrics.axis_alignment:+.4f}, "
            f"chi2={metrics.final_chi2:.4g}")
    else:
        log(f"fit done: final loss {best.state.loss_trace[-1]:.4g}")
    write_manifest(out, cfg, "fit", outputs)
    return 0


def _field_from_checkpoint(path, cfg, record):
    field, extra = load_checkpoint(path)
    axis = RotationAxis(tuple(extra["axis_raw"]))
    return field, axis


def cmd_evaluate(cfg, args, log=print):
    out = _outdir(cfg, args.output)
    dataset_dir = Path(args.dataset) if args.dataset else out
    obs, record, truth = _load_dataset(dataset_dir)
    if truth is None:
        raise ConfigError(f"no truth volume in {dataset_dir}")
    field, axis = _field_from_checkpoint(args.checkpoint, cfg, record)
    bundle = get_bundle(cfg, log)
    scfg = SolveConfig(**solver_kwargs(cfg))
    run = Solver(scfg, obs, bundle, VelocityProfile(), field,
                 axis.raw)
    metrics = solver_mod.evaluate(field, axis, truth,
                                  RotationAxis(tuple(record["true_axis_raw"])),
                                  final_chi2=run.full_chi2())
    mpath = out / "metrics.json"
    solver_mod.save_metrics(mpath, metrics)
    dof = obs.n_measurements * (2 if obs.kind == "uv" else 1)
    log(f"psnr={metrics.psnr:.2f} dB axis_alignment={metrics.axis_alignment:+.4f} "
        f"chi2/dof={metrics.final_chi2 / dof:.4f}")
    write_manifest(out, cfg, "evaluate", {"metrics": str(mpath)})
    return 0


def cmd_sweep(cfg, args, log=print):
    out = _outdir(cfg, args.output)
    bundle = get_bundle(cfg, log)
    grid = geometry.GridSpec(cfg["grid"]["resolution"],
                             cfg["grid"]["half_extent"])
    axis = axis_from(cfg)
    h = cfg["hotspots"]
    n_frames = cfg["timestamps"]["n_frames"]
    duration = duration_geo_from(cfg)

    def make_problem(m, length, seed):
        if m > 0:
            profile = sample_perturbation(m, length, seed)
        else:
            profile = VelocityProfile()
        specs, field = synth.make_hotspots(
            h["count"], axis, h["orbit_radius"], h["std"],
            h["seed"] + seed, amplitude=h["amplitude"],
            radial_jitter=h["radial_jitter"], profile=profile)
        obs, _ = synth.make_dataset(field, axis, profile, bundle,
                                    n_frames, duration, mode="image")
        truth = synth.rasterize(field, grid)
        return obs, bundle, truth, axis

    scfg = SolveConfig(**solver_kwargs(cfg))
    sw = cfg["sweep"]
    csv_path = out / "sweep.csv"
    rows = solver_mod.mismatch_sweep(make_problem, scfg, sw["magnitudes"],
                                     sw["corr_lengths"],
                                     seeds_per_cell=sw["seeds_per_cell"],
                                     csv_path=csv_path)
    failures = [r for r in rows if r["status"] != "ok"]
    for r in failures:
        log(f"warning: cell m={r['m']} l={r['corr_length']} "
            f"seed={r['seed']}: {r['status']}")
    means = solver_mod.sweep_cell_means(rows)
    summary = {f"m={m},l={l}": v for (m, l), v in means.items()}
    spath = out / "sweep_summary.json"
    with open(spath, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    log(f"sweep: {len(rows)} fits, {len(failures)} failures -> {csv_path}")
    write_manifest(out, cfg, "sweep",
                   {"table": str(csv_path), "summary": str(spath)})
    return 0


def cmd_export(cfg, args, log=print):
    out = _outdir(cfg, args.output)
    dataset_dir = Path(args.dataset) if args.dataset else out
    _, record, _ = _load_dataset(dataset_dir)
    field, axis = _field_from_checkpoint(args.checkpoint, cfg, record)
    outputs = {}
    if args.what == "volume":
        grid = geometry.GridSpec(cfg["grid"]["resolution"],
                                 cfg["grid"]["half_extent"])
        vol = solver_mod.rasterize_field(field, grid)
        from .field import VoxelEmission
        vpath = out / "recovered.bhvl"
        synth.save_volume(vpath, VoxelEmission(grid, values=vol),
                          provenance={"config_hash": config_hash(cfg),
                                      "checkpoint": str(args.checkpoint)})
        outputs["volume"] = str(vpath)
    elif args.what == "frames":
        bundle = get_bundle(cfg, log)
        t_geo = synth.frame_times_geometric(cfg["timestamps"]["n_frames"],
                                            record["duration_geo"])
        frames = render_sequence(bundle, field, axis, VelocityProfile(),
                                 t_geo)
        vmax = max(f.pixels.max() for f in frames) or None
        paths = []
        for i, frame in enumerate(frames):
            p = out / f"frame_{i:04d}.png"
            export_frame_png(frame, p, vmax=vmax)
            paths.append(str(p))
        outputs["frames"] = paths
        log(f"wrote {len(paths)} frames")
    elif args.what == "plots":
        outputs.update(_export_plots(cfg, args, out, field, axis, log))
    else:
        raise ConfigError(f"unknown export target {args.what!r}")
    write_manifest(out, cfg, "export", outputs)
    return 0


def _export_plots(cfg, args, out, field, axis, log):
    import csv as csv_mod

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outputs = {}
    state_path = Path(args.dataset or out) / "solver_state.npz"
    losses = None
    if state_path.exists():
        losses = solver_mod.load_state(state_path).loss_trace
    bundle = get_bundle(cfg, log)
    dataset_dir = Path(args.dataset) if args.dataset else out
    _, record, _ = _load_dataset(dataset_dir)
    t_geo = synth.frame_times_geometric(cfg["timestamps"]["n_frames"],
                                        record["duration_geo"])
    frames = render_sequence(bundle, field, axis, VelocityProfile(), t_geo)
    flux = [float(f.pixels.sum()) for f in frames]
    fpath = out / "flux_curve.csv"
    with open(fpath, "w", newline="") as fh:
        w = csv_mod.writer(fh)
        w.writerow(["t_geo", "flux"])
        w.writerows(zip(t_geo, flux))
    outputs["flux_csv"] = str(fpath)
    fig, axes = plt.subplots(1, 2 if losses else 1, figsize=(9, 3.2))
    axes = np.atleast_1d(axes)
    axes[0].plot(t_geo, flux)
    axes[0].set_xlabel("time (r_g/c)")
    axes[0].set_ylabel("total flux")
    if losses:
        lpath = out / "loss_curve.csv"
        with open(lpath, "w", newline="") as fh:
            w = csv_mod.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(enumerate(losses))
        outputs["loss_csv"] = str(lpath)
        axes[1].semilogy(losses)
        axes[1].set_xlabel("step")
        axes[1].set_ylabel("loss")
    ppath = out / "plots.png"
    fig.tight_layout()
    fig.savefig(ppath, dpi=120)
    plt.close(fig)
    outputs["plots_png"] = str(ppath)
    return outputs


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bhtomo",
        description="Black-hole emission tomography pipeline")
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--output", help="override config output_dir")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--threads", type=int,
                        help="cap worker threads (numpy/BLAS)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic frame ordering")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("trace", help="trace and cache the ray bundle")
    sub.add_parser("generate", help="synthesize a ground-truth dataset")
    p_fit = sub.add_parser("fit", help="reconstruct from a dataset")
    p_fit.add_argument("--dataset", help="dataset directory (default: output)")
    p_fit.add_argument("--resume", help="solver_state.npz to continue from")
    p_eval = sub.add_parser("evaluate", help="score a checkpoint vs truth")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset")
    sub.add_parser("sweep", help="velocity-mismatch robustness study")
    p_exp = sub.add_parser("export", help="export artifacts from a checkpoint")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--dataset")
    p_exp.add_argument("what", choices=["volume", "frames", "plots"])
    return parser


COMMANDS = {"trace": cmd_trace, "generate": cmd_generate, "fit": cmd_fit,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.output is not None:
            cfg["output_dir"] = args.output
        if args.deterministic:
            cfg["solver"]["deterministic"] = True
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
