"""Command-line pipeline: simulate, reconstruct, positions, assemble, calibrate,
evaluate, and the chained pipeline.

Every stage reads and writes the on-disk formats, so stages can be rerun
independently, and each emits a ``report.json`` with its configuration echo,
wall time, and key metrics. Exit codes: 0 ok, 2 configuration, 3 physics
validation, 4 disconnected position graph, 5 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field as dc_field
from importlib import resources
from pathlib import Path

import numpy as np

from . import assemble as asm
from . import calibrate as cal
from . import engine, register, simulate
from .errors import (
    ConfigError,
    DivergenceError,
    EngineError,
    GraphDisconnectedError,
    PhysicsError,
)
from .field import ComplexField, Geometry, disk, gaussian_blur, read_cfield, write_cfield

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PHYSICS = 3
EXIT_GRAPH = 4
EXIT_DIVERGENCE = 5


@dataclass
class RunReport:
    """One per stage: config echo, wall time, key metrics, output paths."""

    stage: str
    config: dict
    wall_time_s: float = 0.0
    metrics: dict = dc_field(default_factory=dict)
    outputs: dict = dc_field(default_factory=dict)

    def write(self, directory) -> None:
        path = Path(directory) / "report.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str)
                        + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# configuration loading

def _key(required=False, default=None, schema=None):
    return {"required": required, "default": default, "schema": schema}


PROBE_SCHEMA = {
    "kind": _key(default="aperture"),
    "diameter_m": _key(required=True),
    "defocus_m": _key(default=0.0),
    "focal_m": _key(default=None),
}

SIMULATE_SCHEMA = {
    "version": _key(required=True),
    "wavelength_m": _key(required=True),
    "z_sample_to_modulator_m": _key(required=True),
    "z_modulator_to_detector_m": _key(required=True),
    "detector_pitch_m": _key(required=True),
    "frame_px": _key(default=128),
    "sample_px": _key(default=512),
    "photons": _key(default=None),
    "seed": _key(default=0),
    "probe": _key(required=True, schema=PROBE_SCHEMA),
    "sample": _key(default={}, schema={
        "kind": _key(default="maze"),
        "cells": _key(default=32),
        "wall_px": _key(default=2),
        "amplitude_range": _key(default=[0.3, 1.0]),
        "phase_range": _key(default=[-0.5, 0.5]),
        "smooth_px": _key(default=0.7),
        "amplitude_path": _key(default=None),
        "phase_path": _key(default=None),
    }),
    "modulator": _key(default={}, schema={
        "kind": _key(default="random"),
        "feature_px": _key(default=4),
        "phase_depth_rad": _key(default=float(np.pi)),
        "period_px": _key(default=16.0),
    }),
    "scan": _key(required=True, schema={
        "rows": _key(required=True),
        "cols": _key(required=True),
        "step_px": _key(default=None),
        "overlap": _key(default=None),
        "jitter_px": _key(default=0.0),
    }),
    "drift": _key(default={}, schema={
        "kind": _key(default="none"),
        "amplitude_px": _key(default=0.0),
        "seed": _key(default=0),
    }),
}

RECONSTRUCT_SCHEMA = {
    "version": _key(default=1),
    "mode": _key(default="exitwave"),
    "iterations": _key(default=300),
    "beta_object": _key(default=0.9),
    "beta_probe": _key(default=0.9),
    "beta_modulator": _key(default=0.9),
    "division_epsilon": _key(default=1e-3),
    "update_modulator": _key(default=False),
    "update_probe": _key(default=False),
    "support": _key(default={}, schema={
        "radius_px": _key(default=None),
        "margin_fraction": _key(default=0.1),
        "outside_feedback": _key(default=0.0),
    }),
    "drift_cycles": _key(default=1),
    "drift_smooth_px": _key(default=0.0),
    "early_stop": _key(default=False),
    "seed": _key(default=0),
    "grid_stride": _key(default=1),
    "modulator_path": _key(default=None),
    "probe_path": _key(default=None),
}

POSITIONS_SCHEMA = {
    "version": _key(default=1),
    "strategy": _key(default="all_pairs"),
    "min_confidence": _key(default=0.05),
    "min_peak_ratio": _key(default=1.2),
    "precondition": _key(default=False),
    "trim_px": _key(default=2),
    "upsample": _key(default=50),
    "use_magnitude": _key(default=False),
}

ASSEMBLE_SCHEMA = {
    "version": _key(default=1),
    "sweeps": _key(default=100),
    "beta_object": _key(default=0.9),
    "beta_probe": _key(default=0.9),
    "update_probe": _key(default=False),
    "division_epsilon": _key(default=1e-3),
    "feather_px": _key(default=8.0),
    "seed": _key(default=0),
}

CALIBRATE_SCHEMA = {
    "version": _key(default=1),
    "wavelength_m": _key(default=6.328e-07),
    "z_sample_to_modulator_m": _key(default=0.06),
    "z_modulator_to_detector_m": _key(default=0.03),
    "detector_pitch_m": _key(default=6.5e-06),
    "frame_px": _key(default=128),
    "photons": _key(default=None),
    "seed": _key(default=0),
    "probe": _key(default={"kind": "divergent", "diameter_m": 0.001,
                           "defocus_m": 0.002, "focal_m": -0.05},
                  schema=PROBE_SCHEMA),
    "diffuser": _key(default={}, schema={
        "phase_depth_rad": _key(default=float(np.pi)),
        "blur_px": _key(default=1.0),
        "seed": _key(default=17),
    }),
    "modulator": _key(default={}, schema={
        "kind": _key(default="grating"),
        "feature_px": _key(default=4),
        "phase_depth_rad": _key(default=1.0),
        "period_px": _key(default=8.0),
    }),
    "translations": _key(default={}, schema={
        "count": _key(default=20),
        "extent_px": _key(default=20.0),
        "seed": _key(default=5),
    }),
    "iterations": _key(default=400),
    "beta_modulator": _key(default=0.9),
    "phase_only": _key(default=True),
    "illumination_threshold": _key(default=0.1),
}

EVALUATE_SCHEMA = {
    "version": _key(default=1),
    "converged_threshold": _key(default=1e-3),
}

PIPELINE_SCHEMA = {
    "version": _key(required=True),
    "stages": _key(default=["simulate", "reconstruct", "positions", "assemble", "evaluate"]),
    "simulate": _key(required=True, schema=SIMULATE_SCHEMA),
    "reconstruct": _key(default={}, schema=RECONSTRUCT_SCHEMA),
    "positions": _key(default={}, schema=POSITIONS_SCHEMA),
    "assemble": _key(default={}, schema=ASSEMBLE_SCHEMA),
    "evaluate": _key(default={}, schema=EVALUATE_SCHEMA),
}


def check_config(cfg: dict, schema: dict, path: str = "") -> dict:
    """Validate against a schema: unknown keys are errors, defaults fill gaps."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    unknown = sorted(set(cfg) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key: {path}{unknown[0]}")
    out = {}
    for key, spec in schema.items():
        if key in cfg:
            value = cfg[key]
        elif spec["required"]:
            raise ConfigError(f"missing required config key: {path}{key}")
        else:
            value = spec["default"]
        if spec["schema"] is not None and value is not None:
            if key not in cfg and isinstance(value, dict):
                value = dict(value)
            value = check_config(value, spec["schema"], path=f"{path}{key}.")
        out[key] = value
    return out


def load_config(source, schema: dict) -> dict:
    """Load a config from a path, a bundled name, or a dict."""
    if isinstance(source, dict):
        return check_config(source, schema)
    path = Path(source)
    if not path.exists():
        bundled = resources.files("modscan.configs") / str(source)
        if bundled.is_file():
            return check_config(json.loads(bundled.read_text()), schema)
        raise ConfigError(f"config file not found: {source}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: line {err.lineno}: {err.msg}")
    return check_config(raw, schema)


def _prepare_out(out, overwrite: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {out} exists; pass --overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _positive(cfg: dict, keys) -> None:
    for key in keys:
        v = cfg[key]
        if not (isinstance(v, (int, float)) and np.isfinite(v) and v > 0):
            raise ConfigError(f"config key {key} must be a positive number, got {v!r}")


# ---------------------------------------------------------------------------
# stage implementations

def _geometry_from(cfg: dict) -> Geometry:
    _positive(cfg, ["wavelength_m", "z_sample_to_modulator_m",
                    "z_modulator_to_detector_m", "detector_pitch_m"])
    n = cfg["frame_px"]
    pitch = cfg["wavelength_m"] * cfg["z_modulator_to_detector_m"] / (n * cfg["detector_pitch_m"])
    return Geometry(wavelength=cfg["wavelength_m"],
                    z_sample_to_modulator=cfg["z_sample_to_modulator_m"],
                    z_modulator_to_detector=cfg["z_modulator_to_detector_m"],
                    detector_pitch=cfg["detector_pitch_m"],
                    sample_plane_pitch=pitch)


def _build_scene(cfg: dict):
    geo = _geometry_from(cfg)
    n = cfg["frame_px"]
    pcfg = cfg["probe"]
    probe = simulate.generate_probe(geo, (n, n), pcfg["kind"], pcfg["diameter_m"],
                                    pcfg["defocus_m"], pcfg["focal_m"])
    scfg = cfg["sample"]
    sample = simulate.generate_sample(scfg["kind"], cfg["sample_px"],
                                      tuple(scfg["amplitude_range"]),
                                      tuple(scfg["phase_range"]),
                                      pitch=geo.sample_plane_pitch,
                                      cells=scfg["cells"], wall_px=scfg["wall_px"],
                                      seed=cfg["seed"], smooth_px=scfg["smooth_px"],
                                      amplitude_path=scfg["amplitude_path"],
                                      phase_path=scfg["phase_path"])
    mcfg = cfg["modulator"]
    modulator = simulate.generate_modulator((n, n), geo.sample_plane_pitch,
                                            mcfg["kind"], mcfg["feature_px"],
                                            mcfg["phase_depth_rad"], mcfg["period_px"],
                                            seed=cfg["seed"] + 1)
    return geo, probe, sample, modulator


def cmd_simulate(config, out, seed: int | None = None, overwrite: bool = False,
                 threads: int = 1) -> RunReport:
    """Synthesize a scanning dataset directory from a scene config."""
    cfg = load_config(config, SIMULATE_SCHEMA)
    if seed is not None:
        cfg["seed"] = int(seed)
    t0 = time.perf_counter()
    out = _prepare_out(out, overwrite)
    geo, probe, sample, modulator = _build_scene(cfg)
    scan = cfg["scan"]
    d90 = simulate.probe_power_diameter(probe)
    if scan["step_px"] is not None:
        step = float(scan["step_px"])
    elif scan["overlap"] is not None:
        step = simulate.step_for_overlap(d90, float(scan["overlap"]))
    else:
        raise ConfigError("missing required config key: scan.step_px (or scan.overlap)")
    plan = simulate.make_scan_plan((scan["rows"], scan["cols"]), step,
                                   scan["jitter_px"], seed=cfg["seed"] + 2,
                                   sample_size=cfg["sample_px"],
                                   probe_diameter_px=d90)
    dcfg = cfg["drift"]
    drift = simulate.DriftModel(kind=dcfg["kind"], amplitude=dcfg["amplitude_px"],
                                seed=dcfg["seed"])
    pcfg = cfg["probe"]
    dataset = simulate.synthesize_dataset(
        sample, probe, modulator, plan, drift, geo, photons=cfg["photons"],
        seed=cfg["seed"], grid_shape=(scan["rows"], scan["cols"]),
        probe_meta={"kind": pcfg["kind"], "diameter_m": pcfg["diameter_m"],
                    "defocus_m": pcfg["defocus_m"], "focal_m": pcfg["focal_m"]})
    simulate.save_dataset(dataset, out, overwrite=True)
    overlap = simulate.overlap_ratio(plan, d90)
    report = RunReport(stage="simulate", config=cfg,
                       wall_time_s=time.perf_counter() - t0,
                       metrics={"n_frames": dataset.n_frames,
                                "mean_overlap": overlap["mean"],
                                "step_px": step,
                                "probe_diameter_90_px": d90},
                       outputs={"dataset": str(out)})
    report.write(out)
    return report


def _load_recon_inputs(dataset_dir, cfg):
    dataset = simulate.load_dataset(dataset_dir)
    indices = None
    if cfg["grid_stride"] > 1:
        if dataset.grid_shape is None:
            raise ConfigError("grid_stride needs a dataset with a recorded grid shape")
        indices = simulate.grid_subset_indices(dataset.grid_shape, cfg["grid_stride"])
        dataset = simulate.subset_dataset(dataset, indices)
    probe_init = read_cfield(cfg["probe_path"], "probe") if cfg["probe_path"] else None
    modulator_init = (read_cfield(cfg["modulator_path"], "modulator")
                      if cfg["modulator_path"] else None)
    return dataset, indices, probe_init, modulator_init


def cmd_reconstruct(dataset_dir, out, config=None, overwrite: bool = False,
                    threads: int = 1) -> RunReport:
    """Recover per-frame waves/objects plus drift; write the recon directory."""
    cfg = load_config(config or {}, RECONSTRUCT_SCHEMA)
    t0 = time.perf_counter()
    out = _prepare_out(out, overwrite)
    dataset, indices, probe_init, modulator_init = _load_recon_inputs(dataset_dir, cfg)
    rconf = engine.ReconConfig(
        mode=cfg["mode"], iterations=cfg["iterations"],
        beta_object=cfg["beta_object"], beta_probe=cfg["beta_probe"],
        beta_modulator=cfg["beta_modulator"],
        support=engine.SupportConfig(**cfg["support"]),
        division_epsilon=cfg["division_epsilon"],
        update_modulator=cfg["update_modulator"], update_probe=cfg["update_probe"],
        seed=cfg["seed"], early_stop=cfg["early_stop"],
        drift_cycles=cfg["drift_cycles"], drift_smooth_px=cfg["drift_smooth_px"])

    pitch = dataset.geometry.sample_plane_pitch
    if rconf.mode == "exitwave":
        state, drift, drift_conf = engine.run_exitwave_with_drift(
            dataset, rconf, probe_init, modulator_init, threads=threads)
        probe_est, objects = engine.separate_probe_object(
            state.exit_waves, drift, rconf.division_epsilon, state.support)
        state.objects = objects
        probe_out = ComplexField(probe_est, pitch, "probe")
    else:
        state = engine.run(dataset, rconf, probe_init, modulator_init, threads=threads)
        drift = np.zeros((dataset.n_frames, 2))
        state.drift = drift
        probe_out = state.probe

    support_radius = float(np.sqrt(state.support.sum() / np.pi))
    write_cfield(out / "probe.cfield", probe_out)
    write_cfield(out / "modulator.cfield", state.modulator)
    for k in range(dataset.n_frames):
        if rconf.mode == "exitwave":
            write_cfield(out / f"exit_wave_{k:04d}.cfield",
                         ComplexField(state.exit_waves[k], pitch, "exit wave"))
        write_cfield(out / f"object_{k:04d}.cfield",
                     ComplexField(state.objects[k], pitch, "object"))
    simulate.write_positions_csv(out / "drift.csv", drift)
    state_doc = {
        "mode": rconf.mode,
        "config": cfg,
        "n_frames": dataset.n_frames,
        "frame_indices": indices,
        "support_radius_px": support_radius,
        "residuals": state.residuals,
    }
    (out / "state.json").write_text(json.dumps(state_doc, indent=2, sort_keys=True)
                                    + "\n", encoding="utf-8", newline="\n")
    report = RunReport(stage="reconstruct", config=cfg,
                       wall_time_s=time.perf_counter() - t0,
                       metrics={"final_residual": state.residuals[-1],
                                "n_frames": dataset.n_frames,
                                "support_radius_px": support_radius,
                                "max_drift_px": float(np.abs(drift).max())},
                       outputs={"recon": str(out)})
    report.write(out)
    return report


def _load_recon_dir(recon_dir):
    recon_dir = Path(recon_dir)
    state_path = recon_dir / "state.json"
    if not state_path.exists():
        raise ConfigError(f"{recon_dir} is not a reconstruction directory")
    doc = json.loads(state_path.read_text(encoding="utf-8"))
    n = doc["n_frames"]
    objects = np.stack([read_cfield(recon_dir / f"object_{k:04d}.cfield").data
                        for k in range(n)])
    drift = simulate.read_positions_csv(recon_dir / "drift.csv")
    probe = read_cfield(recon_dir / "probe.cfield", "probe")
    modulator = read_cfield(recon_dir / "modulator.cfield", "modulator")
    support = disk(objects.shape[1:], doc["support_radius_px"])
    return doc, objects, drift, probe, modulator, support


def cmd_positions(recon_dir, out, config=None, overwrite: bool = False,
                  threads: int = 1) -> RunReport:
    """Register object patches pairwise and solve for global positions."""
    cfg = load_config(config or {}, POSITIONS_SCHEMA)
    t0 = time.perf_counter()
    out = _prepare_out(out, overwrite)
    doc, objects, drift, probe, modulator, support = _load_recon_dir(recon_dir)
    n = len(objects)
    edges = register.build_edges(n, cfg["strategy"])
    rconf = register.RegisterConfig(
        precondition=cfg["precondition"], trim_px=cfg["trim_px"],
        upsample=cfg["upsample"], min_confidence=cfg["min_confidence"],
        min_peak_ratio=cfg["min_peak_ratio"], use_magnitude=cfg["use_magnitude"])
    graph = register.measure_pairwise_shifts(objects, edges, rconf, support=support)
    positions = register.solve_positions(graph)
    simulate.write_positions_csv(out / "positions.csv", positions)
    lines = ["i,j,dy,dx,confidence,peak_ratio,accepted"]
    for e in graph.edges:
        lines.append(f"{e.frame_i},{e.frame_j},{float(e.delta[0])!r},"
                     f"{float(e.delta[1])!r},{float(e.confidence)!r},"
                     f"{float(min(e.peak_ratio, 1e9))!r},{int(e.accepted)}")
    (out / "edges.csv").write_text("\n".join(lines) + "\n", encoding="utf-8",
                                   newline="\n")
    accepted = graph.accepted()
    report = RunReport(stage="positions", config=cfg,
                       wall_time_s=time.perf_counter() - t0,
                       metrics={"n_frames": n, "edges_total": len(graph.edges),
                                "edges_accepted": len(accepted),
                                "mean_confidence": float(np.mean([e.confidence
                                                                  for e in accepted]))},
                       outputs={"positions": str(out)})
    report.write(out)
    return report


def cmd_assemble(dataset_dir, positions_dir, recon_dir, out, config=None,
                 overwrite: bool = False, threads: int = 1) -> RunReport:
    """Stitch the objects at the solved positions and refine against the data."""
    cfg = load_config(config or {}, ASSEMBLE_SCHEMA)
    t0 = time.perf_counter()
    out = _prepare_out(out, overwrite)
    doc, objects, drift, probe, modulator, support = _load_recon_dir(recon_dir)
    positions = simulate.read_positions_csv(Path(positions_dir) / "positions.csv")
    dataset = simulate.load_dataset(dataset_dir)
    if doc.get("frame_indices"):
        dataset = simulate.subset_dataset(dataset, doc["frame_indices"])
    stitched = asm.stitch_initial(objects, positions, support, cfg["feather_px"])
    residuals = []
    if cfg["sweeps"] > 0:
        rconf = asm.RefineConfig(sweeps=cfg["sweeps"], beta_object=cfg["beta_object"],
                                 beta_probe=cfg["beta_probe"],
                                 update_probe=cfg["update_probe"],
                                 division_epsilon=cfg["division_epsilon"],
                                 seed=cfg["seed"], feather_px=cfg["feather_px"])
        stitched, probe, residuals = asm.epie_refine(
            dataset, positions, probe, modulator, rconf, canvas_init=stitched,
            drift=drift, support=support)
    pitch = dataset.geometry.sample_plane_pitch
    write_cfield(out / "object_full.cfield", ComplexField(stitched.canvas, pitch, "object"))
    asm.save_object_images(out, stitched.canvas)
    (out / "residuals.csv").write_text(
        "\n".join(["sweep,residual"] + [f"{i},{r!r}" for i, r in enumerate(residuals)])
        + "\n", encoding="utf-8", newline="\n")
    report = RunReport(stage="assemble", config=cfg,
                       wall_time_s=time.perf_counter() - t0,
                       metrics={"canvas_shape": list(stitched.canvas.shape),
                                "final_residual": residuals[-1] if residuals else None},
                       outputs={"assemble": str(out),
                                "canvas_origin": list(stitched.origin)})
    report.write(out)
    return report


def cmd_calibrate(out, config=None, dataset_dir=None, probe_path=None,
                  overwrite: bool = False, threads: int = 1) -> RunReport:
    """Recover the modulator from a diffuser-translation dataset.

    Without ``dataset_dir`` the stage synthesizes its own calibration dataset
    from the config (writing it under <out>/dataset); the probe prior then
    comes from the config scene, else from ``probe_path``.
    """
    cfg = load_config(config or {}, CALIBRATE_SCHEMA)
    t0 = time.perf_counter()
    out = _prepare_out(out, overwrite)
    truth_modulator = None
    if dataset_dir is None:
        geo = _geometry_from(cfg)
        n = cfg["frame_px"]
        pcfg = cfg["probe"]
        probe = simulate.generate_probe(geo, (n, n), pcfg["kind"], pcfg["diameter_m"],
                                        pcfg["defocus_m"], pcfg["focal_m"])
        dcfg = cfg["diffuser"]
        rng = np.random.default_rng(dcfg["seed"])
        phase = gaussian_blur(rng.standard_normal((n, n)), dcfg["blur_px"])
        scale = np.abs(phase).max()
        if scale > 0:
            phase = phase / scale * dcfg["phase_depth_rad"]
        diffuser = ComplexField(np.exp(1j * phase), geo.sample_plane_pitch, "diffuser")
        mcfg = cfg["modulator"]
        modulator = simulate.generate_modulator((n, n), geo.sample_plane_pitch,
                                                mcfg["kind"], mcfg["feature_px"],
                                                mcfg["phase_depth_rad"],
                                                mcfg["period_px"], seed=cfg["seed"] + 1)
        tcfg = cfg["translations"]
        trans = np.random.default_rng(tcfg["seed"]).uniform(
            -tcfg["extent_px"], tcfg["extent_px"], size=(tcfg["count"], 2))
        trans[0] = 0.0
        plan = cal.CalibrationPlan(translations=trans, probe_prior=probe)
        dataset = cal.synthesize_calibration_dataset(probe, diffuser, modulator, plan,
                                                     geo, photons=cfg["photons"],
                                                     seed=cfg["seed"])
        simulate.save_dataset(dataset, out / "dataset", overwrite=True)
        truth_modulator = modulator
    else:
        dataset = simulate.load_dataset(dataset_dir)
        if probe_path is None:
            raise ConfigError("calibration from a dataset needs --probe (the coarse prior)")
        probe = read_cfield(probe_path, "probe")
        if dataset.truth is not None:
            truth_modulator = dataset.truth.modulator

    rconf = engine.ReconConfig(mode="calibrate", iterations=cfg["iterations"],
                               beta_modulator=cfg["beta_modulator"],
                               update_modulator=True,
                               phase_only_modulator=cfg["phase_only"])
    mod_est, diffusers, state = cal.run_calibration(dataset, probe, rconf,
                                                    threads=threads)
    write_cfield(out / "modulator.cfield", mod_est)
    pitch = dataset.geometry.sample_plane_pitch
    for k in range(len(diffusers)):
        write_cfield(out / f"diffuser_{k:04d}.cfield",
                     ComplexField(diffusers[k], pitch, "diffuser"))
    metrics = {"final_residual": state.residuals[-1], "n_frames": dataset.n_frames}
    if truth_modulator is not None:
        mask = cal.illumination_mask(probe, dataset.geometry,
                                     cfg["illumination_threshold"])
        score = cal.score_modulator(mod_est, truth_modulator, mask)
        metrics.update({"rho": score["rho"], "phase_rms": score["phase_rms"],
                        "period_px": cal.dominant_period_px(mod_est, mask)})
    (out / "calibration_report.json").write_text(
        json.dumps({"metrics": metrics, "residuals": state.residuals},
                   indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")
    report = RunReport(stage="calibrate", config=cfg,
                       wall_time_s=time.perf_counter() - t0, metrics=metrics,
                       outputs={"calibrate": str(out)})
    report.write(out)
    return report


def _object_nrmse(canvas, origin, positions, support_radius, sample_field):
    """NRMSE of the assembled object against the true sample, scanned region only."""
    sy, sx = sample_field.shape
    ch, cw = canvas.shape
    if ch > sy or cw > sx:
        raise ConfigError("assembled canvas is larger than the truth sample")
    scanned = np.zeros(canvas.shape)
    for py, px in positions:
        scanned = np.maximum(scanned, disk(canvas.shape, support_radius,
                                           center=(origin[0] + py, origin[1] + px)))
    emb_canvas = np.zeros((sy, sx), complex)
    emb_mask = np.zeros((sy, sx))
    y0 = (sy - ch) // 2
    x0 = (sx - cw) // 2
    emb_canvas[y0:y0 + ch, x0:x0 + cw] = canvas
    emb_mask[y0:y0 + ch, x0:x0 + cw] = scanned
    mask = emb_mask > 0
    truth = sample_field.data
    est = register.subpixel_shift_estimate(np.where(mask, truth, 0),
                                           np.where(mask, emb_canvas, 0),
                                           upsample=20, mask=mask)
    from .field import fourier_shift
    aligned_truth = fourier_shift(truth, tuple(est.delta))
    _, nrmse = asm.global_phase_align(emb_canvas, aligned_truth, mask)
    return nrmse, tuple(est.delta)


def cmd_evaluate(dataset_dir, recon_dir, positions_dir, out, assembled_dir=None,
                 config=None, overwrite: bool = False) -> RunReport:
    """Score recovered positions, drift, and object against the stored truth."""
    cfg = load_config(config or {}, EVALUATE_SCHEMA)
    t0 = time.perf_counter()
    dataset = simulate.load_dataset(dataset_dir)
    if dataset.truth is None:
        raise ConfigError(f"dataset {dataset_dir} carries no ground truth to evaluate")
    out = _prepare_out(out, overwrite)
    doc = json.loads((Path(recon_dir) / "state.json").read_text(encoding="utf-8"))
    if doc.get("frame_indices"):
        dataset = simulate.subset_dataset(dataset, doc["frame_indices"])
    drift_est = simulate.read_positions_csv(Path(recon_dir) / "drift.csv")
    positions = simulate.read_positions_csv(Path(positions_dir) / "positions.csv")
    compensated = positions - drift_est
    scores = register.score_positions(compensated, dataset.truth.plan.positions)

    drift_err = drift_est - dataset.truth.drift
    drift_err -= drift_err.mean(axis=0)
    drift_rms = float(np.sqrt((drift_err**2).sum(axis=1).mean()))

    d90 = simulate.probe_power_diameter(dataset.truth.probe)
    overlap = simulate.overlap_ratio(dataset.truth.plan, d90)
    residuals = doc.get("residuals", [])
    converged = bool(residuals and residuals[-1] <= cfg["converged_threshold"])

    metrics = {
        "mean_position_error_px": scores["mean"],
        "std_position_error_px": scores["std"],
        "rms_position_error_px": scores["rms"],
        "drift_rms_error_px": drift_rms,
        "mean_overlap": overlap["mean"],
        "n_frames": dataset.n_frames,
        "converged": converged,
    }
    if assembled_dir is not None:
        areport = json.loads((Path(assembled_dir) / "report.json").read_text())
        origin = areport["outputs"]["canvas_origin"]
        canvas = read_cfield(Path(assembled_dir) / "object_full.cfield").data
        nrmse, offset = _object_nrmse(canvas, origin, positions,
                                      doc["support_radius_px"], dataset.truth.sample)
        metrics["object_nrmse"] = nrmse

    err_lines = ["frame,dy,dx,magnitude"]
    for k, (vec, mag) in enumerate(zip(scores["errors"], scores["magnitudes"])):
        err_lines.append(f"{k},{float(vec[0])!r},{float(vec[1])!r},{float(mag)!r}")
    (out / "errors.csv").write_text("\n".join(err_lines) + "\n", encoding="utf-8",
                                    newline="\n")
    sweep_lines = ["overlap_ratio,mean_err_px,std_err_px,n_frames,converged"]
    sweep_lines.append(f"{overlap['mean']!r},{scores['mean']!r},{scores['std']!r},"
                       f"{dataset.n_frames},{int(converged)}")
    (out / "sweep.csv").write_text("\n".join(sweep_lines) + "\n", encoding="utf-8",
                                   newline="\n")
    report = RunReport(stage="evaluate", config=cfg,
                       wall_time_s=time.perf_counter() - t0, metrics=metrics,
                       outputs={"evaluate": str(out)})
    report.write(out)
    return report


def cmd_pipeline(config, out, seed: int | None = None, overwrite: bool = False,
                 threads: int = 1) -> RunReport:
    """Chain the stages, each writing its own directory under ``out``."""
    cfg = load_config(config, PIPELINE_SCHEMA)
    t0 = time.perf_counter()
    out = _prepare_out(out, overwrite)
    stages = cfg["stages"]
    metrics = {}
    if "simulate" in stages:
        rep = cmd_simulate(cfg["simulate"], out / "dataset", seed=seed,
                           overwrite=overwrite or True, threads=threads)
        metrics["mean_overlap"] = rep.metrics["mean_overlap"]
    if "reconstruct" in stages:
        rep = cmd_reconstruct(out / "dataset", out / "recon", cfg["reconstruct"],
                              overwrite=True, threads=threads)
        metrics["final_residual"] = rep.metrics["final_residual"]
    if "positions" in stages:
        rep = cmd_positions(out / "recon", out / "positions", cfg["positions"],
                            overwrite=True, threads=threads)
        metrics["edges_accepted"] = rep.metrics["edges_accepted"]
    if "assemble" in stages:
        rep = cmd_assemble(out / "dataset", out / "positions", out / "recon",
                           out / "assemble", cfg["assemble"], overwrite=True,
                           threads=threads)
        metrics["assemble_residual"] = rep.metrics["final_residual"]
    if "evaluate" in stages:
        rep = cmd_evaluate(out / "dataset", out / "recon", out / "positions",
                           out / "evaluate",
                           assembled_dir=(out / "assemble") if "assemble" in stages else None,
                           config=cfg["evaluate"], overwrite=True)
        metrics.update(rep.metrics)
    report = RunReport(stage="pipeline", config=cfg,
                       wall_time_s=time.perf_counter() - t0, metrics=metrics,
                       outputs={"pipeline": str(out)})
    report.write(out)
    return report


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modscan",
                                     description="modulated scanning diffraction imaging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="JSON config file (or bundled name like optical_a3.json)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1, help="worker cap")
        p.add_argument("--overwrite", action="store_true",
                       help="allow re-running over existing outputs")

    p = sub.add_parser("simulate", help="synthesize a dataset")
    common(p, config_required=True)

    p = sub.add_parser("reconstruct", help="per-frame wavefront recovery")
    p.add_argument("--dataset", required=True)
    common(p)

    p = sub.add_parser("positions", help="register objects and solve positions")
    p.add_argument("--recon", required=True)
    common(p)

    p = sub.add_parser("assemble", help="stitch and refine the full object")
    p.add_argument("--dataset", required=True)
    p.add_argument("--positions", required=True)
    p.add_argument("--recon", required=True)
    common(p)

    p = sub.add_parser("calibrate", help="recover the modulator transmission")
    p.add_argument("--dataset", default=None)
    p.add_argument("--probe", default=None, help="coarse probe prior (.cfield)")
    common(p)

    p = sub.add_parser("evaluate", help="score a run against stored truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--positions", required=True)
    p.add_argument("--assembled", default=None)
    common(p)

    p = sub.add_parser("pipeline", help="run all stages in sequence")
    common(p, config_required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            report = cmd_simulate(args.config, args.out, seed=args.seed,
                                  overwrite=args.overwrite, threads=args.threads)
        elif args.command == "reconstruct":
            report = cmd_reconstruct(args.dataset, args.out, args.config,
                                     overwrite=args.overwrite, threads=args.threads)
        elif args.command == "positions":
            report = cmd_positions(args.recon, args.out, args.config,
                                   overwrite=args.overwrite, threads=args.threads)
        elif args.command == "assemble":
            report = cmd_assemble(args.dataset, args.positions, args.recon, args.out,
                                  args.config, overwrite=args.overwrite,
                                  threads=args.threads)
        elif args.command == "calibrate":
            report = cmd_calibrate(args.out, args.config, dataset_dir=args.dataset,
                                   probe_path=args.probe, overwrite=args.overwrite,
                                   threads=args.threads)
        elif args.command == "evaluate":
            report = cmd_evaluate(args.dataset, args.recon, args.positions, args.out,
                                  assembled_dir=args.assembled, config=args.config,
                                  overwrite=args.overwrite)
        else:
            report = cmd_pipeline(args.config, args.out, seed=args.seed,
                                  overwrite=args.overwrite, threads=args.threads)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except PhysicsError as err:
        print(f"physics validation failed: {err}", file=sys.stderr)
        return EXIT_PHYSICS
    except GraphDisconnectedError as err:
        print(f"position graph error: {err}", file=sys.stderr)
        return EXIT_GRAPH
    except (DivergenceError, EngineError) as err:
        print(f"solver diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, OSError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    summary = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in report.metrics.items())
    print(f"{report.stage}: {summary} ({report.wall_time_s:.1f}s)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
