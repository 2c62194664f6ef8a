"""Parallel per-frame phase retrieval through the wavefront modulator model.

Every frame runs the same forward chain: exit wave at the sample plane,
near-field propagation to the modulator, modulation, far-field propagation to
the detector, modulus constraint against the measurement, and the reverse
chain back. Per-frame objects update immediately; the shared probe and
modulator collect per-frame increments that are averaged and applied once per
sweep, so a sweep's result does not depend on frame order or worker count.

Two modes of operation:

* ``separated`` / ``calibrate``: exit waves are formed as probe x object and
  both factors are updated (calibrate keeps the probe fixed);
* ``exitwave``: the exit waves themselves are the unknowns, constrained by a
  support mask at the sample plane. This mode tolerates a probe that moves
  between frames, which the separated model cannot represent.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import EngineError, FeaturelessFieldError
from .field import ComplexField, angular_spectrum_tf, disk, fourier_shift, gaussian_blur, \
    power_radius, unitary_fft2, unitary_ifft2
from .register import subpixel_shift_estimate
from .simulate import ScanDataset, generate_probe

_MODES = ("separated", "exitwave", "calibrate")


@dataclass
class SupportConfig:
    """Sample-plane support: a disk, sized from the probe unless pinned.

    ``radius_px`` of None means probe 90%-power radius times
    (1 + margin_fraction). ``outside_feedback`` is the fraction of the
    back-propagated wave kept outside the support in exitwave mode (0 is a
    hard support).
    """

    radius_px: float | None = None
    margin_fraction: float = 0.1
    outside_feedback: float = 0.0

    def __post_init__(self):
        if self.radius_px is not None and self.radius_px <= 0:
            raise ValueError("support radius must be positive")
        if not 0 <= self.outside_feedback < 1:
            raise ValueError("outside_feedback must sit in [0, 1)")


@dataclass
class ReconConfig:
    mode: str = "exitwave"
    iterations: int = 300
    beta_object: float = 0.9
    beta_probe: float = 0.9
    beta_modulator: float = 0.9
    support: SupportConfig = dc_field(default_factory=SupportConfig)
    division_epsilon: float = 1e-3
    update_modulator: bool = False
    update_probe: bool = False
    phase_only_modulator: bool = False
    seed: int = 0
    early_stop: bool = False
    early_stop_delta: float = 1e-6
    early_stop_window: int = 20
    drift_cycles: int = 1
    drift_smooth_px: float = 0.0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("beta_object", "beta_probe", "beta_modulator"):
            b = getattr(self, name)
            if not 0 < b <= 2:
                raise ValueError(f"{name} must sit in (0, 2], got {b}")
        if self.division_epsilon < 0:
            raise ValueError("division_epsilon must be >= 0")
        if self.mode == "calibrate" and self.update_probe:
            raise ValueError("calibrate mode keeps the probe fixed (update_probe=False)")
        if self.drift_cycles < 1:
            raise ValueError("drift_cycles must be >= 1")
        if isinstance(self.support, dict):
            self.support = SupportConfig(**self.support)


@dataclass
class ReconState:
    """Everything the sweep mutates, at the sample / modulator planes."""

    exit_waves: np.ndarray
    probe: ComplexField
    modulator: ComplexField
    support: np.ndarray
    mode: str
    objects: np.ndarray | None = None
    residuals: list = dc_field(default_factory=list)
    drift: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.exit_waves.shape[0]


def init_state(dataset: ScanDataset, config: ReconConfig,
               probe_init: ComplexField | None = None,
               modulator_init: ComplexField | None = None) -> ReconState:
    """Starting point: disk probe, unit objects, calibrated (or true) modulator.

    The probe comes from ``probe_init`` if given, else from the aperture
    parameters recorded in the dataset manifest. The modulator must come from
    ``modulator_init`` or the dataset's stored truth except in calibrate mode,
    where it starts at unity.
    """
    shape = dataset.frame_shape
    geo = dataset.geometry
    if probe_init is not None:
        probe = probe_init.copy()
    elif dataset.probe_meta.get("diameter_m"):
        meta = dataset.probe_meta
        probe = generate_probe(geo, shape, meta.get("kind", "aperture"),
                               meta["diameter_m"], meta.get("defocus_m", 0.0),
                               meta.get("focal_m"))
    elif dataset.truth is not None:
        probe = dataset.truth.probe.copy()
    else:
        raise ValueError("no probe available: pass probe_init or record aperture "
                         "parameters in the dataset manifest")
    if probe.shape != shape:
        raise ValueError(f"probe shape {probe.shape} != frame shape {shape}")

    if modulator_init is not None:
        modulator = modulator_init.copy()
    elif config.mode == "calibrate":
        modulator = ComplexField(data=np.ones(shape, np.complex128),
                                 pitch=probe.pitch, plane_label="modulator")
    elif dataset.truth is not None:
        modulator = dataset.truth.modulator.copy()
    else:
        raise ValueError(
            "no modulator available for reconstruction: pass modulator_init / "
            "a calibration file, or run the calibrate command first"
        )
    if modulator.shape != shape:
        raise ValueError(f"modulator shape {modulator.shape} != frame shape {shape}")

    radius = config.support.radius_px
    if radius is None:
        radius = power_radius(probe, 0.9) * (1.0 + config.support.margin_fraction)
    support = disk(shape, radius)

    n = dataset.n_frames
    objects = None
    if config.mode in ("separated", "calibrate"):
        objects = np.ones((n, *shape), dtype=np.complex128)
    exit_waves = np.broadcast_to(probe.data, (n, *shape)).copy()
    return ReconState(exit_waves=exit_waves, probe=probe, modulator=modulator,
                      support=support, mode=config.mode, objects=objects)


def modulus_project(wave: np.ndarray, intensity: np.ndarray,
                    valid: np.ndarray | None = None) -> np.ndarray:
    """Replace the wave's modulus with sqrt(intensity) where valid.

    Zero-amplitude pixels take sqrt(intensity) with zero phase; invalid pixels
    pass through unchanged.
    """
    intensity = np.asarray(intensity)
    if intensity.shape != wave.shape:
        raise ValueError(f"shape mismatch: {wave.shape} vs {intensity.shape}")
    if intensity.min() < 0:
        raise ValueError("intensities must be non-negative")
    amp = np.abs(wave)
    root = np.sqrt(intensity)
    tiny = amp < 1e-15
    with np.errstate(invalid="ignore"):
        out = np.where(tiny, root.astype(np.complex128),
                       root * wave / np.where(tiny, 1.0, amp))
    if valid is not None:
        out = np.where(valid, out, wave)
    return out


class _SweepContext:
    """Per-run cache: propagation kernel and measurement terms."""

    def __init__(self, dataset: ScanDataset, state: ReconState):
        geo = dataset.geometry
        self.tf = angular_spectrum_tf(dataset.frame_shape, geo.sample_plane_pitch,
                                      geo.wavelength, geo.z_sample_to_modulator)
        self.tf_back = np.conj(self.tf)
        self.sqrt_i = np.sqrt(dataset.frames)
        self.total_i = float(dataset.frames.sum())


def _near(data: np.ndarray, tf: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.fft2(data) * tf)


def run_iteration(state: ReconState, dataset: ScanDataset, config: ReconConfig,
                  threads: int = 1, ctx: _SweepContext | None = None) -> float:
    """One full sweep over all frames; returns (and records) the data residual.

    The residual is sum_n sum(|model modulus| - sqrt(I))^2 / sum_n sum(I),
    evaluated on the forward pass before the modulus constraint.
    """
    if ctx is None:
        ctx = _SweepContext(dataset, state)
    probe = state.probe.data
    modulator = state.modulator.data
    support = state.support
    alpha = config.support.outside_feedback
    eps = config.division_epsilon * float(np.max(np.abs(modulator) ** 2))
    mod_conj = np.conj(modulator)
    mod_abs2 = np.abs(modulator) ** 2
    separated = state.mode in ("separated", "calibrate")
    if separated:
        probe_conj = np.conj(probe)
        probe_max2 = float(np.max(np.abs(probe) ** 2))

    def frame_pass(n: int):
        if separated:
            psi = probe * state.objects[n]
        else:
            psi = state.exit_waves[n]
        phi = _near(psi, ctx.tf)
        chi = modulator * phi
        det = unitary_fft2(chi)
        misfit = float(np.sum((np.abs(det) - ctx.sqrt_i[n]) ** 2))
        det = modulus_project(det, dataset.frames[n])
        chi_rev = unitary_ifft2(det)
        phi_max2 = float(np.max(np.abs(phi) ** 2))
        if phi_max2 > 0:
            d_mod = np.conj(phi) * (chi_rev - modulator * phi) / phi_max2
        else:
            d_mod = np.zeros_like(phi)
        phi_rev = mod_conj * chi_rev / (mod_abs2 + eps)
        psi_rev = _near(phi_rev, ctx.tf_back)
        if not np.all(np.isfinite(psi_rev)):
            raise EngineError(f"non-finite field at frame {n} (stage back-propagation)")
        d_probe = None
        if separated:
            diff = psi_rev - psi
            obj = state.objects[n]
            obj_max2 = float(np.max(np.abs(obj) ** 2))
            if config.update_probe and obj_max2 > 0:
                d_probe = np.conj(obj) * diff / obj_max2
            state.objects[n] = obj + config.beta_object * probe_conj * diff / probe_max2
        else:
            state.exit_waves[n] = support * psi_rev + alpha * (1.0 - support) * psi_rev
        return misfit, d_mod, d_probe

    indices = range(state.n_frames)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(frame_pass, indices))
    else:
        results = [frame_pass(n) for n in indices]

    # ordered reductions keep the sweep bitwise independent of worker count
    misfit_total = 0.0
    d_mod_sum = np.zeros_like(modulator)
    d_probe_sum = np.zeros_like(probe) if separated and config.update_probe else None
    for misfit, d_mod, d_probe in results:
        misfit_total += misfit
        d_mod_sum += d_mod
        if d_probe_sum is not None and d_probe is not None:
            d_probe_sum += d_probe

    n_frames = state.n_frames
    if config.update_modulator:
        new_mod = modulator + config.beta_modulator * d_mod_sum / n_frames
        if config.phase_only_modulator:
            amp = np.abs(new_mod)
            new_mod = np.where(amp < 1e-15, 1.0 + 0j, new_mod / np.where(amp < 1e-15, 1.0, amp))
        if not np.all(np.isfinite(new_mod)):
            raise EngineError("non-finite field in shared modulator update")
        state.modulator.data = new_mod
    if d_probe_sum is not None:
        new_probe = probe + config.beta_probe * d_probe_sum / n_frames
        if not np.all(np.isfinite(new_probe)):
            raise EngineError("non-finite field in shared probe update")
        state.probe.data = new_probe

    residual = misfit_total / ctx.total_i if ctx.total_i > 0 else 0.0
    state.residuals.append(residual)
    return residual


def run(dataset: ScanDataset, config: ReconConfig,
        probe_init: ComplexField | None = None,
        modulator_init: ComplexField | None = None,
        threads: int = 1, progress=None) -> ReconState:
    """Initialize and sweep ``config.iterations`` times (optional early stop)."""
    state = init_state(dataset, config, probe_init, modulator_init)
    ctx = _SweepContext(dataset, state)
    for it in range(config.iterations):
        residual = run_iteration(state, dataset, config, threads=threads, ctx=ctx)
        if progress is not None:
            progress(it, residual)
        if (config.early_stop and len(state.residuals) > config.early_stop_window
                and state.residuals[-config.early_stop_window - 1] - residual
                < config.early_stop_delta):
            break
    return state


def run_exitwave_with_drift(dataset: ScanDataset, config: ReconConfig,
                            probe_init: ComplexField | None = None,
                            modulator_init: ComplexField | None = None,
                            threads: int = 1, progress=None
                            ) -> tuple[ReconState, np.ndarray, np.ndarray]:
    """Exitwave reconstruction with drift bootstrap rounds.

    Alternating projections started from a centered probe stagnate partway
    when the true illumination has drifted; re-seeding every frame with the
    probe shifted by the previous round's drift estimate walks the remaining
    offset down geometrically. With ``config.drift_cycles`` = 1 this is a
    plain run followed by one drift measurement.

    Returns (state, drift, drift_confidence); the state's waves come from the
    final round.
    """
    if config.mode != "exitwave":
        raise ValueError("drift bootstrap applies to exitwave mode")
    state = init_state(dataset, config, probe_init, modulator_init)
    ctx = _SweepContext(dataset, state)
    drift = np.zeros((state.n_frames, 2))
    confidence = np.ones(state.n_frames)
    for cycle in range(config.drift_cycles):
        if cycle > 0:
            for k in range(state.n_frames):
                seed_wave = (fourier_shift(state.probe.data, tuple(drift[k]))
                             if drift[k].any() else state.probe.data)
                state.exit_waves[k] = state.support * seed_wave
            state.residuals.clear()
        for it in range(config.iterations):
            residual = run_iteration(state, dataset, config, threads=threads, ctx=ctx)
            if progress is not None:
                progress(cycle, it, residual)
            if (config.early_stop and len(state.residuals) > config.early_stop_window
                    and state.residuals[-config.early_stop_window - 1] - residual
                    < config.early_stop_delta):
                break
        drift, confidence = estimate_probe_drift(state.exit_waves, state.support,
                                                 smooth_px=config.drift_smooth_px)
        if np.abs(drift).max() < 0.25:
            break
    state.drift = drift
    return state, drift, confidence


def estimate_probe_drift(exit_waves: np.ndarray, support: np.ndarray,
                         smooth_px: float = 0.0, min_confidence: float = 0.1,
                         upsample: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame probe offsets from the motion of |exit wave| inside the support.

    Two alignment passes: every magnitude registers against frame 0, then
    against the mean of the pass-1-aligned magnitudes. Frames whose
    registration confidence falls below ``min_confidence`` get the
    interpolated drift of their temporal neighbors. Frame 0's drift is
    subtracted so drift(0) = (0, 0).

    Returns (drift (n, 2), confidence (n,)).
    """
    mags = np.abs(exit_waves)
    n = mags.shape[0]
    mask = support > 0

    def prep(x: np.ndarray) -> np.ndarray:
        xb = gaussian_blur(x, smooth_px).real if smooth_px > 0 else x
        return np.where(mask, xb - xb[mask].mean(), 0.0)

    def register(ref_prep: np.ndarray, mov: np.ndarray) -> tuple[np.ndarray, float]:
        try:
            est = subpixel_shift_estimate(ref_prep, prep(mov), upsample=upsample,
                                          mask=mask)
            return np.asarray(est.delta), est.confidence
        except FeaturelessFieldError:
            return np.zeros(2), 0.0

    ref0 = prep(mags[0])
    shifts = np.zeros((n, 2))
    confidence = np.zeros(n)
    confidence[0] = 1.0
    for k in range(1, n):
        shifts[k], confidence[k] = register(ref0, mags[k])
    # pass 2: registering the already-aligned magnitudes against their mean
    # measures only a small residual, which keeps mask-edge cropping from
    # biasing the full-shift measurement
    aligned = np.empty_like(mags)
    for k in range(n):
        aligned[k] = np.abs(fourier_shift(mags[k], tuple(-shifts[k])))
    ref = prep(aligned.mean(axis=0))
    drift = shifts.copy()
    for k in range(n):
        residual, confidence[k] = register(ref, aligned[k])
        drift[k] = shifts[k] + residual
    good = confidence >= min_confidence
    if good.sum() < 2:
        raise ValueError("drift estimation failed: fewer than two confident frames")
    if not good.all():
        idx = np.arange(n, dtype=float)
        for axis in range(2):
            drift[~good, axis] = np.interp(idx[~good], idx[good], drift[good, axis])
    drift = drift - drift[0]
    return drift, confidence


def separate_probe_object(exit_waves: np.ndarray, drifts: np.ndarray,
                          division_epsilon: float = 1e-3,
                          support: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split drift-compensated exit waves into a shared probe and objects.

    Aligning every wave against its drift stacks the illumination; the mean
    suppresses per-frame object features by 1/N and serves as the probe
    estimate. Objects come from the regularized conjugate division and carry
    an arbitrary shared complex scale (scoring removes it). Each object sits
    at the frame's effective position, scan position plus drift.
    """
    n = exit_waves.shape[0]
    if n < 3:
        raise ValueError("probe/object separation needs at least 3 frames")
    drifts = np.asarray(drifts, dtype=float).reshape(n, 2)
    aligned = np.empty_like(exit_waves)
    for k in range(n):
        if drifts[k, 0] or drifts[k, 1]:
            aligned[k] = fourier_shift(exit_waves[k], tuple(-drifts[k]))
        else:
            aligned[k] = exit_waves[k]
    probe_est = aligned.mean(axis=0)
    eps = division_epsilon * float(np.max(np.abs(probe_est) ** 2))
    denom = np.abs(probe_est) ** 2 + eps
    objects = np.conj(probe_est)[None] * aligned / denom[None]
    if support is not None:
        objects = objects * support[None]
    return probe_est, objects
