"""Modulator transmission calibration from a translated-diffuser scan.

The modulator stays fixed while a diffuser upstream of it is stepped
laterally, giving structurally different illuminations of the same modulator.
With a coarse probe prior held fixed, the shared-function update of the
reconstruction engine recovers the modulator while each diffuser realization
is a free per-frame object initialized at unity; no overlap between the
diffuser views is needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .engine import ReconConfig, ReconState, run
from .field import ComplexField, angular_spectrum_tf, fourier_shift, unitary_fft2
from .simulate import DriftModel, ScanDataset, ScanPlan, ScanTruth, synthesize_dataset


@dataclass
class CalibrationPlan:
    """Diffuser translations plus the coarse probe prior."""

    translations: np.ndarray
    probe_prior: ComplexField
    grating_period_px: float | None = None

    def __post_init__(self):
        self.translations = np.asarray(self.translations, dtype=float).reshape(-1, 2)
        if len(self.translations) < 3:
            raise ValueError("calibration needs at least 3 diffuser positions")
        if float(np.abs(self.probe_prior.data).max()) == 0:
            raise ValueError("probe prior must be nonzero")


def synthesize_calibration_dataset(probe: ComplexField, diffuser: ComplexField,
                                   modulator: ComplexField, plan: CalibrationPlan,
                                   geometry, photons: float | None = None,
                                   seed: int = 0) -> ScanDataset:
    """Frames |far(M * near(P * D_k, z))|^2 for each diffuser translation k.

    The diffuser plays the sample role: it is translated as a whole (no
    windowing), so it must share the frame shape.
    """
    if diffuser.shape != probe.shape:
        raise ValueError("diffuser must share the probe's grid")
    frame_shape = probe.shape
    geometry.validate_far_field(frame_shape[0])
    tf = angular_spectrum_tf(frame_shape, geometry.sample_plane_pitch,
                             geometry.wavelength, geometry.z_sample_to_modulator)
    n = len(plan.translations)
    frames = np.empty((n, *frame_shape))
    for k, (ty, tx) in enumerate(plan.translations):
        dk = fourier_shift(diffuser.data, (ty, tx)) if (ty or tx) else diffuser.data
        phi = np.fft.ifft2(np.fft.fft2(probe.data * dk) * tf)
        intensity = np.abs(unitary_fft2(modulator.data * phi)) ** 2
        if photons is not None and np.isfinite(photons):
            total = intensity.sum()
            if total > 0:
                intensity = intensity * (photons / total)
            intensity = np.random.default_rng([seed, k]).poisson(intensity).astype(float)
        frames[k] = intensity
    truth = ScanTruth(sample=diffuser, probe=probe, modulator=modulator,
                      plan=ScanPlan(positions=plan.translations.copy()),
                      drift=np.zeros((n, 2)))
    return ScanDataset(frames=frames, geometry=geometry,
                       photons=None if photons is None or not np.isfinite(photons) else photons,
                       seed=seed, truth=truth,
                       probe_meta={"kind": "prior"}, grid_shape=None)


def run_calibration(dataset: ScanDataset, probe_prior: ComplexField,
                    config: ReconConfig | None = None,
                    threads: int = 1) -> tuple[ComplexField, np.ndarray, ReconState]:
    """Recover the modulator with the probe prior held fixed.

    Returns (modulator estimate, per-frame diffuser estimates, engine state).
    Warns when the residual plateaus above 0.1, which usually means the prior
    or the geometry is wrong.
    """
    if config is None:
        config = ReconConfig(mode="calibrate", iterations=300, update_modulator=True,
                             phase_only_modulator=True)
    if config.mode != "calibrate":
        raise ValueError("run_calibration requires a calibrate-mode config")
    if not config.update_modulator:
        raise ValueError("calibration must update the modulator")
    state = run(dataset, config, probe_init=probe_prior, threads=threads)
    if state.residuals[-1] > 0.1:
        warnings.warn(f"calibration residual plateaued at {state.residuals[-1]:.3g}; "
                      "the recovered modulator is unlikely to be trustworthy",
                      stacklevel=2)
    return state.modulator, state.objects, state


def illumination_mask(probe_prior: ComplexField, geometry,
                      threshold: float = 0.1) -> np.ndarray:
    """Region of the modulator plane the prior actually illuminates."""
    tf = angular_spectrum_tf(probe_prior.shape, geometry.sample_plane_pitch,
                             geometry.wavelength, geometry.z_sample_to_modulator)
    envelope = np.abs(np.fft.ifft2(np.fft.fft2(probe_prior.data) * tf)) ** 2
    return envelope >= threshold * envelope.max()


def score_modulator(recovered: ComplexField | np.ndarray,
                    truth: ComplexField | np.ndarray,
                    region_mask: np.ndarray) -> dict:
    """Complex correlation magnitude and residual phase rms over the mask."""
    rec = recovered.data if isinstance(recovered, ComplexField) else np.asarray(recovered)
    tru = truth.data if isinstance(truth, ComplexField) else np.asarray(truth)
    if rec.shape != tru.shape:
        raise ValueError(f"shape mismatch: {rec.shape} vs {tru.shape}")
    sel = np.asarray(region_mask) > 0
    if not sel.any():
        raise ValueError("empty mask")
    r = rec[sel]
    t = tru[sel]
    inner = np.vdot(t, r)
    rho = abs(inner) / (np.linalg.norm(t) * np.linalg.norm(r))
    # residual phase after removing the global phase of the correlation
    residual = np.angle(r * np.conj(t) * np.exp(-1j * np.angle(inner)))
    phase_rms = float(np.sqrt(np.mean(residual**2)))
    return {"rho": float(rho), "phase_rms": phase_rms}


def dominant_period_px(modulator: ComplexField | np.ndarray, region_mask: np.ndarray,
                       pad_factor: int = 8) -> float:
    """Period of the strongest off-center line of the masked phase spectrum.

    The masked phase map is zero-padded for sub-bin frequency resolution; the
    peak is searched outside a small DC exclusion zone.
    """
    data = modulator.data if isinstance(modulator, ComplexField) else np.asarray(modulator)
    sel = np.asarray(region_mask) > 0
    phase = np.angle(data)
    phase = np.where(sel, phase - phase[sel].mean(), 0.0)
    n = data.shape[0]
    padded = np.zeros((n * pad_factor, n * pad_factor))
    padded[:n, :n] = phase
    spectrum = np.abs(np.fft.fft2(padded))
    fy = np.fft.fftfreq(n * pad_factor)
    fx = np.fft.fftfreq(n * pad_factor)
    fr = np.hypot(fy[:, None], fx[None, :])
    spectrum[fr < 1.0 / n] = 0.0  # DC and anything slower than one cycle per frame
    peak = np.unravel_index(int(np.argmax(spectrum)), spectrum.shape)
    freq = fr[peak]
    return float(1.0 / freq)


def grating_modulation_depth(dataset_frames: np.ndarray) -> float:
    """Pairwise distinctness of calibration frames (max normalized correlation)."""
    n = len(dataset_frames)
    flat = dataset_frames.reshape(n, -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(flat, axis=1)
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            c = float(abs(flat[i] @ flat[j]) / (norms[i] * norms[j] + 1e-300))
            worst = max(worst, c)
    return worst
