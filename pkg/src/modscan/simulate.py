"""Synthetic scenes and modulated scanning-diffraction datasets.

A dataset is built frame by frame: extract the sample patch at the scan
position (sub-pixel, by Fourier-shifting the whole sample), multiply by the
(possibly drifted) probe, propagate to the modulator plane, apply the
modulator, propagate to the detector, and record the intensity, optionally
with Poisson counting noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .field import (
    ComplexField,
    Geometry,
    angular_spectrum_tf,
    crop_center,
    disk,
    fourier_shift,
    gaussian_blur,
    power_radius,
    propagate_near,
    read_cfield,
    unitary_fft2,
    write_cfield,
)

MANIFEST_VERSION = 1


@dataclass
class ScanPlan:
    """Per-frame scan positions (y, x) in sample-plane pixels, acquisition order."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(self.positions) < 2:
            raise ValueError("a scan plan needs at least two frames")

    @property
    def n_frames(self) -> int:
        return len(self.positions)


@dataclass
class DriftModel:
    """Per-frame lateral probe offset; frame 0 is always at (0, 0).

    ``linear`` ramps to ``amplitude`` pixels along a mostly-horizontal
    direction (x:y = 10:1); ``random_walk`` accumulates seeded Gaussian steps
    whose final rms magnitude is about ``amplitude``.
    """

    kind: str = "none"
    amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "linear", "random_walk"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.amplitude < 0:
            raise ValueError("drift amplitude must be >= 0")

    def offsets(self, n_frames: int) -> np.ndarray:
        out = np.zeros((n_frames, 2))
        if self.kind == "none" or self.amplitude == 0 or n_frames < 2:
            return out
        if self.kind == "linear":
            direction = np.array([0.1, 1.0]) / np.hypot(0.1, 1.0)
            t = np.arange(n_frames) / (n_frames - 1)
            return self.amplitude * t[:, None] * direction[None, :]
        rng = np.random.default_rng(self.seed)
        steps = rng.normal(0.0, self.amplitude / np.sqrt(2 * (n_frames - 1)),
                           size=(n_frames - 1, 2))
        out[1:] = np.cumsum(steps, axis=0)
        return out


@dataclass
class ScanTruth:
    sample: ComplexField
    probe: ComplexField
    modulator: ComplexField
    plan: ScanPlan
    drift: np.ndarray


@dataclass
class ScanDataset:
    """Measured intensities plus geometry and (for simulations) ground truth."""

    frames: np.ndarray
    geometry: Geometry
    photons: float | None = None
    seed: int = 0
    truth: ScanTruth | None = None
    probe_meta: dict = dc_field(default_factory=dict)
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError("frames must be a (n, H, W) stack")
        if not np.all(np.isfinite(self.frames)) or self.frames.min() < 0:
            raise ValueError("frame intensities must be finite and non-negative")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


def generate_probe(geometry: Geometry, shape: tuple[int, int], kind: str,
                   diameter: float, defocus: float = 0.0,
                   focal: float | None = None) -> ComplexField:
    """Aperture-defined illumination at the sample plane, unit total power.

    ``aperture`` is a hard disk propagated by ``defocus``; ``divergent`` adds
    the quadratic phase of a thin lens of the given focal length (negative =
    diverging) to the disk before the same propagation.
    """
    if kind not in ("aperture", "divergent"):
        raise ValueError(f"unknown probe kind {kind!r}")
    pitch = geometry.sample_plane_pitch
    radius_px = diameter / (2 * pitch)
    if 2 * radius_px > 0.8 * min(shape):
        raise ValueError(
            f"probe diameter {diameter:.3g} m spans {2 * radius_px:.0f} px and does not "
            f"fit a {shape[0]}x{shape[1]} grid with a 20% margin"
        )
    data = disk(shape, radius_px).astype(np.complex128)
    if kind == "divergent":
        if focal is None or focal == 0:
            raise ValueError("divergent probe needs a nonzero focal distance")
        # the lens chirp's local frequency at the aperture edge must stay
        # below Nyquist for this pitch
        min_focal = 2 * pitch * (diameter / 2) / geometry.wavelength
        if abs(focal) < min_focal:
            raise ValueError(
                f"focal distance {focal:.3g} m undersamples the lens phase at "
                f"{pitch:.3g} m pitch; |focal| must be at least {min_focal:.3g} m"
            )
        h, w = shape
        y = (np.arange(h)[:, None] - h // 2) * pitch
        x = (np.arange(w)[None, :] - w // 2) * pitch
        data *= np.exp(-1j * np.pi * (y * y + x * x) / (geometry.wavelength * focal))
    out = ComplexField(data=data, pitch=pitch, plane_label="probe")
    if defocus != 0:
        out = propagate_near(out, defocus, geometry.wavelength)
    power = out.power()
    out.data /= np.sqrt(power)
    return out


def _maze_walls(cells: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Perfect maze by randomized depth-first search on a cells x cells grid.

    Returns (wall_h, wall_v): wall_h[r, c] is the wall above cell (r, c) with
    an extra bottom row r = cells; wall_v[r, c] the wall left of (r, c) with
    an extra right column.
    """
    wall_h = np.ones((cells + 1, cells), dtype=bool)
    wall_v = np.ones((cells, cells + 1), dtype=bool)
    visited = np.zeros((cells, cells), dtype=bool)
    stack = [(0, 0)]
    visited[0, 0] = True
    while stack:
        r, c = stack[-1]
        neighbors = [(r + dr, c + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                     if 0 <= r + dr < cells and 0 <= c + dc < cells
                     and not visited[r + dr, c + dc]]
        if not neighbors:
            stack.pop()
            continue
        nr, nc = neighbors[rng.integers(len(neighbors))]
        if nr == r + 1:
            wall_h[r + 1, c] = False
        elif nr == r - 1:
            wall_h[r, c] = False
        elif nc == c + 1:
            wall_v[r, c + 1] = False
        else:
            wall_v[r, c] = False
        visited[nr, nc] = True
        stack.append((nr, nc))
    return wall_h, wall_v


def maze_boundaries(size: int, cells: int, rng: np.random.Generator | None = None,
                    jitter_frac: float = 0.25) -> np.ndarray:
    """Cell boundary pixel coordinates, optionally jittered.

    Jitter keeps walls off a uniform lattice; a strictly periodic wall grid
    makes disjoint regions correlate at the lattice phase, which poisons
    position registration.
    """
    if size % cells:
        raise ValueError(f"maze size {size} must be divisible by cell count {cells}")
    cp = size // cells
    bounds = np.arange(cells + 1) * cp
    if rng is not None and jitter_frac > 0:
        jit = rng.integers(-int(cp * jitter_frac), int(cp * jitter_frac) + 1,
                           size=cells + 1)
        jit[0] = jit[-1] = 0
        bounds = bounds + jit
    return bounds


def rasterize_maze(wall_h: np.ndarray, wall_v: np.ndarray, size: int, wall_px: int,
                   bounds_y: np.ndarray | None = None,
                   bounds_x: np.ndarray | None = None) -> np.ndarray:
    """Render wall segments as ``wall_px``-wide lines on a size x size grid.

    A wall line on cell boundary b starts at pixel min(max(b - wall_px//2, 0),
    size - wall_px); segments extend across both corner posts so joints close.
    """
    cells = wall_h.shape[1]
    if bounds_y is None:
        bounds_y = maze_boundaries(size, cells)
    if bounds_x is None:
        bounds_x = maze_boundaries(size, cells)

    def post(b: int) -> int:
        return min(max(int(b) - wall_px // 2, 0), size - wall_px)

    mask = np.zeros((size, size), dtype=bool)
    for r in range(cells + 1):
        for c in range(cells):
            if wall_h[r, c]:
                y0 = post(bounds_y[r])
                x0, x1 = post(bounds_x[c]), post(bounds_x[c + 1]) + wall_px
                mask[y0:y0 + wall_px, x0:x1] = True
    for r in range(cells):
        for c in range(cells + 1):
            if wall_v[r, c]:
                x0 = post(bounds_x[c])
                y0, y1 = post(bounds_y[r]), post(bounds_y[r + 1]) + wall_px
                mask[y0:y1, x0:x0 + wall_px] = True
    return mask


def generate_sample(kind: str, size: int, amplitude_range: tuple[float, float],
                    phase_range: tuple[float, float], pitch: float = 1e-6,
                    cells: int = 16, wall_px: int = 1, seed: int = 0,
                    smooth_px: float = 0.0, amplitude_path=None,
                    phase_path=None) -> ComplexField:
    """Complex transmission test object.

    ``maze``: a randomized-DFS perfect maze; walls take the low end of
    ``amplitude_range`` and the high end of ``phase_range``, passages the
    opposite ends. ``import``: a grayscale image file mapped onto
    ``amplitude_range`` (plus an optional second file mapped onto
    ``phase_range``).
    """
    a0, a1 = float(amplitude_range[0]), float(amplitude_range[1])
    p0, p1 = float(phase_range[0]), float(phase_range[1])
    if not (0 < a0 <= 1 and 0 < a1 <= 1):
        raise ValueError(f"amplitude_range must sit in (0, 1], got {amplitude_range}")
    if not (-np.pi <= p0 <= np.pi and -np.pi <= p1 <= np.pi):
        raise ValueError(f"phase_range must sit in [-pi, pi], got {phase_range}")
    if kind == "maze":
        rng = np.random.default_rng(seed)
        wall_h, wall_v = _maze_walls(cells, rng)
        bounds_y = maze_boundaries(size, cells, rng)
        bounds_x = maze_boundaries(size, cells, rng)
        wall = rasterize_maze(wall_h, wall_v, size, wall_px, bounds_y, bounds_x).astype(float)

        # smooth random texture on the passages (upper half of the amplitude
        # range, lower half of the phase range) adds the fine features that
        # sub-pixel registration locks on to
        def unit_texture():
            t = gaussian_blur(rng.standard_normal((size, size)), 1.5)
            lo, hi = t.min(), t.max()
            return (t - lo) / (hi - lo) if hi > lo else np.zeros_like(t)

        amp_pass = a1 - 0.5 * (a1 - a0) * unit_texture()
        pha_pass = p0 + 0.5 * (p1 - p0) * unit_texture()
        if smooth_px > 0:
            wall = np.clip(gaussian_blur(wall, smooth_px), 0.0, 1.0)
        amp = amp_pass + (a0 - amp_pass) * wall
        phase = pha_pass + (p1 - pha_pass) * wall
    elif kind == "import":
        if amplitude_path is None:
            raise ValueError("import kind needs an amplitude image path")
        from PIL import Image

        def load_unit(path):
            img = np.asarray(Image.open(path).convert("F"), dtype=float)
            img = np.array(Image.fromarray(img).resize((size, size)))
            lo, hi = img.min(), img.max()
            return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)

        amp_map = load_unit(amplitude_path)
        amp = a0 + (a1 - a0) * amp_map
        phase_map = load_unit(phase_path) if phase_path else amp_map
        phase = p0 + (p1 - p0) * phase_map
    else:
        raise ValueError(f"unknown sample kind {kind!r}")
    return ComplexField(data=amp * np.exp(1j * phase), pitch=pitch, plane_label="sample")


def generate_modulator(shape: tuple[int, int], pitch: float, kind: str,
                       feature_px: int = 4, phase_depth: float = np.pi,
                       period_px: float = 16.0, seed: int = 0) -> ComplexField:
    """Phase-type wavefront modulator with unit amplitude everywhere.

    ``random``: i.i.d. per-block phase in {0, phase_depth} on feature_px
    blocks. ``grating``: binary square-wave phase stripes of the given period.
    """
    if not 0 <= phase_depth <= 2 * np.pi:
        raise ValueError(f"phase_depth must sit in [0, 2*pi], got {phase_depth}")
    h, w = shape
    if kind == "random":
        if feature_px < 1:
            raise ValueError("feature_px must be >= 1")
        rng = np.random.default_rng(seed)
        by = -(-h // feature_px)
        bx = -(-w // feature_px)
        blocks = rng.integers(0, 2, size=(by, bx)).astype(float) * phase_depth
        phase = np.kron(blocks, np.ones((feature_px, feature_px)))[:h, :w]
    elif kind == "grating":
        if period_px < 2:
            raise ValueError(f"grating period must be >= 2 px, got {period_px}")
        x = np.arange(w, dtype=float)
        stripe = (np.mod(x, period_px) < period_px / 2).astype(float) * phase_depth
        phase = np.broadcast_to(stripe[None, :], (h, w)).copy()
    else:
        raise ValueError(f"unknown modulator kind {kind!r}")
    return ComplexField(data=np.exp(1j * phase), pitch=pitch, plane_label="modulator")


def make_scan_plan(grid: tuple[int, int], step_px: float, jitter_px: float = 0.0,
                   seed: int = 0, sample_size: int | None = None,
                   probe_diameter_px: float | None = None) -> ScanPlan:
    """Serpentine raster grid centered on the sample, plus uniform jitter.

    Rows run top to bottom; column order alternates per row so consecutive
    frames stay spatial neighbors. Jitter is uniform in [-jitter_px,
    jitter_px] per axis and stands in for the unknown true positions.
    """
    rows, cols = grid
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ValueError(f"grid must hold at least two frames, got {grid}")
    if step_px <= 0:
        raise ValueError("step_px must be positive")
    positions = []
    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        for c in cs:
            positions.append(((r - (rows - 1) / 2) * step_px,
                              (c - (cols - 1) / 2) * step_px))
    positions = np.asarray(positions)
    if jitter_px > 0:
        rng = np.random.default_rng(seed)
        positions = positions + rng.uniform(-jitter_px, jitter_px, size=positions.shape)
    if sample_size is not None:
        half = probe_diameter_px / 2 if probe_diameter_px else 0.0
        reach = np.abs(positions).max() + half + jitter_px
        if reach > sample_size / 2:
            raise ValueError(
                f"scan plan reaches {reach:.1f} px from center and exceeds the "
                f"{sample_size} px sample"
            )
    return ScanPlan(positions=positions)


def pair_overlap_ratio(distance_px: float, diameter_px: float) -> float:
    """Lens-area overlap of two equal disks, as a fraction of one disk's area."""
    if diameter_px <= 0:
        raise ValueError("probe diameter must be positive")
    u = distance_px / diameter_px
    if u >= 1.0:
        return 0.0
    ratio = (2.0 / np.pi) * (np.arccos(u) - u * np.sqrt(1.0 - u * u))
    return float(np.clip(ratio, 0.0, 1.0))


def overlap_ratio(plan: ScanPlan, probe_diameter_px: float) -> dict:
    """Overlap of every frame with its nearest neighbor (unique pairs + mean)."""
    pos = plan.positions
    n = len(pos)
    pairs = set()
    for i in range(n):
        d = np.linalg.norm(pos - pos[i], axis=1)
        d[i] = np.inf
        j = int(np.argmin(d))
        pairs.add((min(i, j), max(i, j)))
    entries = [(i, j, pair_overlap_ratio(float(np.linalg.norm(pos[j] - pos[i])),
                                         probe_diameter_px))
               for i, j in sorted(pairs)]
    ratios = np.array([r for _, _, r in entries])
    return {"pairs": entries, "ratios": ratios, "mean": float(ratios.mean())}


def step_for_overlap(diameter_px: float, overlap: float) -> float:
    """Disk separation that yields the requested lens-area overlap ratio."""
    if not 0.0 < overlap < 1.0:
        raise ValueError("overlap must sit strictly between 0 and 1")
    lo, hi = 0.0, diameter_px
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if pair_overlap_ratio(mid, diameter_px) > overlap:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def probe_power_diameter(probe: ComplexField, fraction: float = 0.9) -> float:
    """Diameter (px) of the disk enclosing ``fraction`` of the probe power."""
    return 2.0 * power_radius(probe, fraction)


def synthesize_dataset(sample: ComplexField, probe: ComplexField,
                       modulator: ComplexField, plan: ScanPlan,
                       drift: DriftModel | np.ndarray | None, geometry: Geometry,
                       photons: float | None = None, seed: int = 0,
                       grid_shape: tuple[int, int] | None = None,
                       probe_meta: dict | None = None) -> ScanDataset:
    """Forward-model every scan position into a detector intensity stack.

    ``drift`` may be a DriftModel or an explicit (n, 2) array of per-frame
    probe offsets. ``photons`` of None (or inf) gives noiseless frames;
    otherwise each frame is scaled to that expected total count and replaced
    by per-pixel Poisson draws from a (seed, frame) stream, so results do not
    depend on evaluation order.
    """
    frame_shape = probe.shape
    if modulator.shape != frame_shape:
        raise ValueError(f"modulator shape {modulator.shape} != probe shape {frame_shape}")
    if frame_shape[0] != frame_shape[1]:
        raise ValueError("frames must be square")
    for name, f in (("sample", sample), ("probe", probe), ("modulator", modulator)):
        if abs(f.pitch - geometry.sample_plane_pitch) > 1e-9 * geometry.sample_plane_pitch:
            raise ValueError(f"{name} pitch {f.pitch!r} != geometry sample pitch "
                             f"{geometry.sample_plane_pitch!r}")
    geometry.validate_far_field(frame_shape[0])
    margin = (min(sample.shape) - frame_shape[0]) / 2
    reach = np.abs(plan.positions).max()
    if reach > margin - 1:
        raise ValueError(f"scan positions reach {reach:.1f} px but the sample only "
                         f"allows {margin - 1:.1f} px around the frame window")

    n = plan.n_frames
    if drift is None:
        drift_arr = np.zeros((n, 2))
    elif isinstance(drift, DriftModel):
        drift_arr = drift.offsets(n)
    else:
        drift_arr = np.asarray(drift, dtype=float).reshape(n, 2)
    tf = angular_spectrum_tf(frame_shape, geometry.sample_plane_pitch,
                             geometry.wavelength, geometry.z_sample_to_modulator)
    # validate the near leg once against the sampling criterion
    propagate_near(probe, geometry.z_sample_to_modulator, geometry.wavelength)
    mod = modulator.data
    frames = np.empty((n, *frame_shape))
    if photons is not None and not np.isfinite(photons):
        photons = None
    for k in range(n):
        py, px = plan.positions[k]
        patch = crop_center(fourier_shift(sample.data, (-py, -px)), frame_shape)
        pr = probe.data
        if drift_arr[k, 0] or drift_arr[k, 1]:
            pr = fourier_shift(probe.data, tuple(drift_arr[k]))
        phi = np.fft.ifft2(np.fft.fft2(pr * patch) * tf)
        intensity = np.abs(unitary_fft2(mod * phi)) ** 2
        if photons is not None:
            total = intensity.sum()
            if total > 0:
                intensity = intensity * (photons / total)
            rng = np.random.default_rng([seed, k])
            intensity = rng.poisson(intensity).astype(np.float64)
        frames[k] = intensity
    truth = ScanTruth(sample=sample, probe=probe, modulator=modulator, plan=plan,
                      drift=drift_arr)
    return ScanDataset(frames=frames, geometry=geometry, photons=photons, seed=seed,
                       truth=truth, probe_meta=dict(probe_meta or {}),
                       grid_shape=grid_shape)


def grid_subset_indices(grid_shape: tuple[int, int], stride: int) -> list[int]:
    """Frame indices of every ``stride``-th grid point of a serpentine raster."""
    rows, cols = grid_shape
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for i in range(rows * cols):
        r = i // cols
        c = i % cols if r % 2 == 0 else cols - 1 - (i % cols)
        if r % stride == 0 and c % stride == 0:
            out.append(i)
    return out


def subset_dataset(dataset: ScanDataset, indices) -> ScanDataset:
    """Sparse copy of a dataset keeping only the given frames (in order)."""
    indices = list(indices)
    if len(indices) < 2:
        raise ValueError("a dataset needs at least two frames")
    truth = None
    if dataset.truth is not None:
        truth = ScanTruth(sample=dataset.truth.sample, probe=dataset.truth.probe,
                          modulator=dataset.truth.modulator,
                          plan=ScanPlan(positions=dataset.truth.plan.positions[indices]),
                          drift=dataset.truth.drift[indices])
    return ScanDataset(frames=dataset.frames[indices], geometry=dataset.geometry,
                       photons=dataset.photons, seed=dataset.seed, truth=truth,
                       probe_meta=dict(dataset.probe_meta), grid_shape=None)


def write_positions_csv(path, positions: np.ndarray) -> None:
    lines = ["frame,y_px,x_px"]
    for i, (y, x) in enumerate(np.asarray(positions, dtype=float)):
        lines.append(f"{i},{float(y)!r},{float(x)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_positions_csv(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    return np.array([[float(r[1]), float(r[2])] for r in rows])


def save_dataset(dataset: ScanDataset, path, overwrite: bool = False) -> None:
    """Write the on-disk dataset layout: manifest.json + frames.bin + truth/."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if manifest_path.exists() and not overwrite:
        raise FileExistsError(f"{root} already holds a dataset (pass overwrite)")
    root.mkdir(parents=True, exist_ok=True)
    geo = dataset.geometry
    manifest = {
        "version": MANIFEST_VERSION,
        "n_frames": dataset.n_frames,
        "frame_shape": list(dataset.frame_shape),
        "wavelength_m": geo.wavelength,
        "z_sm_m": geo.z_sample_to_modulator,
        "z_md_m": geo.z_modulator_to_detector,
        "detector_pitch_m": geo.detector_pitch,
        "sample_pitch_m": geo.sample_plane_pitch,
        "photons": dataset.photons,
        "seed": dataset.seed,
        "has_truth": dataset.truth is not None,
        "probe": dataset.probe_meta or None,
        "grid_shape": list(dataset.grid_shape) if dataset.grid_shape else None,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8", newline="\n")
    dataset.frames.astype("<f4").tofile(root / "frames.bin")
    if dataset.truth is not None:
        tdir = root / "truth"
        tdir.mkdir(exist_ok=True)
        write_cfield(tdir / "sample.cfield", dataset.truth.sample)
        write_cfield(tdir / "probe.cfield", dataset.truth.probe)
        write_cfield(tdir / "modulator.cfield", dataset.truth.modulator)
        write_positions_csv(tdir / "positions.csv", dataset.truth.plan.positions)
        write_positions_csv(tdir / "drift.csv", dataset.truth.drift)


def load_dataset(path) -> ScanDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{root} is not a dataset directory (no manifest.json)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    n = manifest["n_frames"]
    h, w = manifest["frame_shape"]
    frames = np.fromfile(root / "frames.bin", dtype="<f4", count=n * h * w)
    if frames.size != n * h * w:
        raise ConfigError(f"{root}/frames.bin is truncated")
    geometry = Geometry(
        wavelength=manifest["wavelength_m"],
        z_sample_to_modulator=manifest["z_sm_m"],
        z_modulator_to_detector=manifest["z_md_m"],
        detector_pitch=manifest["detector_pitch_m"],
        sample_plane_pitch=manifest["sample_pitch_m"],
    )
    truth = None
    if manifest.get("has_truth"):
        tdir = root / "truth"
        truth = ScanTruth(
            sample=read_cfield(tdir / "sample.cfield", "sample"),
            probe=read_cfield(tdir / "probe.cfield", "probe"),
            modulator=read_cfield(tdir / "modulator.cfield", "modulator"),
            plan=ScanPlan(positions=read_positions_csv(tdir / "positions.csv")),
            drift=read_positions_csv(tdir / "drift.csv"),
        )
    grid = manifest.get("grid_shape")
    return ScanDataset(frames=frames.astype(np.float64).reshape(n, h, w),
                       geometry=geometry, photons=manifest.get("photons"),
                       seed=manifest.get("seed", 0), truth=truth,
                       probe_meta=manifest.get("probe") or {},
                       grid_shape=tuple(grid) if grid else None)
