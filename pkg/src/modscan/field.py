"""Complex 2-D wavefields on square-pitch grids and the transforms of the imaging model.

Conventions used everywhere in this package:

* arrays are indexed ``[y, x]``, row-major;
* the optical axis sits on the pixel ``(H // 2, W // 2)``;
* all internal arithmetic is complex128, file I/O is float32;
* both propagators are unitary on the sampled propagating band.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import PhysicsError, PropagationError

CFIELD_MAGIC = b"CFLD0001"


@dataclass
class ComplexField:
    """A sampled complex wavefield with physical pixel pitch.

    Parameters
    ----------
    data : ndarray
        Complex amplitudes, shape (H, W). H and W must be even and >= 16 so
        that FFTs are cheap and the center pixel (H//2, W//2) is well defined.
    pitch : float
        Pixel size in meters.
    plane_label : str
        Free-text tag naming the plane the field lives on.
    """

    data: np.ndarray
    pitch: float
    plane_label: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2:
            raise ValueError(f"field data must be 2-D, got shape {self.data.shape}")
        h, w = self.data.shape
        if h % 2 or w % 2 or h < 16 or w < 16:
            raise ValueError(f"field shape must be even and at least 16x16, got {h}x{w}")
        self.pitch = float(self.pitch)
        if not np.isfinite(self.pitch) or self.pitch <= 0:
            raise ValueError(f"pitch must be positive and finite, got {self.pitch}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def power(self) -> float:
        """Total power, sum of |amplitude|^2."""
        return float(np.sum(np.abs(self.data) ** 2))

    def with_data(self, data: np.ndarray, pitch: float | None = None,
                  plane_label: str | None = None) -> "ComplexField":
        """Copy of this field with replaced data (and optionally pitch/label)."""
        return ComplexField(
            data=data,
            pitch=self.pitch if pitch is None else pitch,
            plane_label=self.plane_label if plane_label is None else plane_label,
        )

    def copy(self) -> "ComplexField":
        return replace(self, data=self.data.copy())


@dataclass
class Geometry:
    """Physical layout of the two propagation legs.

    The sample-to-modulator leg is near-field; the modulator-to-detector leg
    is far-field when ``far_field`` is set (the only supported mode of the
    forward model).
    """

    wavelength: float
    z_sample_to_modulator: float
    z_modulator_to_detector: float
    detector_pitch: float
    sample_plane_pitch: float
    far_field: bool = True

    def __post_init__(self):
        for name in ("wavelength", "z_sample_to_modulator", "z_modulator_to_detector",
                     "detector_pitch", "sample_plane_pitch"):
            v = float(getattr(self, name))
            setattr(self, name, v)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"geometry.{name} must be positive and finite, got {v}")

    def far_field_pitch(self, n: int) -> float:
        """Sample-plane pitch implied by Fraunhofer scaling for an n x n grid."""
        return self.wavelength * self.z_modulator_to_detector / (n * self.detector_pitch)

    def validate_far_field(self, n: int, rtol: float = 1e-9) -> None:
        """Check Fraunhofer sampling consistency for an n x n grid."""
        if not self.far_field:
            return
        expected = self.far_field_pitch(n)
        if abs(self.sample_plane_pitch - expected) > rtol * expected:
            raise PhysicsError(
                "sample_plane_pitch inconsistent with far-field scaling: "
                f"got {self.sample_plane_pitch!r}, expected {expected!r} "
                f"(= wavelength * z / (N * detector_pitch) with N={n})"
            )


def _as_array(field):
    """Return (array, template ComplexField or None) for polymorphic grid ops."""
    if isinstance(field, ComplexField):
        return field.data, field
    return np.asarray(field), None


def _wrap(template: ComplexField | None, data: np.ndarray, pitch: float | None = None):
    if template is None:
        return data
    return template.with_data(data, pitch=pitch)


def max_safe_distance(shape: tuple[int, int], pitch: float, wavelength: float) -> float:
    """Largest |z| for which the angular-spectrum transfer function is
    adequately sampled on this grid.

    The criterion is the usual per-axis Nyquist bound on the transfer-function
    phase gradient at the band edge: |z| <= N * pitch^2 * sqrt(1/lambda^2 -
    1/(2 pitch)^-2...). When the band edge is already evanescent the phase
    criterion imposes no bound (those components are clamped to zero anyway).
    """
    fmax = 1.0 / (2.0 * pitch)
    kz2 = 1.0 / wavelength**2 - fmax**2
    if kz2 <= 0:
        return np.inf
    return min(shape) * pitch**2 * np.sqrt(kz2)


def angular_spectrum_tf(shape: tuple[int, int], pitch: float, wavelength: float,
                        distance: float) -> np.ndarray:
    """Free-space transfer function on the unshifted FFT frequency grid.

    Evanescent components are clamped to zero, so the transfer function is
    unitary on the propagating band and a forward/backward pair is the
    identity there.
    """
    fy = np.fft.fftfreq(shape[0], d=pitch)
    fx = np.fft.fftfreq(shape[1], d=pitch)
    f2 = fy[:, None] ** 2 + fx[None, :] ** 2
    kz2 = 1.0 / wavelength**2 - f2
    tf = np.zeros(shape, dtype=np.complex128)
    prop = kz2 > 0
    tf[prop] = np.exp(2j * np.pi * distance * np.sqrt(kz2[prop]))
    return tf


def propagate_near(field: ComplexField, distance: float, wavelength: float) -> ComplexField:
    """Angular-spectrum propagation over ``distance`` (negative = backward).

    Preserves shape and pitch; conserves power on the propagating band.
    Raises PropagationError when the transfer function would be undersampled,
    naming the maximum safe distance for this grid.
    """
    if not np.isfinite(distance):
        raise ValueError("propagation distance must be finite")
    if not np.isfinite(wavelength) or wavelength <= 0:
        raise ValueError(f"wavelength must be positive and finite, got {wavelength}")
    if not np.all(np.isfinite(field.data)):
        raise ValueError("field contains non-finite values")
    if distance == 0:
        return field.copy()
    zmax = max_safe_distance(field.shape, field.pitch, wavelength)
    if abs(distance) > zmax:
        raise PropagationError(
            f"transfer function undersampled for |z| = {abs(distance):.6g} m on a "
            f"{field.shape[0]}x{field.shape[1]} grid at {field.pitch:.6g} m pitch; "
            f"maximum safe distance is {zmax:.6g} m"
        )
    tf = angular_spectrum_tf(field.shape, field.pitch, wavelength, distance)
    out = np.fft.ifft2(np.fft.fft2(field.data) * tf)
    return field.with_data(out)


def unitary_fft2(data: np.ndarray) -> np.ndarray:
    """Centered, norm-preserving FFT (center pixel in, center pixel out)."""
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(data), norm="ortho"))


def unitary_ifft2(data: np.ndarray) -> np.ndarray:
    """Inverse of :func:`unitary_fft2`."""
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(data), norm="ortho"))


def propagate_far(field: ComplexField, geometry: Geometry | None = None) -> ComplexField:
    """Fraunhofer leg: centered unitary Fourier transform.

    With a geometry the output pitch is set to wavelength * z / (N * pitch);
    without one the transform is applied as a pure unitary map and the pitch
    is carried through unchanged (the bookkeeping is metadata only, nothing
    is resampled).
    """
    if not np.all(np.isfinite(field.data)):
        raise ValueError("field contains non-finite values")
    pitch = None
    if geometry is not None:
        if not geometry.far_field:
            raise PhysicsError("propagate_far requires geometry.far_field")
        if field.shape[0] != field.shape[1]:
            raise ValueError("far-field pitch bookkeeping needs a square grid")
        pitch = (geometry.wavelength * geometry.z_modulator_to_detector
                 / (field.shape[0] * field.pitch))
    return _wrap(field, unitary_fft2(field.data), pitch=pitch)


def propagate_far_inverse(field: ComplexField, geometry: Geometry | None = None) -> ComplexField:
    """Inverse of :func:`propagate_far` (centered unitary inverse transform)."""
    if not np.all(np.isfinite(field.data)):
        raise ValueError("field contains non-finite values")
    pitch = None
    if geometry is not None:
        if not geometry.far_field:
            raise PhysicsError("propagate_far_inverse requires geometry.far_field")
        if field.shape[0] != field.shape[1]:
            raise ValueError("far-field pitch bookkeeping needs a square grid")
        pitch = (geometry.wavelength * geometry.z_modulator_to_detector
                 / (field.shape[0] * field.pitch))
    return _wrap(field, unitary_ifft2(field.data), pitch=pitch)


def fourier_shift(field, shift: tuple[float, float]):
    """Translate by (dy, dx) pixels via a reciprocal-space linear phase.

    Accepts a ComplexField or a plain array (complex output either way).
    Integer shifts reproduce a circular roll; shifts compose additively.
    """
    data, template = _as_array(field)
    dy, dx = float(shift[0]), float(shift[1])
    h, w = data.shape
    if abs(dy) >= h / 2 or abs(dx) >= w / 2:
        raise ValueError(f"shift ({dy}, {dx}) exceeds half the field extent ({h}, {w})")
    if dy == 0 and dx == 0:
        return _wrap(template, np.asarray(data, dtype=np.complex128).copy())
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    phase = np.exp(-2j * np.pi * (dy * fy[:, None] + dx * fx[None, :]))
    out = np.fft.ifft2(np.fft.fft2(data) * phase)
    return _wrap(template, out)


def _center_slices(small: tuple[int, int], big: tuple[int, int]):
    off = [(b - s) // 2 for s, b in zip(small, big)]
    return tuple(slice(o, o + s) for o, s in zip(off, small))


def embed_center(field, target_shape: tuple[int, int]):
    """Zero-pad to ``target_shape`` keeping the center pixel on the center pixel."""
    data, template = _as_array(field)
    th, tw = target_shape
    if th % 2 or tw % 2:
        raise ValueError(f"target shape must be even, got {target_shape}")
    if th < data.shape[0] or tw < data.shape[1]:
        raise ValueError(f"embed target {target_shape} smaller than source {data.shape}")
    out = np.zeros((th, tw), dtype=np.complex128)
    out[_center_slices(data.shape, (th, tw))] = data
    return _wrap(template, out)


def crop_center(field, target_shape: tuple[int, int]):
    """Central crop to ``target_shape`` under the same center convention."""
    data, template = _as_array(field)
    th, tw = target_shape
    if th % 2 or tw % 2:
        raise ValueError(f"target shape must be even, got {target_shape}")
    if th > data.shape[0] or tw > data.shape[1]:
        raise ValueError(f"crop target {target_shape} larger than source {data.shape}")
    out = data[_center_slices((th, tw), data.shape)]
    return _wrap(template, np.array(out, dtype=np.complex128))


def disk(shape: tuple[int, int], radius_px: float, center: tuple[float, float] | None = None,
         dtype=np.float64) -> np.ndarray:
    """Filled circular mask of the given pixel radius around the center pixel."""
    h, w = shape
    cy, cx = (h // 2, w // 2) if center is None else center
    y = np.arange(h)[:, None] - cy
    x = np.arange(w)[None, :] - cx
    return (y * y + x * x <= radius_px * radius_px).astype(dtype)


def radial_grid(shape: tuple[int, int]) -> np.ndarray:
    """Distance of each pixel from the center pixel, in pixels."""
    h, w = shape
    y = np.arange(h)[:, None] - h // 2
    x = np.arange(w)[None, :] - w // 2
    return np.sqrt(y * y + x * x)


def power_radius(field, fraction: float = 0.9) -> float:
    """Radius (px, from the center pixel) enclosing ``fraction`` of total power."""
    data, _ = _as_array(field)
    intensity = np.abs(data) ** 2
    r = radial_grid(data.shape).ravel()
    order = np.argsort(r)
    cum = np.cumsum(intensity.ravel()[order])
    total = cum[-1]
    if total <= 0:
        raise ValueError("field has no power")
    idx = int(np.searchsorted(cum, fraction * total))
    return float(r[order[min(idx, r.size - 1)]])


def gaussian_blur(data: np.ndarray, sigma_px: float) -> np.ndarray:
    """Isotropic Gaussian blur applied in reciprocal space (circular)."""
    if sigma_px <= 0:
        return np.asarray(data).copy()
    h, w = data.shape
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    f2 = fy[:, None] ** 2 + fx[None, :] ** 2
    kernel = np.exp(-2.0 * np.pi**2 * sigma_px**2 * f2)
    out = np.fft.ifft2(np.fft.fft2(data) * kernel)
    return out if np.iscomplexobj(data) else out.real


def write_cfield(path, field: ComplexField) -> None:
    """Write the binary complex-field file format.

    Layout: 8-byte magic ``CFLD0001``, u32 H, u32 W (little endian), f64
    pitch in meters, then H*W interleaved (re, im) float32 little endian,
    row-major.
    """
    h, w = field.shape
    inter = np.empty((h, w, 2), dtype="<f4")
    inter[..., 0] = field.data.real
    inter[..., 1] = field.data.imag
    with open(path, "wb") as fh:
        fh.write(CFIELD_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(struct.pack("<d", field.pitch))
        inter.tofile(fh)


def read_cfield(path, plane_label: str = "") -> ComplexField:
    """Read a file written by :func:`write_cfield`."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CFIELD_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CFIELD_MAGIC!r}")
        h, w = struct.unpack("<II", fh.read(8))
        (pitch,) = struct.unpack("<d", fh.read(8))
        inter = np.fromfile(fh, dtype="<f4", count=h * w * 2)
    if inter.size != h * w * 2:
        raise ValueError(f"{path}: truncated payload")
    inter = inter.reshape(h, w, 2)
    data = inter[..., 0].astype(np.float64) + 1j * inter[..., 1].astype(np.float64)
    return ComplexField(data=data, pitch=pitch, plane_label=plane_label)
