"""Sub-pixel shift registration and global scan-position recovery.

Pairwise shifts between overlapping object patches are measured from the peak
of their cross-correlation, optionally sharpened by a scaling-gradient
precondition (difference between a slightly rescaled copy of the image and
the image itself). Accepted pairwise shifts form a graph whose weighted
least-squares solution yields every frame's position relative to frame 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import FeaturelessFieldError, GraphDisconnectedError
from .field import ComplexField, crop_center, embed_center

_NORM_FLOOR = 1e-300


@dataclass
class ShiftMeasurement:
    """One pairwise shift: frame_j sits at delta = (dy, dx) px from frame_i."""

    frame_i: int
    frame_j: int
    delta: tuple[float, float]
    confidence: float
    peak_ratio: float
    accepted: bool = True

    def __post_init__(self):
        if self.frame_i == self.frame_j:
            raise ValueError("a shift measurement needs two distinct frames")


@dataclass
class RegisterConfig:
    """Knobs for pairwise registration.

    ``precondition`` switches on the scaling-gradient enhancement; it helps on
    noisy data but slightly biases long shifts (the rescaled copy sits at
    delta/a rather than delta), so it is off by default for clean patches.
    """

    precondition: bool = False
    trim_px: int = 2
    upsample: int = 50
    min_confidence: float = 0.05
    min_peak_ratio: float = 1.2
    use_magnitude: bool = False


@dataclass
class PositionGraph:
    n_nodes: int
    edges: list[ShiftMeasurement] = dc_field(default_factory=list)
    solution: np.ndarray | None = None

    def accepted(self) -> list[ShiftMeasurement]:
        return [e for e in self.edges if e.accepted]


def _as_square_array(image) -> np.ndarray:
    data = image.data if isinstance(image, ComplexField) else np.asarray(image)
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {data.shape}")
    return np.asarray(data, dtype=np.complex128)


def scaling_gradient(image, trim_px: int):
    """Difference between a slightly rescaled copy of ``image`` and the image.

    The rescaled copy comes from cropping ``trim_px`` frequency samples per
    side in reciprocal space, inverse transforming on the smaller grid, and
    zero-padding back to the original size; the 1/|a| amplitude factor of the
    Fourier scaling theorem (a = N / (N - 2 trim)) keeps the copy's energy
    matched to the original. The result suppresses flat content and sharpens
    edges, which is what makes low-overlap correlation peaks usable.
    """
    data = _as_square_array(image)
    n = data.shape[0]
    if trim_px < 0 or (trim_px and trim_px >= n // 4):
        raise ValueError(f"trim_px must satisfy 0 <= m < N/4 = {n // 4}, got {trim_px}")
    if trim_px == 0:
        out = np.zeros_like(data)
    else:
        inner = n - 2 * trim_px
        spectrum = np.fft.fftshift(np.fft.fft2(data))
        small = np.fft.ifft2(np.fft.ifftshift(crop_center(spectrum, (inner, inner))))
        a = n / inner
        out = embed_center(small, (n, n)) / a - data
    if isinstance(image, ComplexField):
        return image.with_data(out)
    return out


def _wrap_index(idx: int, n: int) -> float:
    return float(idx - n) if idx > n // 2 else float(idx)


def _secondary_peak(mag: np.ndarray, peak_idx: tuple[int, int], exclusion_px: float = 5.0) -> float:
    """Highest correlation magnitude at wrap-aware distance >= exclusion_px."""
    h, w = mag.shape
    dy = np.abs(np.arange(h) - peak_idx[0])
    dy = np.minimum(dy, h - dy)
    dx = np.abs(np.arange(w) - peak_idx[1])
    dx = np.minimum(dx, w - dx)
    far = (dy[:, None] ** 2 + dx[None, :] ** 2) >= exclusion_px**2
    return float(mag[far].max()) if far.any() else 0.0


def _local_dft_grid(shape: tuple[int, int], center: tuple[float, float],
                    upsample: int, half_width_px: float = 1.5):
    """Fine lag grid around ``center`` plus the DFT factors evaluating there."""
    h, w = shape
    steps = int(round(2 * half_width_px * upsample)) + 1
    ty = center[0] + (np.arange(steps) - (steps - 1) / 2) / upsample
    tx = center[1] + (np.arange(steps) - (steps - 1) / 2) / upsample
    ey = np.exp(2j * np.pi * ty[:, None] * np.fft.fftfreq(h)[None, :])
    ex = np.exp(2j * np.pi * tx[:, None] * np.fft.fftfreq(w)[None, :])
    return ty, tx, ey, ex


def _local_dft(product: np.ndarray, ey: np.ndarray, ex: np.ndarray) -> np.ndarray:
    """Inverse DFT of a spectrum product on the fine lag grid."""
    return ey @ product @ ex.T / product.size


def subpixel_shift_estimate(f, g, precondition: bool = False, trim_px: int = 2,
                            upsample: int = 50, mask=None,
                            min_overlap_frac: float = 0.02) -> ShiftMeasurement:
    """Estimate the translation d with g approximately equal to f shifted by d.

    The integer part comes from the argmax of |ifft(G * conj(F))|; the
    sub-pixel part from direct DFT evaluation of the same correlation on a
    3x3-pixel neighborhood sampled ``upsample`` times per pixel. Inputs have
    their mean removed first so that flat fields register as featureless
    rather than as a spurious zero-shift match.

    With a ``mask`` (the valid-region indicator both inputs share) the peak is
    located on the overlap-normalized correlation instead: each lag is divided
    by the energy of both images inside the actual mask overlap, and lags with
    less than ``min_overlap_frac`` of the mask area in common are ignored.
    Without this, partially overlapping windows are biased toward small lags,
    because raw correlation rewards window overlap as much as content match.

    Returns a ShiftMeasurement with frame indices (0, 1); callers re-tag them.
    """
    fa = _as_square_array(f)
    ga = _as_square_array(g)
    if fa.shape != ga.shape:
        raise ValueError(f"shape mismatch: {fa.shape} vs {ga.shape}")
    if upsample < 1:
        raise ValueError(f"upsample factor must be >= 1, got {upsample}")
    if precondition:
        fa = scaling_gradient(fa, trim_px)
        ga = scaling_gradient(ga, trim_px)
    fa = fa - fa.mean()
    ga = ga - ga.mean()
    norm_f = float(np.linalg.norm(fa))
    norm_g = float(np.linalg.norm(ga))
    scale = max(np.abs(fa).max(initial=0.0), np.abs(ga).max(initial=0.0), _NORM_FLOOR)
    if norm_f < 1e-12 * scale * fa.shape[0] or norm_g < 1e-12 * scale * fa.shape[0]:
        raise FeaturelessFieldError("featureless field")

    product = np.fft.fft2(ga) * np.conj(np.fft.fft2(fa))
    corr_mag = np.abs(np.fft.ifft2(product))

    prod_ef = prod_eg = None
    if mask is not None:
        m = (np.asarray(mask) > 0).astype(float)
        if m.shape != fa.shape:
            raise ValueError(f"mask shape {m.shape} does not match {fa.shape}")
        spec_m = np.fft.fft2(m)
        prod_ef = spec_m * np.conj(np.fft.fft2(np.abs(fa) ** 2))
        prod_eg = np.fft.fft2(np.abs(ga) ** 2) * np.conj(spec_m)
        area = np.fft.ifft2(spec_m * np.conj(spec_m)).real
        e_f = np.fft.ifft2(prod_ef).real
        e_g = np.fft.ifft2(prod_eg).real
        envelope = np.sqrt(np.clip(e_f, 0, None) * np.clip(e_g, 0, None))
        usable = area >= max(min_overlap_frac * m.sum(), 9.0)
        if not usable.any():
            raise FeaturelessFieldError("featureless field (no usable mask overlap)")
        # rank lags by normalized correlation weighted with area^0.25: plain
        # normalized correlation lets a handful of accidentally matching
        # pixels in a sliver overlap outrank a solid match, while a full
        # area weight hands self-similar content the large-overlap advantage
        score = np.where(usable,
                         corr_mag / (envelope + _NORM_FLOOR) * np.clip(area, 0, None) ** 0.25,
                         0.0)
    else:
        score = corr_mag

    peak_idx = np.unravel_index(int(np.argmax(score)), score.shape)
    secondary = _secondary_peak(score, peak_idx)
    peak_score = float(score[peak_idx])
    peak_val = float(corr_mag[peak_idx])
    n = score.shape[0]
    delta = (_wrap_index(peak_idx[0], n), _wrap_index(peak_idx[1], score.shape[1]))

    if upsample > 1:
        ty, tx, ey, ex = _local_dft_grid(product.shape, delta, upsample)
        local = _local_dft(product, ey, ex)
        local_mag = np.abs(local)
        if prod_ef is not None:
            env = np.sqrt(np.clip(_local_dft(prod_ef, ey, ex).real, 0, None)
                          * np.clip(_local_dft(prod_eg, ey, ex).real, 0, None))
            local_mag = local_mag / (env + _NORM_FLOOR)
        li = np.unravel_index(int(np.argmax(local_mag)), local_mag.shape)
        peak_val = float(np.abs(local[li]))
        delta = (float(ty[li[0]]), float(tx[li[1]]))

    confidence = min(peak_val / (norm_f * norm_g + _NORM_FLOOR), 1.0)
    peak_ratio = peak_score / secondary if secondary > 0 else np.inf
    return ShiftMeasurement(frame_i=0, frame_j=1, delta=delta,
                            confidence=confidence, peak_ratio=peak_ratio)


def build_edges(n_frames: int, strategy: str = "temporal:2") -> list[tuple[int, int]]:
    """Candidate frame pairs to register.

    ``temporal:k`` pairs frames within k steps of acquisition order;
    ``all_pairs`` pairs everything (meant for n <= 200).
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    if strategy == "all_pairs":
        if n_frames > 200:
            raise ValueError("all_pairs is limited to 200 frames")
        return [(i, j) for i in range(n_frames) for j in range(i + 1, n_frames)]
    if strategy.startswith("temporal:"):
        k = int(strategy.split(":", 1)[1])
        if k < 1:
            raise ValueError(f"temporal window must be >= 1, got {k}")
        return [(i, j) for i in range(n_frames)
                for j in range(i + 1, min(i + k, n_frames - 1) + 1)]
    raise ValueError(f"unknown edge strategy {strategy!r}")


def _prepare_patches(objects, support: np.ndarray | None, use_magnitude: bool) -> list[np.ndarray]:
    """Mean-removed (within support) patches, zero outside the support."""
    out = []
    for obj in objects:
        arr = obj.data if isinstance(obj, ComplexField) else np.asarray(obj, dtype=np.complex128)
        if use_magnitude:
            arr = np.abs(arr).astype(np.complex128)
        if support is not None:
            m = support > 0
            area = int(m.sum())
            mu = arr[m].mean() if area else 0.0
            arr = np.where(m, arr - mu, 0.0)
        out.append(arr)
    return out


def connected_components(n_nodes: int, pairs) -> list[set[int]]:
    parent = list(range(n_nodes))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    groups: dict[int, set[int]] = {}
    for i in range(n_nodes):
        groups.setdefault(find(i), set()).add(i)
    return list(groups.values())


def measure_pairwise_shifts(objects, edges, config: RegisterConfig | None = None,
                            support: np.ndarray | None = None) -> PositionGraph:
    """Register every candidate edge and gate the results.

    ``delta`` reports position_j - position_i in sample-plane pixels: a patch
    whose scan position is larger shows the shared sample content displaced by
    the opposite amount, so the measured content shift is negated. Edges whose
    confidence or peak ratio falls below the configured thresholds (or that
    raise a featureless-field error) stay in the graph flagged as rejected.
    Raises GraphDisconnectedError when the accepted edges do not connect all
    frames.
    """
    cfg = config or RegisterConfig()
    patches = _prepare_patches(objects, support, cfg.use_magnitude)
    n = len(patches)
    graph = PositionGraph(n_nodes=n)
    mask = None if support is None else (np.asarray(support) > 0)
    # cheap integer-stage screen first; refine only plausible candidates
    screen_floor = 0.5 * cfg.min_confidence
    for i, j in edges:
        try:
            coarse = subpixel_shift_estimate(patches[i], patches[j],
                                             precondition=cfg.precondition,
                                             trim_px=cfg.trim_px, upsample=1,
                                             mask=mask)
            if coarse.confidence >= screen_floor and coarse.peak_ratio >= cfg.min_peak_ratio:
                est = subpixel_shift_estimate(patches[i], patches[j],
                                              precondition=cfg.precondition,
                                              trim_px=cfg.trim_px, upsample=cfg.upsample,
                                              mask=mask)
            else:
                est = coarse
        except FeaturelessFieldError:
            graph.edges.append(ShiftMeasurement(frame_i=i, frame_j=j, delta=(0.0, 0.0),
                                                confidence=0.0, peak_ratio=1.0,
                                                accepted=False))
            continue
        ok = est.confidence >= cfg.min_confidence and est.peak_ratio >= cfg.min_peak_ratio
        graph.edges.append(ShiftMeasurement(frame_i=i, frame_j=j,
                                            delta=(-est.delta[0], -est.delta[1]),
                                            confidence=est.confidence,
                                            peak_ratio=est.peak_ratio, accepted=ok))
    comps = connected_components(n, [(e.frame_i, e.frame_j) for e in graph.accepted()])
    if len(comps) > 1:
        raise GraphDisconnectedError(comps)
    return graph


def _conjugate_gradient(mat: np.ndarray, rhs: np.ndarray, rtol: float = 1e-10,
                        max_iter: int | None = None) -> np.ndarray:
    x = np.zeros_like(rhs)
    r = rhs - mat @ x
    p = r.copy()
    rs = float(r @ r)
    b_norm = float(np.linalg.norm(rhs))
    if b_norm == 0:
        return x
    limit = max_iter or 20 * len(rhs) + 50
    for _ in range(limit):
        if np.sqrt(rs) <= rtol * b_norm:
            break
        ap = mat @ p
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def solve_positions(graph: PositionGraph) -> np.ndarray:
    """Least-squares global positions from the accepted pairwise shifts.

    Minimizes sum_e w_e || (p_j - p_i) - delta_e ||^2 with w_e = confidence,
    anchored at p_0 = (0, 0). The y and x axes separate, each solved on the
    graph-Laplacian normal equations by conjugate gradients to a relative
    residual of 1e-10. Stores and returns the (n, 2) solution.
    """
    edges = graph.accepted()
    n = graph.n_nodes
    comps = connected_components(n, [(e.frame_i, e.frame_j) for e in edges])
    if len(comps) > 1:
        raise GraphDisconnectedError(comps)
    lap = np.zeros((n, n))
    rhs = np.zeros((n, 2))
    for e in edges:
        w = max(float(e.confidence), 0.0)
        i, j = e.frame_i, e.frame_j
        lap[i, i] += w
        lap[j, j] += w
        lap[i, j] -= w
        lap[j, i] -= w
        d = np.asarray(e.delta, dtype=float)
        rhs[j] += w * d
        rhs[i] -= w * d
    reduced = lap[1:, 1:]
    positions = np.zeros((n, 2))
    for axis in range(2):
        positions[1:, axis] = _conjugate_gradient(reduced, rhs[1:, axis])
    graph.solution = positions
    return positions


def score_positions(recovered: np.ndarray, truth: np.ndarray) -> dict:
    """Per-frame position errors after removing the global translation gauge.

    No rotation or scale is fitted. Returns per-frame error vectors along with
    mean, std, and rms of the error magnitudes (all in pixels).
    """
    recovered = np.asarray(recovered, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if recovered.shape != truth.shape:
        raise ValueError(f"frame count mismatch: {recovered.shape} vs {truth.shape}")
    diff = recovered - truth
    diff = diff - diff.mean(axis=0, keepdims=True)
    err = np.linalg.norm(diff, axis=1)
    return {
        "errors": diff,
        "magnitudes": err,
        "mean": float(err.mean()),
        "std": float(err.std()),
        "rms": float(np.sqrt(np.mean(err**2))),
    }
