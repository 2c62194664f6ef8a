import numpy as np
import pytest

from modscan.field import ComplexField, Geometry, propagate_far, propagate_near, unitary_fft2
from modscan.simulate import (
    DriftModel,
    ScanPlan,
    _maze_walls,
    generate_modulator,
    generate_probe,
    generate_sample,
    grid_subset_indices,
    load_dataset,
    make_scan_plan,
    maze_boundaries,
    overlap_ratio,
    pair_overlap_ratio,
    probe_power_diameter,
    rasterize_maze,
    save_dataset,
    step_for_overlap,
    subset_dataset,
    synthesize_dataset,
)


def optics(n=128, wavelength=632.8e-9, z_md=30e-3, det_pitch=6.5e-6, z_sm=11.5e-3):
    pitch = wavelength * z_md / (n * det_pitch)
    return Geometry(wavelength=wavelength, z_sample_to_modulator=z_sm,
                    z_modulator_to_detector=z_md, detector_pitch=det_pitch,
                    sample_plane_pitch=pitch)


def small_scene(n=64, sample_px=256, photons=None, seed=3, drift=None,
                modulator_kind="random"):
    geo = optics(n)
    probe = generate_probe(geo, (n, n), "aperture", diameter=20 * geo.sample_plane_pitch,
                           defocus=1e-3)
    sample = generate_sample("maze", sample_px, (0.4, 1.0), (-0.4, 0.4),
                             pitch=geo.sample_plane_pitch, cells=16, wall_px=2,
                             seed=7, smooth_px=0.7)
    modulator = generate_modulator((n, n), geo.sample_plane_pitch, modulator_kind,
                                   feature_px=4, phase_depth=np.pi, seed=11)
    plan = make_scan_plan((3, 3), step_px=12.0, jitter_px=1.5, seed=5)
    return synthesize_dataset(sample, probe, modulator, plan, drift, geo,
                              photons=photons, seed=seed, grid_shape=(3, 3),
                              probe_meta={"kind": "aperture",
                                          "diameter_m": 20 * geo.sample_plane_pitch,
                                          "defocus_m": 1e-3})


class TestGenerateProbe:
    def test_plain_aperture_is_normalized_disk(self):
        geo = optics()
        probe = generate_probe(geo, (128, 128), "aperture", diameter=1e-3)
        assert probe.power() == pytest.approx(1.0, rel=1e-12)
        vals = np.abs(probe.data)
        nonzero = vals[vals > 0]
        assert np.allclose(nonzero, nonzero[0])

    def test_defocused_aperture_edge_stays_sharp(self):
        # deep near field: a 1 mm aperture a millimeter upstream blurs < 2 px
        geo = optics()
        probe = generate_probe(geo, (128, 128), "aperture", diameter=1e-3, defocus=1e-3)
        profile = np.abs(probe.data[64])
        plateau = np.median(profile[profile > 0.5 * profile.max()])
        right = profile[64:] / plateau
        x_hi = int(np.nonzero(right >= 0.8)[0].max())
        x_lo = x_hi + int(np.nonzero(right[x_hi:] <= 0.1)[0].min())
        # sub-pixel crossing positions on the falling edge
        cross_hi = x_hi + (right[x_hi] - 0.8) / (right[x_hi] - right[x_hi + 1])
        cross_lo = x_lo - (0.1 - right[x_lo]) / (right[x_lo - 1] - right[x_lo])
        assert cross_lo - cross_hi < 2.0

    def test_divergent_probe_spreads_with_distance(self):
        geo = optics()
        probe = generate_probe(geo, (128, 128), "divergent",
                               diameter=0.8e-3, focal=-50e-3)
        widths = []
        for extra in (0.0, 8e-3, 16e-3):
            p = propagate_near(probe, extra, geo.wavelength) if extra else probe
            intensity = np.abs(p.data) ** 2
            # half-max width from the azimuthal mean, robust to edge ringing
            r = np.hypot(np.arange(128)[:, None] - 64, np.arange(128)[None, :] - 64)
            bins = np.arange(0, 60)
            profile = np.array([intensity[(r >= b) & (r < b + 1)].mean() for b in bins])
            above = np.nonzero(profile >= 0.5 * profile.max())[0]
            widths.append(float(above.max()))
        assert widths[0] < widths[1] < widths[2]

    def test_divergent_probe_rejects_undersampled_lens(self):
        geo = optics()
        with pytest.raises(ValueError, match="focal"):
            generate_probe(geo, (128, 128), "divergent", diameter=0.8e-3, focal=-5e-3)

    def test_too_large_rejected(self):
        geo = optics()
        with pytest.raises(ValueError):
            generate_probe(geo, (64, 64), "aperture",
                           diameter=60 * geo.sample_plane_pitch)


class TestGenerateSample:
    def test_seeded_determinism(self):
        a = generate_sample("maze", 128, (0.3, 1.0), (-0.5, 0.5), seed=4)
        b = generate_sample("maze", 128, (0.3, 1.0), (-0.5, 0.5), seed=4)
        assert np.array_equal(a.data, b.data)
        c = generate_sample("maze", 128, (0.3, 1.0), (-0.5, 0.5), seed=5)
        assert not np.array_equal(a.data, c.data)

    def test_degenerate_ranges_give_unity(self):
        f = generate_sample("maze", 128, (1.0, 1.0), (0.0, 0.0), seed=1)
        assert np.allclose(f.data, 1.0)

    def test_wall_density_matches_rasterization_oracle(self):
        size, cells, wall_px, seed = 128, 16, 1, 9
        f = generate_sample("maze", size, (0.25, 1.0), (0.0, 0.0), cells=cells,
                            wall_px=wall_px, seed=seed, smooth_px=0.0)
        wall_pixels = int(np.sum(np.abs(f.data) == 0.25))
        # independent recount: walk every wall segment, collect pixel sets
        rng = np.random.default_rng(seed)
        wall_h, wall_v = _maze_walls(cells, rng)
        by = maze_boundaries(size, cells, rng)
        bx = maze_boundaries(size, cells, rng)

        def post(b):
            return min(max(int(b) - wall_px // 2, 0), size - wall_px)

        pixels = set()
        for r in range(cells + 1):
            for c in range(cells):
                if wall_h[r, c]:
                    for y in range(post(by[r]), post(by[r]) + wall_px):
                        for x in range(post(bx[c]), post(bx[c + 1]) + wall_px):
                            pixels.add((y, x))
        for r in range(cells):
            for c in range(cells + 1):
                if wall_v[r, c]:
                    for x in range(post(bx[c]), post(bx[c]) + wall_px):
                        for y in range(post(by[r]), post(by[r + 1]) + wall_px):
                            pixels.add((y, x))
        assert wall_pixels == len(pixels)

    def test_rejects_bad_ranges(self):
        with pytest.raises(ValueError):
            generate_sample("maze", 128, (0.0, 1.0), (0.0, 0.0))
        with pytest.raises(ValueError):
            generate_sample("maze", 128, (0.5, 1.0), (-4.0, 0.0))


class TestGenerateModulator:
    def test_zero_depth_is_unity(self):
        m = generate_modulator((64, 64), 1e-6, "random", phase_depth=0.0, seed=2)
        assert np.allclose(m.data, 1.0)

    def test_unit_amplitude_everywhere(self):
        m = generate_modulator((64, 64), 1e-6, "random", feature_px=4,
                               phase_depth=np.pi, seed=2)
        assert np.allclose(np.abs(m.data), 1.0, atol=1e-14)

    def test_grating_period_in_physical_units(self):
        # 54 px at 7.1 nm pitch sits between the two manually measured periods
        pitch = 7.1e-9
        period_px = 54
        m = generate_modulator((128, 128), pitch, "grating", period_px=period_px,
                               phase_depth=1.0)
        physical = period_px * m.pitch
        assert 379e-9 <= physical <= 388e-9
        row = np.angle(m.data[0])
        assert np.array_equal(row, np.angle(m.data[-1]))

    def test_random_phase_decorrelates_past_feature_size(self):
        feature = 4
        m = generate_modulator((256, 256), 1e-6, "random", feature_px=feature,
                               phase_depth=np.pi, seed=6)
        phase = np.angle(m.data)
        phase = phase - phase.mean()
        var = np.mean(phase * phase)
        for lag in (feature + 1, feature + 3, 2 * feature):
            rho = np.mean(phase * np.roll(phase, lag, axis=1)) / var
            assert abs(rho) < 0.1

    def test_tiny_period_rejected(self):
        with pytest.raises(ValueError):
            generate_modulator((64, 64), 1e-6, "grating", period_px=1.5)


class TestScanPlan:
    def test_2x2_symmetric_positions(self):
        plan = make_scan_plan((2, 2), 10.0)
        got = {tuple(p) for p in plan.positions}
        assert got == {(-5.0, -5.0), (-5.0, 5.0), (5.0, -5.0), (5.0, 5.0)}

    def test_12x12_has_144_frames(self):
        assert make_scan_plan((12, 12), 8.0).n_frames == 144

    def test_serpentine_keeps_neighbors_adjacent(self):
        plan = make_scan_plan((3, 4), 10.0)
        gaps = np.linalg.norm(np.diff(plan.positions, axis=0), axis=1)
        assert np.allclose(gaps, 10.0)

    def test_jitter_bounded_and_deterministic(self):
        a = make_scan_plan((4, 4), 10.0, jitter_px=2.0, seed=13)
        b = make_scan_plan((4, 4), 10.0, jitter_px=2.0, seed=13)
        assert np.array_equal(a.positions, b.positions)
        base = make_scan_plan((4, 4), 10.0).positions
        assert np.abs(a.positions - base).max() <= 2.0

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            make_scan_plan((8, 8), 40.0, sample_size=256, probe_diameter_px=40)


class TestOverlap:
    def test_coincident_disks(self):
        assert pair_overlap_ratio(0.0, 10.0) == 1.0

    def test_separated_disks(self):
        assert pair_overlap_ratio(10.0, 10.0) == 0.0
        assert pair_overlap_ratio(15.0, 10.0) == 0.0

    def test_half_diameter_separation(self):
        assert pair_overlap_ratio(5.0, 10.0) == pytest.approx(0.3910, abs=5e-5)

    def test_step_for_overlap_inverts(self):
        for target in (0.1, 0.25, 0.4, 0.6):
            d = step_for_overlap(44.0, target)
            assert pair_overlap_ratio(d, 44.0) == pytest.approx(target, abs=1e-6)

    def test_plan_overlap_summary(self):
        plan = make_scan_plan((3, 3), 10.0)
        out = overlap_ratio(plan, 20.0)
        assert out["mean"] == pytest.approx(pair_overlap_ratio(10.0, 20.0), abs=1e-12)


class TestSynthesize:
    def test_object_free_baseline(self):
        geo = optics(64)
        probe = generate_probe(geo, (64, 64), "aperture",
                               diameter=20 * geo.sample_plane_pitch)
        ones = ComplexField(np.ones((256, 256), complex), geo.sample_plane_pitch)
        unity_mod = generate_modulator((64, 64), geo.sample_plane_pitch, "random",
                                       phase_depth=0.0)
        plan = make_scan_plan((2, 2), 16.0)
        ds = synthesize_dataset(ones, probe, unity_mod, plan, None, geo)
        phi = propagate_near(probe, geo.z_sample_to_modulator, geo.wavelength)
        expected = np.abs(propagate_far(phi).data) ** 2
        for k in range(ds.n_frames):
            assert np.allclose(ds.frames[k], expected, atol=1e-12 * expected.max())

    def test_noiseless_frames_conserve_probe_power(self):
        ds = small_scene()
        # unit-modulus sample regions and unitary propagation keep each
        # frame's total below the probe power only through sample absorption
        for frame in ds.frames:
            assert frame.sum() <= 1.0 + 1e-9
            assert frame.sum() > 0.1

    def test_noiseless_is_deterministic(self):
        a = small_scene(seed=1)
        b = small_scene(seed=2)
        assert np.array_equal(a.frames, b.frames)

    def test_poisson_totals_concentrate(self):
        photons = 1e6
        ds = small_scene(photons=photons, seed=21)
        totals = ds.frames.sum(axis=(1, 2))
        within = np.abs(totals - photons) <= 5 * np.sqrt(photons)
        assert within.mean() >= 0.99

    def test_poisson_noise_scales_inverse_sqrt(self):
        clean = small_scene().frames
        rel = []
        for photons in (1e5, 4e5):
            noisy = small_scene(photons=photons, seed=30).frames
            scale = photons / clean.sum(axis=(1, 2), keepdims=True)
            mu = clean * scale
            keep = mu > 0.5 * mu.mean()
            rel.append(float(np.std((noisy[keep] - mu[keep]) / mu[keep])))
        assert rel[0] / rel[1] == pytest.approx(2.0, rel=0.2)

    def test_global_sample_phase_invisible(self):
        geo = optics(64)
        probe = generate_probe(geo, (64, 64), "aperture",
                               diameter=18 * geo.sample_plane_pitch)
        sample = generate_sample("maze", 256, (0.5, 1.0), (-0.3, 0.3),
                                 pitch=geo.sample_plane_pitch, seed=2)
        mod = generate_modulator((64, 64), geo.sample_plane_pitch, "random",
                                 feature_px=4, seed=3)
        plan = make_scan_plan((2, 2), 12.0)
        a = synthesize_dataset(sample, probe, mod, plan, None, geo)
        rotated = sample.with_data(sample.data * np.exp(1j * 0.83))
        b = synthesize_dataset(rotated, probe, mod, plan, None, geo)
        assert np.max(np.abs(a.frames - b.frames)) < 1e-10 * a.frames.max()

    def test_plan_drift_translation_ambiguity_without_modulator(self):
        # shifting the plan by a constant and the probe drift by its negative
        # only translates each exit wave, which an unmodulated far field
        # cannot see; the modulator is what breaks this degeneracy
        geo = optics(64)
        probe = generate_probe(geo, (64, 64), "aperture",
                               diameter=18 * geo.sample_plane_pitch)
        sample = generate_sample("maze", 256, (0.5, 1.0), (-0.3, 0.3),
                                 pitch=geo.sample_plane_pitch, seed=2)
        unity = generate_modulator((64, 64), geo.sample_plane_pitch, "random",
                                   phase_depth=0.0)
        plan = make_scan_plan((2, 2), 12.0)
        delta = np.array([3.0, -2.0])
        shifted_plan = ScanPlan(positions=plan.positions + delta)
        drift_a = np.zeros((4, 2))
        drift_b = drift_a - delta
        a = synthesize_dataset(sample, probe, unity, plan, drift_a, geo)
        b = synthesize_dataset(sample, probe, unity, shifted_plan, drift_b, geo)
        assert np.max(np.abs(a.frames - b.frames)) < 1e-8 * a.frames.max()
        # with a strong modulator the same change is visible
        strong = generate_modulator((64, 64), geo.sample_plane_pitch, "random",
                                    feature_px=4, phase_depth=np.pi, seed=3)
        am = synthesize_dataset(sample, probe, strong, plan, drift_a, geo)
        bm = synthesize_dataset(sample, probe, strong, shifted_plan, drift_b, geo)
        assert np.max(np.abs(am.frames - bm.frames)) > 1e-3 * am.frames.max()

    def test_out_of_bounds_plan_rejected(self):
        geo = optics(64)
        probe = generate_probe(geo, (64, 64), "aperture",
                               diameter=18 * geo.sample_plane_pitch)
        sample = generate_sample("maze", 128, (0.5, 1.0), (0.0, 0.0),
                                 pitch=geo.sample_plane_pitch, seed=2)
        mod = generate_modulator((64, 64), geo.sample_plane_pitch, "random", seed=1)
        plan = make_scan_plan((2, 2), 70.0)
        with pytest.raises(ValueError):
            synthesize_dataset(sample, probe, mod, plan, None, geo)


class TestDriftModel:
    def test_none(self):
        assert np.array_equal(DriftModel().offsets(5), np.zeros((5, 2)))

    def test_linear_total_amplitude(self):
        d = DriftModel(kind="linear", amplitude=5.0).offsets(81)
        assert np.allclose(d[0], 0.0)
        assert np.linalg.norm(d[-1]) == pytest.approx(5.0, rel=1e-12)
        assert abs(d[-1, 1] / d[-1, 0]) == pytest.approx(10.0, rel=1e-9)

    def test_random_walk_seeded(self):
        a = DriftModel(kind="random_walk", amplitude=2.0, seed=4).offsets(20)
        b = DriftModel(kind="random_walk", amplitude=2.0, seed=4).offsets(20)
        assert np.array_equal(a, b)
        assert np.allclose(a[0], 0.0)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        ds = small_scene(photons=1e5, seed=8)
        save_dataset(ds, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert back.n_frames == ds.n_frames
        assert np.array_equal(back.frames, ds.frames.astype("<f4").astype(np.float64))
        assert back.geometry.wavelength == ds.geometry.wavelength
        assert np.allclose(back.truth.plan.positions, ds.truth.plan.positions)
        assert back.probe_meta["diameter_m"] == ds.probe_meta["diameter_m"]
        assert back.photons == 1e5

    def test_overwrite_guard(self, tmp_path):
        ds = small_scene()
        save_dataset(ds, tmp_path / "ds")
        with pytest.raises(FileExistsError):
            save_dataset(ds, tmp_path / "ds")
        save_dataset(ds, tmp_path / "ds", overwrite=True)

    def test_subset(self):
        ds = small_scene()
        indices = grid_subset_indices((3, 3), 2)
        assert indices == [0, 2, 6, 8]  # serpentine order flips odd rows
        sub = subset_dataset(ds, [0, 2, 6, 8])
        assert sub.n_frames == 4
        assert np.array_equal(sub.frames[1], ds.frames[2])
        assert np.allclose(sub.truth.plan.positions[1], ds.truth.plan.positions[2])
