import numpy as np
import pytest

from griddown.grids import BilinearMap, canonical_geometry, mini_geometry
from griddown.synthetic import (
    GeneratorConfig,
    WeatherGenerator,
    catalog_digest,
    catalog_from_json,
    catalog_subset,
    catalog_to_json,
    default_catalog,
    domain_generators,
    level_shape_factor,
    vertical_gradient,
)


@pytest.fixture(scope="module")
def gen():
    return WeatherGenerator(canonical_geometry(), GeneratorConfig(seed=1, domain_seed=4))


def radial_psd(f):
    n = f.shape[0]
    F = np.fft.fft2(f - f.mean())
    P = np.abs(F) ** 2
    kx = np.fft.fftfreq(n)[None, :]
    ky = np.fft.fftfreq(n)[:, None]
    rb = np.rint(np.sqrt(kx**2 + ky**2) * n).astype(int)
    sums = np.bincount(rb.ravel(), P.ravel())
    cnts = np.bincount(rb.ravel())
    return sums[1 : n // 2 + 1] / np.maximum(cnts[1 : n // 2 + 1], 1)


class TestCatalog:
    def test_table_mirror(self):
        cat = {v.name: v for v in default_catalog()}
        assert cat["uv"].levels == (10.0, 21.0, 63.0, 117.0)
        assert cat["t"].levels == (1.5, 11.0, 42.0, 91.0)
        assert cat["ug"].gradient_levels == (273.0, 21.0)
        assert cat["tg"].gradient_levels == (231.0, 11.0)
        assert cat["me"].kind == "hr_static"
        assert len(default_catalog()) == 16

    def test_subsets(self):
        full = default_catalog()
        uv_only = catalog_subset(full, "uv_only")
        assert [v.name for v in uv_only] == ["uv"]
        no_wind = {v.name for v in catalog_subset(full, "no_wind")}
        assert no_wind.isdisjoint({"uv", "u", "v", "ug", "vg"})
        assert {"t", "tg", "p0", "me"} <= no_wind
        with pytest.raises(ValueError):
            catalog_subset(full, "bogus")

    def test_digest_and_json_round_trip(self):
        full = default_catalog()
        assert catalog_from_json(catalog_to_json(full)) == full
        assert catalog_digest(full) != catalog_digest(catalog_subset(full, "uv_only"))

    def test_gradient_formula_direct(self):
        # var(GZ2)=10, var(GZ1)=4 over a 252 m layer
        assert vertical_gradient(np.float64(10.0), 4.0, 273.0, 21.0) == pytest.approx(
            0.0238, abs=1e-4
        )

    def test_level_shape_factor_anchored_at_10m(self):
        assert level_shape_factor(10.0) == pytest.approx(1.0)
        assert level_shape_factor(117.0) > level_shape_factor(21.0) > 1.0


class TestTruthField:
    def test_deterministic_bit_identical(self, gen):
        again = WeatherGenerator(canonical_geometry(), GeneratorConfig(seed=1, domain_seed=4))
        assert np.array_equal(gen.generate_truth_field(37), again.generate_truth_field(37))

    def test_nonnegative_and_finite(self, gen):
        f = gen.generate_truth_field(5)
        assert np.all(f > 0) and np.all(np.isfinite(f))

    def test_spectral_slope_flat_terrain(self):
        g = WeatherGenerator(canonical_geometry(), GeneratorConfig(seed=2, terrain_amp=0.0))
        slopes = []
        for t in range(0, 60 * 7, 7):
            f = g.generate_truth_field(t).astype(np.float64)
            p = radial_psd(f)
            n = f.shape[0]
            ks = np.arange(1, n // 2 + 1) / n
            m = (ks >= 0.03) & (ks <= 0.25)
            A = np.vstack([np.ones(m.sum()), np.log(ks[m])]).T
            coef, *_ = np.linalg.lstsq(A, np.log(p[m]), rcond=None)
            slopes.append(coef[1])
        assert abs(np.mean(slopes) - (-3.0)) < 0.5

    def test_spatially_stationary_without_terrain(self):
        g = WeatherGenerator(
            canonical_geometry(), GeneratorConfig(seed=3, terrain_amp=0.0, diurnal_amp=0.0)
        )
        mean_field = np.zeros((g.fine_n, g.fine_n))
        n = 150
        for t in range(0, n * 5, 5):
            mean_field += g.generate_truth_field(t).astype(np.float64)
        mean_field /= n
        h = g.fine_n // 2
        quads = [
            mean_field[:h, :h].mean(),
            mean_field[:h, h:].mean(),
            mean_field[h:, :h].mean(),
            mean_field[h:, h:].mean(),
        ]
        assert (max(quads) - min(quads)) / np.mean(quads) < 0.10

    def test_temporal_continuity(self, gen):
        a = gen.generate_truth_field(40).astype(np.float64)
        b = gen.generate_truth_field(41).astype(np.float64)
        far = gen.generate_truth_field(500).astype(np.float64)
        corr_near = np.corrcoef(a.ravel(), b.ravel())[0, 1]
        corr_far = np.corrcoef(a.ravel(), far.ravel())[0, 1]
        assert corr_near > 0.9 > abs(corr_far) + 0.2


class TestDeriveSample:
    def test_component_identity_all_levels(self, gen):
        for t in (0, 13, 77):
            r = gen.derive_sample(t)
            uv = r.lr_stack["uv"].astype(np.float64)
            u = r.lr_stack["u"].astype(np.float64)
            v = r.lr_stack["v"].astype(np.float64)
            assert np.abs(u**2 + v**2 - uv**2).max() < 1e-4

    def test_pythagoras_three_four_five(self, gen):
        r = gen.derive_sample(9)
        u = r.lr_stack["u"].astype(np.float64)
        v = r.lr_stack["v"].astype(np.float64)
        uv = np.sqrt(u**2 + v**2)
        assert np.allclose(uv, r.lr_stack["uv"], atol=1e-4)

    def test_gradient_caption_formula(self, gen):
        r = gen.derive_sample(21, keep_internal=True)
        zu, zl = r.internal["wind_grad_levels"]
        for name, up, lo in (
            ("ug", r.internal["u_upper"], r.internal["u_lower"]),
            ("vg", r.internal["v_upper"], r.internal["v_lower"]),
        ):
            expect = (up - lo) / (zu - zl)
            assert np.abs(r.lr_stack[name][0].astype(np.float64) - expect).max() < 1e-8
        tzu, tzl = r.internal["temp_grad_levels"]
        expect_tg = (r.internal["t_upper"] - r.internal["t_lower"]) / (tzu - tzl)
        assert np.abs(r.lr_stack["tg"][0].astype(np.float64) - expect_tg).max() < 1e-8

    def test_constant_truth_passthrough(self, gen):
        c = 5.0
        truth = np.full((gen.fine_n, gen.fine_n), c, dtype=np.float32)
        r = gen.derive_sample(10, truth=truth)
        assert np.allclose(r.predictand, c, atol=1e-5)
        assert np.allclose(r.lr_stack["uv"][0], c, atol=1e-5)
        assert np.allclose(r.skip_uv10, c, atol=1e-5)

    def test_range_invariants(self, gen):
        for t in (3, 44, 100):
            r = gen.derive_sample(t)
            assert np.all(r.predictand >= 0)
            assert np.all((r.hr_static["mg"] >= 0) & (r.hr_static["mg"] <= 1))
            assert np.all(r.hr_static["z0"] > 0)
            assert np.all(r.lr_stack["sd"] >= 0)
            assert np.all(np.abs(r.lr_stack["cx"]) <= 1.0)
            assert np.all(r.lr_stack["h"] > 0)
            assert np.all(r.lr_stack["wge"] >= r.lr_stack["uv"][0] - 1e-4)

    def test_shapes_match_geometry(self, gen):
        r = gen.derive_sample(0)
        assert r.predictand.shape == (48, 48)
        assert r.lr_stack["uv"].shape == (4, 16, 16)
        assert r.lr_stack["p0"].shape == (1, 16, 16)
        assert r.hr_static["me"].shape == (64, 64)
        assert r.skip_uv10.shape == (16, 16)

    def test_catalog_subset_restricts_stack(self):
        geo = mini_geometry()
        g = WeatherGenerator(
            geo, GeneratorConfig(seed=5), catalog=catalog_subset(default_catalog(), "no_wind")
        )
        r = g.derive_sample(0)
        assert "uv" not in r.lr_stack and "u" not in r.lr_stack
        assert "t" in r.lr_stack and "tg" in r.lr_stack
        # the skip rides along regardless
        assert r.skip_uv10.shape == (8, 8)

    def test_derive_deterministic(self, gen):
        again = WeatherGenerator(canonical_geometry(), GeneratorConfig(seed=1, domain_seed=4))
        r1, r2 = gen.derive_sample(55), again.derive_sample(55)
        for k in r1.lr_stack:
            assert np.array_equal(r1.lr_stack[k], r2.lr_stack[k])
        assert np.array_equal(r1.predictand, r2.predictand)


class TestDownscalingSignal:
    def test_signal_exists_but_not_trivial(self, gen):
        geo = gen.geometry
        bmap = BilinearMap(geo.lr_grid, geo.predictand_grid)
        cors, residual_high_freq = [], []
        for t in range(60):
            r = gen.derive_sample(t)
            base = bmap.apply(r.lr_stack["uv"][0])
            cors.append(np.corrcoef(base.ravel(), r.predictand.ravel())[0, 1])
            res = r.predictand.astype(np.float64) - base
            p = radial_psd(res)
            ks = np.arange(1, 25) / 48
            residual_high_freq.append(p[ks > 0.1].sum())
        assert np.mean(cors) > 0.8
        assert min(residual_high_freq) > 0

    def test_domain_generators_distinct(self):
        gens = domain_generators(canonical_geometry(), GeneratorConfig(seed=0), n_domains=3)
        assert len({g.s0 for g in gens}) == 3
        t0 = [g.generate_truth_field(0) for g in gens]
        assert not np.array_equal(t0[0], t0[1])
        assert not np.array_equal(gens[0].me_fine, gens[1].me_fine)
