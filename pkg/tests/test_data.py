"""Dataset generation determinism and velocity-field oracle cross-checks."""

import numpy as np
import pytest

from meanflow.container import ContainerError
from meanflow.data import (
    DatasetSpec,
    brute_force_mean_velocity,
    load_dataset,
    make_dataset,
    make_oracle,
    mode_centers,
    oracle_mean_velocity,
    oracle_velocity,
    save_dataset,
)
from meanflow.rng import derive_rng


class TestDatasets:
    def test_point_mass_is_constant(self):
        spec = DatasetSpec(kind="point_mass", point=(1.0, -1.0), samples_per_label=100)
        ds = make_dataset(spec)
        assert np.all(ds.x == np.array([1.0, -1.0]))
        assert ds.x.shape == (100, 1, 2)

    def test_regeneration_is_bit_identical(self):
        spec = DatasetSpec(kind="gaussian_mixture", n_labels=4, samples_per_label=200,
                           seed=7, radius=3.0, sd=0.4)
        a, b = make_dataset(spec), make_dataset(spec)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.labels, b.labels)

    def test_mixture_mode_means(self):
        spec = DatasetSpec(kind="gaussian_mixture", n_labels=8, samples_per_label=1250,
                           seed=3, radius=4.0, sd=0.3)
        ds = make_dataset(spec)
        centers = mode_centers(spec)
        for k in range(8):
            pts = ds.x[ds.labels == k].reshape(-1, 2)
            assert np.linalg.norm(pts.mean(axis=0) - centers[k]) <= 0.05

    def test_sequence_ar_shape_and_determinism(self):
        spec = DatasetSpec(kind="sequence_ar", n_labels=3, samples_per_label=50,
                           seq_len=16, dim=8, seed=5)
        ds = make_dataset(spec)
        assert ds.x.shape == (150, 16, 8)
        assert np.array_equal(ds.x, make_dataset(spec).x)

    def test_sequence_ar_autocorrelation_tracks_label(self):
        spec = DatasetSpec(kind="sequence_ar", n_labels=2, samples_per_label=400,
                           seq_len=32, dim=4, seed=6, ar_coeffs=(-0.7, 0.7))
        ds = make_dataset(spec)
        for k, rho in ((0, -0.7), (1, 0.7)):
            seqs = ds.x[ds.labels == k]
            a, b = seqs[:, :-1, :].ravel(), seqs[:, 1:, :].ravel()
            est = np.corrcoef(a, b)[0, 1]
            assert abs(est - rho) <= 0.05

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown dataset kind"):
            DatasetSpec(kind="spiral")

    def test_cache_roundtrip(self, tmp_path):
        spec = DatasetSpec(kind="gaussian_mixture", n_labels=4, samples_per_label=64,
                           seed=1, radius=2.0, sd=0.2)
        ds = make_dataset(spec)
        path = tmp_path / "ds.bin"
        save_dataset(path, ds)
        loaded = load_dataset(path)
        assert loaded.spec == spec
        assert np.array_equal(loaded.x, ds.x)
        assert np.array_equal(loaded.labels, ds.labels)
        save_dataset(tmp_path / "ds2.bin", loaded)
        assert path.read_bytes() == (tmp_path / "ds2.bin").read_bytes()

    def test_cache_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ContainerError, match="magic"):
            load_dataset(path)


class TestVelocityOracles:
    def test_point_mass_example(self):
        spec = DatasetSpec(kind="point_mass", point=(1.0, -1.0))
        np.testing.assert_allclose(
            oracle_velocity(spec, np.array([0.0, 0.0]), 0.5), [-2.0, 2.0], atol=1e-14
        )

    def test_gaussian_unit_sd_vanishes_at_half(self):
        spec = DatasetSpec(kind="isotropic_gaussian", sd=1.0)
        rng = derive_rng(0, 41)
        x = rng.normal(size=(5, 2))
        np.testing.assert_allclose(oracle_velocity(spec, x, 0.5), 0.0, atol=1e-14)

    def test_gaussian_unit_sd_identity_at_one(self):
        spec = DatasetSpec(kind="isotropic_gaussian", sd=1.0)
        x = np.array([1.0, 0.0])
        np.testing.assert_allclose(oracle_velocity(spec, x, 1.0), x, atol=1e-14)

    def test_point_mass_singular_at_zero(self):
        spec = DatasetSpec(kind="point_mass", point=(0.0, 0.0))
        with pytest.raises(ValueError, match="singular"):
            oracle_velocity(spec, np.array([1.0, 1.0]), 0.0)


class TestMeanVelocityOracles:
    def test_point_mass_r_independent(self):
        spec = DatasetSpec(kind="point_mass", point=(1.0, -1.0))
        x = np.array([0.3, 0.7])
        t = 0.5
        base = oracle_mean_velocity(spec, x, 0.0, t)
        for r in np.arange(0.0, t + 1e-9, 0.1):
            np.testing.assert_allclose(oracle_mean_velocity(spec, x, r, t), base, atol=1e-12)

    def test_gaussian_unit_sd_zero_over_full_interval(self):
        spec = DatasetSpec(kind="isotropic_gaussian", sd=1.0)
        rng = derive_rng(1, 41)
        for x in rng.normal(size=(5, 2)):
            np.testing.assert_allclose(oracle_mean_velocity(spec, x, 0.0, 1.0), 0.0, atol=1e-12)

    def test_gaussian_closed_form_example_against_quadrature(self):
        spec = DatasetSpec(kind="isotropic_gaussian", sd=2.0)
        x = np.array([1.0, 0.0])
        u = oracle_mean_velocity(spec, x, 0.25, 0.75)
        bf = brute_force_mean_velocity(spec, x, 0.25, 0.75, n_quad=10_000)
        np.testing.assert_allclose(u, bf, atol=1e-6)

    def test_diagonal_matches_instantaneous(self):
        rng = derive_rng(2, 41)
        for spec in (
            DatasetSpec(kind="point_mass", point=(1.0, -1.0)),
            DatasetSpec(kind="isotropic_gaussian", sd=0.7),
        ):
            for _ in range(5):
                x = rng.normal(size=2)
                t = rng.uniform(0.1, 0.99)
                np.testing.assert_allclose(
                    oracle_mean_velocity(spec, x, t, t), oracle_velocity(spec, x, t), atol=1e-9
                )

    def test_quadrature_diagonal_limit(self):
        # the interval average differs from the endpoint by ~ (delta/2) dv/dtau,
        # so delta = 1e-7 keeps that truncation under the 1e-6 bound
        spec = DatasetSpec(kind="gaussian_mixture", n_labels=4, radius=2.0, sd=0.5)
        rng = derive_rng(3, 41)
        for _ in range(5):
            x = rng.normal(size=2) * 1.5
            t = rng.uniform(0.3, 0.9)
            u = brute_force_mean_velocity(spec, x, t - 1e-7, t, n_quad=128)
            v = oracle_velocity(spec, x, t)
            assert np.max(np.abs(u - v)) <= 1e-6 * (1.0 + np.max(np.abs(v)))


class TestBruteForce:
    def test_agrees_with_gaussian_closed_form(self):
        spec = DatasetSpec(kind="isotropic_gaussian", sd=2.0)
        rng = derive_rng(4, 41)
        worst = 0.0
        for _ in range(10):
            x = rng.normal(size=2) * 2
            r, t = np.sort(rng.uniform(0.05, 0.95, size=2))
            if t - r < 0.05:
                continue
            u = oracle_mean_velocity(spec, x, r, t)
            bf = brute_force_mean_velocity(spec, x, r, t, n_quad=10_000)
            worst = max(worst, float(np.max(np.abs(u - bf))))
        assert worst <= 1e-6

    def test_agrees_with_point_mass(self):
        spec = DatasetSpec(kind="point_mass", point=(1.0, -1.0))
        x = np.array([-0.5, 0.5])
        u = brute_force_mean_velocity(spec, x, 0.2, 0.9, n_quad=4000)
        np.testing.assert_allclose(u, (x - np.array([1.0, -1.0])) / 0.9, atol=1e-8)

    def test_quadrature_refinement_converges(self):
        spec = DatasetSpec(kind="gaussian_mixture", n_labels=8, radius=3.0, sd=0.5)
        x = np.array([1.2, -0.4])
        coarse = brute_force_mean_velocity(spec, x, 0.1, 0.9, n_quad=1000)
        fine = brute_force_mean_velocity(spec, x, 0.1, 0.9, n_quad=10_000)
        assert np.max(np.abs(coarse - fine)) < 1e-6

    def test_single_mode_mixture_approaches_point_mass(self):
        mix = DatasetSpec(kind="gaussian_mixture", n_labels=1, radius=1.0, sd=1e-3)
        point = DatasetSpec(kind="point_mass", point=(1.0, 0.0))
        rng = derive_rng(5, 41)
        for _ in range(5):
            x = rng.normal(size=2)
            bf = brute_force_mean_velocity(mix, x, 0.3, 0.8, n_quad=4000)
            exact = oracle_mean_velocity(point, x, 0.3, 0.8)
            assert np.max(np.abs(bf - exact)) <= 1e-3

    def test_empty_interval_rejected(self):
        spec = DatasetSpec(kind="isotropic_gaussian", sd=1.0)
        with pytest.raises(ValueError, match="empty interval"):
            brute_force_mean_velocity(spec, np.zeros(2), 0.5, 0.5)

    def test_min_quadrature_enforced(self):
        spec = DatasetSpec(kind="isotropic_gaussian", sd=1.0)
        with pytest.raises(ValueError, match="n_quad"):
            brute_force_mean_velocity(spec, np.zeros(2), 0.1, 0.9, n_quad=10)


def test_oracle_field_dispatch():
    field = make_oracle(DatasetSpec(kind="isotropic_gaussian", sd=0.5))
    x = np.array([0.4, -0.2])
    np.testing.assert_allclose(field.u(x, 0.5, 0.5), field.v(x, 0.5), atol=1e-12)
    with pytest.raises(ValueError, match="no velocity oracle"):
        make_oracle(DatasetSpec(kind="sequence_ar", seq_len=4, dim=2))
