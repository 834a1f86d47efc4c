"""Synthetic datasets, episode splits, accuracy metrics and domain shift."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from promptvar.datasets import (
    EVAL_RESERVE,
    Dataset,
    SyntheticDatasetSpec,
    apply_domain_shift,
    dump_dataset,
    generate_dataset,
    harmonic_mean,
    load_dataset,
    make_episode,
    split_view,
)


class TestGeneration:
    def test_same_spec_reproduces_exactly(self, world):
        spec = SyntheticDatasetSpec(seed=6)
        a = generate_dataset(world, spec)
        b = generate_dataset(world, spec)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.prototypes, b.prototypes)
        assert a.class_token_ids == b.class_token_ids

    def test_different_seeds_pick_different_data(self, world):
        a = generate_dataset(world, SyntheticDatasetSpec(seed=6))
        b = generate_dataset(world, SyntheticDatasetSpec(seed=7))
        assert not np.array_equal(a.features, b.features)

    def test_zero_noise_collapses_each_class_to_its_prototype(self, world):
        spec = SyntheticDatasetSpec(seed=2, noise_scale=0.0)
        ds = generate_dataset(world, spec)
        for c in range(spec.n_classes):
            rows = ds.features[ds.labels == c]
            np.testing.assert_allclose(rows, np.tile(ds.prototypes[c], (len(rows), 1)), atol=1e-12)

    def test_prototypes_scale_the_anchors(self, world):
        ds = generate_dataset(world, SyntheticDatasetSpec(seed=3))
        anchors = world.vocab.class_anchors[ds.class_token_ids]
        np.testing.assert_allclose(ds.prototypes, ds.spec.dispersion * anchors, atol=1e-12)

    def test_nearest_prototype_classifier_is_accurate(self, world):
        """Clusters must be tight enough that prototype lookup nearly solves them."""
        ds = generate_dataset(world, SyntheticDatasetSpec(seed=4))
        d2 = ((ds.features[:, None, :] - ds.prototypes[None, :, :]) ** 2).sum(axis=2)
        predicted = d2.argmin(axis=1)
        assert (predicted == ds.labels).mean() > 0.9

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(n_classes=3)
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(examples_per_class=EVAL_RESERVE)
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(dispersion=0.1, noise_scale=0.2)


class TestEpisodes:
    def test_class_capacity_is_enforced(self, world):
        with pytest.raises(ValueError):
            generate_dataset(world, SyntheticDatasetSpec(n_classes=10_000))

    def test_split_sizes_and_disjointness_over_many_seeds(self, world, dataset):
        spec = dataset.spec
        n_base = spec.n_classes // 2
        for seed in range(100):
            ep = make_episode(dataset, base_fraction=0.5, shots=3, seed=seed)
            assert len(ep.base_classes) == n_base
            assert sorted(ep.base_classes + ep.new_classes) == list(range(spec.n_classes))
            assert len(ep.support) == 3 * n_base
            assert len(ep.base_eval) == EVAL_RESERVE * n_base
            assert len(ep.new_eval) == EVAL_RESERVE * (spec.n_classes - n_base)
            assert not set(ep.support) & set(ep.base_eval)
            labels = dataset.labels[ep.support]
            counts = np.bincount(labels, minlength=spec.n_classes)
            assert all(counts[c] == 3 for c in ep.base_classes)
            assert all(counts[c] == 0 for c in ep.new_classes)

    def test_class_split_ignores_the_episode_seed(self, dataset):
        splits = {
            tuple(make_episode(dataset, 0.5, 2, seed=s).base_classes) for s in range(20)
        }
        assert len(splits) == 1

    def test_support_varies_with_the_episode_seed(self, dataset):
        supports = {
            tuple(make_episode(dataset, 0.5, 2, seed=s).support) for s in range(20)
        }
        assert len(supports) > 1

    def test_full_base_fraction_leaves_no_new_classes(self, dataset):
        ep = make_episode(dataset, base_fraction=1.0, shots=2, seed=0)
        assert ep.new_classes == []
        assert ep.new_eval.size == 0
        with pytest.raises(ValueError):
            split_view(dataset, ep, "new_eval")

    def test_fractional_split_never_empties_either_side(self, dataset):
        tiny = make_episode(dataset, base_fraction=0.01, shots=2, seed=0)
        assert len(tiny.base_classes) >= 1
        huge = make_episode(dataset, base_fraction=0.999, shots=2, seed=0)
        assert len(huge.new_classes) >= 1

    def test_episode_argument_validation(self, dataset):
        with pytest.raises(ValueError):
            make_episode(dataset, base_fraction=0.0, shots=2, seed=0)
        with pytest.raises(ValueError):
            make_episode(dataset, base_fraction=1.5, shots=2, seed=0)
        with pytest.raises(ValueError):
            make_episode(dataset, base_fraction=0.5, shots=0, seed=0)
        with pytest.raises(ValueError):
            make_episode(dataset, base_fraction=0.5, shots=21, seed=0)
        with pytest.raises(ValueError):
            split_view(dataset, make_episode(dataset, 0.5, 2, 0), "sideways")

    def test_view_labels_are_local_and_consistent(self, world, dataset, episode):
        view = split_view(dataset, episode, "base_eval")
        assert set(np.unique(view.labels)) == set(range(len(view.class_token_ids)))
        for i in range(0, len(view.labels), 7):
            global_label = int(dataset.labels[view.example_ids[i]])
            assert dataset.class_token_ids[global_label] == view.class_token_ids[view.labels[i]]
            np.testing.assert_array_equal(view.features[i], dataset.features[view.example_ids[i]])


class TestHarmonicMean:
    def test_reference_values(self):
        assert harmonic_mean(82.66, 63.22) == pytest.approx(71.65, abs=0.01)
        assert harmonic_mean(80.47, 71.69) == pytest.approx(75.83, abs=0.01)

    def test_symmetry_and_identity(self):
        rng = np.random.default_rng(60)
        for _ in range(50):
            a, b = rng.uniform(0, 100, size=2)
            assert harmonic_mean(a, b) == pytest.approx(harmonic_mean(b, a), abs=1e-12)
            assert harmonic_mean(a, a) == pytest.approx(a, abs=1e-12)

    def test_never_exceeds_the_arithmetic_mean(self):
        rng = np.random.default_rng(61)
        for _ in range(200):
            a, b = rng.uniform(0.1, 100, size=2)
            h = harmonic_mean(a, b)
            assert h <= (a + b) / 2 + 1e-12
            if abs(a - b) > 1e-6:
                assert h < (a + b) / 2

    def test_zero_on_one_side_collapses_to_zero(self):
        assert harmonic_mean(0.0, 50.0) == 0.0

    def test_undefined_cases_raise(self):
        with pytest.raises(ValueError):
            harmonic_mean(0.0, 0.0)
        with pytest.raises(ValueError):
            harmonic_mean(-1.0, 5.0)


class TestDomainShift:
    def test_severity_zero_is_the_identity(self, dataset):
        out = apply_domain_shift(dataset.spec, dataset.features, 0.0, seed=3)
        np.testing.assert_array_equal(out, dataset.features)
        assert out is not dataset.features

    def test_matches_independent_reimplementation(self, dataset):
        """Plain per-row loop with explicit 2x2 rotations as the oracle."""
        spec = dataset.spec
        severity, seed = 0.5, 9
        feats = dataset.features[:40]
        out = apply_domain_shift(spec, feats, severity, seed=seed)

        theta = severity * spec.rotation_angle
        direction = np.random.default_rng([spec.seed, 13]).normal(size=feats.shape[1])
        direction /= np.linalg.norm(direction)
        noise = np.random.default_rng([seed, 14]).normal(size=feats.shape)
        expected = np.zeros_like(feats)
        for r, row in enumerate(feats):
            rotated = row.copy()
            for i in range(0, len(row) - 1, 2):
                x, y = row[i], row[i + 1]
                rotated[i] = math.cos(theta) * x - math.sin(theta) * y
                rotated[i + 1] = math.sin(theta) * x + math.cos(theta) * y
            expected[r] = (
                rotated
                + severity * spec.translation * direction
                + severity * spec.noise_inflation * noise[r]
            )
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_deterministic_in_both_seeds(self, dataset):
        a = apply_domain_shift(dataset.spec, dataset.features, 1.0, seed=5)
        b = apply_domain_shift(dataset.spec, dataset.features, 1.0, seed=5)
        np.testing.assert_array_equal(a, b)
        c = apply_domain_shift(dataset.spec, dataset.features, 1.0, seed=6)
        assert not np.array_equal(a, c)

    def test_severity_grows_the_displacement(self, dataset):
        norms = [
            np.linalg.norm(
                apply_domain_shift(dataset.spec, dataset.features, s, seed=1) - dataset.features
            )
            for s in (0.25, 1.0, 4.0)
        ]
        assert norms[0] < norms[1] < norms[2]

    def test_negative_severity_raises(self, dataset):
        with pytest.raises(ValueError):
            apply_domain_shift(dataset.spec, dataset.features, -0.1, seed=0)


class TestPersistence:
    def test_round_trip_is_exact(self, tmp_path, world, dataset):
        path = tmp_path / "ds.csv"
        dump_dataset(path, dataset)
        loaded = load_dataset(path, world)
        assert loaded.spec == dataset.spec
        assert loaded.class_token_ids == dataset.class_token_ids
        assert loaded.class_names == dataset.class_names
        np.testing.assert_array_equal(loaded.features, dataset.features)
        np.testing.assert_array_equal(loaded.labels, dataset.labels)
        np.testing.assert_array_equal(loaded.prototypes, dataset.prototypes)

    def test_missing_header_is_rejected(self, tmp_path, world):
        path = tmp_path / "bad.csv"
        path.write_text("id,class,x0\n0,thing,1.0\n")
        with pytest.raises(ValueError):
            load_dataset(path, world)
