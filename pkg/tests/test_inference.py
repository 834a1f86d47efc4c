"""Monte Carlo prediction: sampler families, probability averaging, evaluation."""

from __future__ import annotations

import numpy as np
import pytest

from promptvar.inference import (
    SAMPLER_FAMILIES,
    SamplerSpec,
    average_probabilities,
    draw_residuals,
    evaluate,
    predict_mc,
    residual_moments,
)
from promptvar.learners import (
    cocoop_residual,
    init_prompt_state,
    metanet_trunk,
)

ALL_KINDS = ("zero_shot", "coop", "cocoop", "vpt_global", "vpt_conditional", "proda")


def _state(world, kind, seed=7):
    state = init_prompt_state(world, kind, seed=seed)
    rng = np.random.default_rng([seed, 99])
    for tensor in state.params.values():
        tensor.values[:] += 0.05 * rng.normal(size=tensor.shape)
    return state


class TestSamplerSpec:
    def test_defaults(self):
        spec = SamplerSpec()
        assert (spec.family, spec.k, spec.seed) == ("posterior_full", 10, 0)

    def test_rejects_unknown_family_and_bad_k(self):
        with pytest.raises(ValueError):
            SamplerSpec(family="bootstrap")
        with pytest.raises(ValueError):
            SamplerSpec(k=0)


class TestResidualMoments:
    def test_point_mass_kinds_have_zero_moments(self, world, dataset):
        fx = np.random.default_rng(50).normal(size=world.config.out_dim)
        for kind in ("zero_shot", "coop", "proda"):
            mu, sigma = residual_moments(_state(world, kind), fx)
            np.testing.assert_array_equal(mu, 0.0)
            np.testing.assert_array_equal(sigma, 0.0)

    def test_metanet_kind_centres_on_its_residual(self, world):
        from promptvar.encoders import encode_image

        state = _state(world, "cocoop")
        x = np.random.default_rng(51).normal(size=world.config.image_dim)
        fx = encode_image(world.encoder, x)
        mu, sigma = residual_moments(state, fx)
        values = {k: t.values for k, t in state.params.items()}
        np.testing.assert_allclose(mu, np.asarray(cocoop_residual(values, fx)), atol=1e-12)
        np.testing.assert_array_equal(sigma, 0.0)

    def test_global_variational_moments(self, world):
        state = _state(world, "vpt_global")
        mu, sigma = residual_moments(state, np.zeros(world.config.out_dim))
        np.testing.assert_array_equal(mu, state.params["mu"].values)
        np.testing.assert_allclose(
            sigma, np.exp(0.5 * state.params["logvar"].values), atol=1e-12
        )

    def test_conditional_variational_moments(self, world):
        from promptvar.encoders import encode_image

        state = _state(world, "vpt_conditional")
        x = np.random.default_rng(52).normal(size=world.config.image_dim)
        fx = encode_image(world.encoder, x)
        mu, sigma = residual_moments(state, fx)
        values = {k: t.values for k, t in state.params.items()}
        trunk = metanet_trunk(values, fx)
        np.testing.assert_allclose(mu, trunk @ values["mu_w"] + values["mu_b"], atol=1e-12)
        expected_logvar = trunk @ values["logvar_w"] + values["logvar_b"]
        np.testing.assert_allclose(sigma, np.exp(0.5 * expected_logvar), atol=1e-12)


class TestDrawResiduals:
    def setup_method(self):
        rng = np.random.default_rng(53)
        self.mu = rng.normal(size=6)
        self.sigma = rng.uniform(0.1, 2.0, size=6)

    def test_uniform_family_stays_in_the_unit_box(self):
        draws = draw_residuals("uniform01", 50, self.mu, self.sigma, np.random.default_rng(0))
        assert draws.shape == (50, 6)
        assert np.all(draws >= 0.0) and np.all(draws < 1.0)

    def test_mean_family_repeats_the_mean(self):
        draws = draw_residuals("posterior_mean", 4, self.mu, self.sigma, np.random.default_rng(0))
        np.testing.assert_array_equal(draws, np.tile(self.mu, (4, 1)))

    def test_full_family_reparameterises(self):
        draws = draw_residuals("posterior_full", 8, self.mu, self.sigma, np.random.default_rng(9))
        z = np.random.default_rng(9).normal(size=(8, 6))
        np.testing.assert_allclose(draws, self.mu + self.sigma * z, atol=1e-12)

    def test_same_stream_reproduces(self):
        for family in SAMPLER_FAMILIES:
            a = draw_residuals(family, 5, self.mu, self.sigma, np.random.default_rng(3))
            b = draw_residuals(family, 5, self.mu, self.sigma, np.random.default_rng(3))
            np.testing.assert_array_equal(a, b)

    def test_unknown_family_raises(self):
        with pytest.raises(ValueError):
            draw_residuals("dirichlet", 2, self.mu, self.sigma, np.random.default_rng(0))


class TestAverageProbabilities:
    def test_matches_manual_softmax_mean(self):
        logits = np.random.default_rng(54).normal(size=(7, 5)) * 3
        probs = average_probabilities(logits)
        manual = np.zeros(5)
        for row in logits:
            ez = np.exp(row - row.max())
            manual += ez / ez.sum()
        np.testing.assert_allclose(probs, manual / 7, atol=1e-12)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_row_order_is_irrelevant(self):
        logits = np.random.default_rng(55).normal(size=(6, 4))
        np.testing.assert_allclose(
            average_probabilities(logits), average_probabilities(logits[::-1]), atol=1e-15
        )

    def test_rejects_non_matrix_input(self):
        with pytest.raises(ValueError):
            average_probabilities(np.zeros(3))


class TestPredictMC:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("family", SAMPLER_FAMILIES)
    def test_probabilities_normalise(self, world, dataset, kind, family):
        state = _state(world, kind)
        sampler = SamplerSpec(family=family, k=3, seed=1)
        probs = predict_mc(world, state, dataset.class_token_ids, dataset.features[0], sampler)
        assert probs.shape == (len(dataset.class_token_ids),)
        assert np.all(probs >= 0)
        assert abs(probs.sum() - 1.0) < 1e-9

    def test_mean_family_is_k_invariant(self, world, dataset):
        state = _state(world, "vpt_global")
        ids = dataset.class_token_ids
        x = dataset.features[3]
        one = predict_mc(world, state, ids, x, SamplerSpec("posterior_mean", k=1, seed=0))
        many = predict_mc(world, state, ids, x, SamplerSpec("posterior_mean", k=9, seed=0))
        np.testing.assert_allclose(one, many, atol=1e-12)

    def test_point_mass_posterior_collapses_to_the_mean(self, world, dataset):
        """With zero deviation the full sampler equals the mean sampler."""
        state = _state(world, "coop")
        ids = dataset.class_token_ids
        x = dataset.features[5]
        full = predict_mc(world, state, ids, x, SamplerSpec("posterior_full", k=6, seed=2))
        mean = predict_mc(world, state, ids, x, SamplerSpec("posterior_mean", k=1, seed=2))
        np.testing.assert_allclose(full, mean, atol=1e-12)

    def test_collection_learner_ignores_the_sampler(self, world, dataset):
        state = _state(world, "proda")
        ids = dataset.class_token_ids
        x = dataset.features[2]
        reference = predict_mc(world, state, ids, x, SamplerSpec("posterior_full", k=1, seed=0))
        for family in SAMPLER_FAMILIES:
            probs = predict_mc(world, state, ids, x, SamplerSpec(family, k=5, seed=11))
            np.testing.assert_allclose(probs, reference, atol=1e-12)


class TestEvaluate:
    def test_visit_order_does_not_matter(self, world, dataset, views):
        state = _state(world, "vpt_global")
        view = views["base_eval"]
        n = min(24, view.features.shape[0])
        feats, labels = view.features[:n], view.labels[:n]
        sampler = SamplerSpec("posterior_full", k=2, seed=5)
        ids = view.example_ids[:n]
        forward = evaluate(world, state, view.class_token_ids, feats, labels, sampler,
                           example_ids=ids)
        perm = np.random.default_rng(56).permutation(n)
        shuffled = evaluate(world, state, view.class_token_ids, feats[perm], labels[perm],
                            sampler, example_ids=ids[perm])
        assert forward == shuffled

    def test_same_sampler_seed_reproduces(self, world, dataset, views):
        state = _state(world, "vpt_conditional")
        view = views["new_eval"]
        feats, labels = view.features[:16], view.labels[:16]
        sampler = SamplerSpec("posterior_full", k=3, seed=8)
        a = evaluate(world, state, view.class_token_ids, feats, labels, sampler)
        b = evaluate(world, state, view.class_token_ids, feats, labels, sampler)
        assert a == b

    def test_zero_shot_beats_chance_on_aligned_classes(self, world, dataset, views):
        state = init_prompt_state(world, "zero_shot", seed=0)
        view = views["base_eval"]
        sampler = SamplerSpec("posterior_mean", k=1, seed=0)
        acc = evaluate(world, state, view.class_token_ids, view.features, view.labels, sampler)
        assert acc > 2.0 / len(view.class_token_ids)

    def test_split_validation(self, world, dataset):
        state = init_prompt_state(world, "coop", seed=0)
        sampler = SamplerSpec("posterior_mean", k=1, seed=0)
        ids = dataset.class_token_ids
        empty = np.zeros((0, dataset.features.shape[1]))
        with pytest.raises(ValueError):
            evaluate(world, state, ids, empty, np.zeros(0), sampler)
        with pytest.raises(ValueError):
            evaluate(world, state, ids, dataset.features[:4], dataset.labels[:3], sampler)
        with pytest.raises(ValueError):
            evaluate(world, state, ids, dataset.features[:4], dataset.labels[:4], sampler,
                     example_ids=np.arange(5))


class TestMonteCarloVariance:
    def test_prediction_noise_shrinks_like_root_k(self, world, dataset):
        """The sd of the averaged probability should scale roughly as k**-0.5."""
        state = init_prompt_state(world, "vpt_global", seed=9)
        rng = np.random.default_rng(57)
        state.params["mu"].values[:] = 0.3 * rng.normal(size=world.config.embed_dim)
        ids = dataset.class_token_ids[:5]
        x = dataset.features[0]
        ks = (1, 4, 16)
        sds = []
        for k in ks:
            estimates = [
                predict_mc(world, state, ids, x, SamplerSpec("posterior_full", k=k, seed=0),
                           rng=np.random.default_rng([58, rep]))[0]
                for rep in range(60)
            ]
            sds.append(np.std(estimates))
        slope = np.polyfit(np.log(ks), np.log(sds), 1)[0]
        assert -0.8 < slope < -0.25
