"""Monte Carlo prediction and evaluation for trained prompt learners.

Prediction draws ``k`` residual vectors from a configurable sampler family,
builds one classifier-weight set per draw, and averages the per-draw
probability vectors; probabilities are always averaged after the softmax,
never at the logit level.  Deterministic learners fall out as the special
case of a point-mass residual distribution, and the prompt-collection
learner uses the predictive mean of its encoded class weights.

Every example owns an independent random stream derived from the sampler
seed and the example index, so evaluation results do not depend on the
order in which examples are visited.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .encoders import World, encode_image
from .learners import (
    DEFAULT_TAU,
    LOGVAR_MAX,
    LOGVAR_MIN,
    PromptState,
    PosteriorParams,
    build_prompt,
    cocoop_residual,
    encode_class_weights,
    metanet_trunk,
    proda_context_keys,
)

SAMPLER_FAMILIES = ("uniform01", "standard_normal", "posterior_mean", "posterior_full")


@dataclass(frozen=True)
class SamplerSpec:
    """How residual vectors are drawn at prediction time."""

    family: str = "posterior_full"
    k: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in SAMPLER_FAMILIES:
            raise ValueError(
                f"unknown sampler family {self.family!r} (expected one of {SAMPLER_FAMILIES})"
            )
        if self.k < 1:
            raise ValueError(f"sampler k must be >= 1, got {self.k}")


def residual_moments(state: PromptState, fx: Array) -> tuple[Array, Array]:
    """Residual mean and standard deviation implied by a learner state.

    Deterministic learners have zero deviation; their mean is zero for the
    shared-context kinds and the metanet output for the image-conditioned
    kind.
    """
    values = {name: t.values for name, t in state.params.items()}
    e = values["context"].shape[1] if "context" in values else values["context_00"].shape[1]
    if state.kind in ("zero_shot", "coop", "proda"):
        return np.zeros(e), np.zeros(e)
    if state.kind == "cocoop":
        return np.asarray(cocoop_residual(values, fx)), np.zeros(e)
    if state.kind == "vpt_global":
        mu = values["mu"]
        logvar = np.clip(values["logvar"], LOGVAR_MIN, LOGVAR_MAX)
    elif state.kind == "vpt_conditional":
        trunk = metanet_trunk(values, fx)
        mu = trunk @ values["mu_w"] + values["mu_b"]
        logvar = np.clip(trunk @ values["logvar_w"] + values["logvar_b"], LOGVAR_MIN, LOGVAR_MAX)
    else:
        raise ValueError(f"unknown learner kind {state.kind!r}")
    return mu, np.exp(0.5 * logvar)


def draw_residuals(
    family: str, k: int, mu: Array, sigma: Array, rng: np.random.Generator
) -> Array:
    """Draw ``k`` residual rows from the requested family.

    ``uniform01`` and ``standard_normal`` ignore the learner's posterior and
    inject uninformative residuals; ``posterior_mean`` repeats the mean;
    ``posterior_full`` reparameterises around it.
    """
    e = mu.shape[0]
    if family == "uniform01":
        return rng.uniform(0.0, 1.0, size=(k, e))
    if family == "standard_normal":
        return rng.normal(size=(k, e))
    if family == "posterior_mean":
        return np.tile(mu, (k, 1))
    if family == "posterior_full":
        return mu + sigma * rng.normal(size=(k, e))
    raise ValueError(f"unknown sampler family {family!r}")


def average_probabilities(logits: Array) -> Array:
    """Mean of the per-row softmax distributions of a (k, C) logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"expected (k, C) logits, got shape {logits.shape}")
    return ad.softmax(logits, axis=1).mean(axis=0)


def _example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, int(index)])


def predict_mc(
    world: World,
    state: PromptState,
    class_ids: list[int],
    x_features: Array,
    sampler: SamplerSpec,
    rng: np.random.Generator | None = None,
    tau: float = DEFAULT_TAU,
) -> Array:
    """Class probabilities for one example under Monte Carlo residual draws.

    Returns the probability vector averaged over ``sampler.k`` draws.  The
    prompt-collection learner ignores the sampler and classifies with the
    predictive mean of its encoded class weights.
    """
    if rng is None:
        rng = _example_rng(sampler.seed, 0)
    values = {name: t.values for name, t in state.params.items()}
    fx = encode_image(world.encoder, x_features)
    if state.kind == "proda":
        contexts = [values[key] for key in proda_context_keys(len(values))]
        rows = encode_class_weights(world, contexts, class_ids)
        mean_w = rows.reshape(len(contexts), len(class_ids), -1).mean(axis=0)
        logits = tau * (mean_w @ fx)
        return ad.softmax(logits[None, :], axis=1)[0]
    mu, sigma = residual_moments(state, fx)
    residuals = draw_residuals(sampler.family, sampler.k, mu, sigma, rng)
    contexts = [build_prompt(values["context"], r) for r in residuals]
    rows = encode_class_weights(world, contexts, class_ids)
    logits = tau * (rows @ fx).reshape(sampler.k, len(class_ids))
    return average_probabilities(logits)


def evaluate(
    world: World,
    state: PromptState,
    class_ids: list[int],
    features: Array,
    labels: Array,
    sampler: SamplerSpec,
    tau: float = DEFAULT_TAU,
    example_ids: Array | None = None,
) -> float:
    """Mean accuracy of MC prediction over an evaluation split.

    Each example draws from a stream keyed on the sampler seed and its
    stable id (``example_ids``, defaulting to the position), so visiting the
    split in any order produces identical per-example predictions.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("evaluation split must contain at least one example")
    if labels.shape != (features.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {features.shape[0]} examples")
    ids = np.arange(features.shape[0]) if example_ids is None else np.asarray(example_ids)
    if ids.shape != (features.shape[0],):
        raise ValueError(f"example_ids shape {ids.shape} does not match {features.shape[0]} examples")
    hits = 0
    for i in range(features.shape[0]):
        probs = predict_mc(
            world, state, class_ids, features[i], sampler,
            rng=_example_rng(sampler.seed, int(ids[i])), tau=tau,
        )
        if int(np.argmax(probs)) == int(labels[i]):
            hits += 1
    return hits / features.shape[0]
