"""Prompt learners over the frozen encoder pair.

All learners share one classification rule: the logit of class ``c`` for an
image with unit embedding ``f`` is ``tau * f . g(sequence_c)`` where the
sequence is ``context_len`` learnable context rows followed by the class
token row.  The families differ in how the context rows are produced:

* ``zero_shot``    - fixed rows tokenised from a text template;
* ``coop``         - one learnable context matrix shared by all classes;
* ``cocoop``       - the shared matrix plus an image-conditioned residual
                     added to every row, produced by a small metanet;
* ``proda``        - a collection of context matrices whose encoded class
                     weights are summarised by a Gaussian and trained
                     through a sampled likelihood surrogate;
* ``vpt_global``   - the shared matrix plus a residual drawn from a learned
                     input-independent diagonal Gaussian, trained by an
                     evidence lower bound against a standard-normal prior;
* ``vpt_conditional`` - as above, but the Gaussian's mean and log-variance
                     are predicted from the image embedding by metanet heads.

Gradients flow only into the learner parameters; encoder weights enter the
graph as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .encoders import (
    DEFAULT_TEMPLATE,
    CLASS_PLACEHOLDER,
    PAD_TOKEN,
    World,
    encode_image,
    encode_text_stacked,
    random_context,
)

DEFAULT_TAU = 10.0
LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0
_PRODA_VAR_FLOOR = 1e-18

KINDS = ("zero_shot", "coop", "cocoop", "proda", "vpt_global", "vpt_conditional")
_TRUNK_KEYS = ("trunk_w1", "trunk_b1", "trunk_w2", "trunk_b2")
_GROUPS = {
    "zero_shot": ("context",),
    "coop": ("context",),
    "cocoop": ("context", *_TRUNK_KEYS, "res_w", "res_b"),
    "vpt_conditional": ("context", *_TRUNK_KEYS, "mu_w", "mu_b", "logvar_w", "logvar_b"),
    "vpt_global": ("context", "mu", "logvar"),
}

ParamLike = Tensor | Array


@dataclass
class PromptState:
    """Named learnable tensors of one prompt learner."""

    kind: str
    params: dict[str, Tensor]

    def values(self) -> dict[str, Array]:
        """Detached copies of every parameter, for inference and storage."""
        return {name: t.values.copy() for name, t in self.params.items()}

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in sorted(self.params.items()) if t.requires_grad]

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()


@dataclass
class PosteriorParams:
    """Diagonal Gaussian over residual vectors: mean and log-variance."""

    mu: ParamLike
    logvar: ParamLike


def _values(x: ParamLike) -> Array:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _clip(x: ParamLike, low: float, high: float) -> ParamLike:
    if isinstance(x, Tensor):
        return x.clip(low, high)
    return np.clip(x, low, high)


def proda_context_keys(n: int) -> list[str]:
    return [f"context_{i:02d}" for i in range(n)]


def validate_state(state: PromptState, world: World) -> None:
    """Check that exactly the parameter groups of ``state.kind`` are present."""
    cfg = world.config
    e, length, d = cfg.embed_dim, cfg.context_len, cfg.out_dim
    hidden = d // 2
    shapes = {
        "context": (length, e),
        "trunk_w1": (d, hidden), "trunk_b1": (hidden,),
        "trunk_w2": (hidden, hidden), "trunk_b2": (hidden,),
        "res_w": (hidden, e), "res_b": (e,),
        "mu_w": (hidden, e), "mu_b": (e,),
        "logvar_w": (hidden, e), "logvar_b": (e,),
        "mu": (e,), "logvar": (e,),
    }
    if state.kind == "proda":
        keys = sorted(state.params)
        if len(keys) < 2:
            raise ValueError("proda requires a collection of at least 2 context matrices")
        expected = proda_context_keys(len(keys))
        if keys != expected:
            raise ValueError(f"proda parameter names {keys} do not form a dense collection")
        wanted = {k: (length, e) for k in keys}
    elif state.kind in _GROUPS:
        wanted = {k: shapes[k] for k in _GROUPS[state.kind]}
    else:
        raise ValueError(f"unknown learner kind {state.kind!r} (expected one of {KINDS})")
    have = set(state.params)
    if have != set(wanted):
        missing = sorted(set(wanted) - have)
        extra = sorted(have - set(wanted))
        raise ValueError(
            f"{state.kind} parameter groups mismatch: missing {missing}, unexpected {extra}"
        )
    for name, shape in wanted.items():
        got = state.params[name].shape
        if got != shape:
            raise ValueError(f"parameter {name!r} has shape {got}, expected {shape}")


def template_context(world: World, template: str) -> Array:
    """Embedding rows for the context tokens of a prompt template."""
    parts = template.lower().split()
    if not parts or parts[-1] != CLASS_PLACEHOLDER:
        raise ValueError(f"prompt text must end with {CLASS_PLACEHOLDER!r}: {template!r}")
    tokens = parts[:-1]
    length = world.config.context_len
    if len(tokens) > length:
        raise ValueError(f"template has {len(tokens)} context tokens, more than context_len={length}")
    tokens = [PAD_TOKEN] * (length - len(tokens)) + tokens
    ids = [world.vocab.lookup(t) for t in tokens]
    return world.vocab.embedding[ids].copy()


def init_prompt_state(
    world: World,
    kind: str,
    seed: int,
    init: str = "template",
    template: str = DEFAULT_TEMPLATE,
    k_proda: int = 4,
    proda_spread: float = 0.1,
) -> PromptState:
    """Build a fresh learner state.

    ``init`` selects template-token or seeded-Gaussian context rows.  Metanet
    trunks start from a seeded scaled-normal draw; all heads start at zero so
    that every learner begins exactly at its deterministic ancestor (residual
    zero, posterior equal to the standard-normal prior).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown learner kind {kind!r} (expected one of {KINDS})")
    if init not in ("template", "random"):
        raise ValueError(f"unknown init mode {init!r} (expected 'template' or 'random')")
    cfg = world.config
    if init == "template":
        context = template_context(world, template)
    else:
        context = random_context(cfg.context_len, cfg.embed_dim, seed)
    rng = np.random.default_rng([seed, 4])
    d, hidden, e = cfg.out_dim, cfg.out_dim // 2, cfg.embed_dim
    trainable = kind != "zero_shot"

    def leaf(arr: Array) -> Tensor:
        return Tensor(np.array(arr, dtype=np.float64), requires_grad=trainable)

    params: dict[str, Tensor] = {}
    if kind == "proda":
        if k_proda < 2:
            raise ValueError("proda requires k_proda >= 2 context matrices")
        for key in proda_context_keys(k_proda):
            params[key] = leaf(context + proda_spread * rng.normal(size=context.shape))
    else:
        params["context"] = leaf(context)
    if kind in ("cocoop", "vpt_conditional"):
        params["trunk_w1"] = leaf(rng.normal(size=(d, hidden)) / np.sqrt(d))
        params["trunk_b1"] = leaf(np.zeros(hidden))
        params["trunk_w2"] = leaf(rng.normal(size=(hidden, hidden)) / np.sqrt(hidden))
        params["trunk_b2"] = leaf(np.zeros(hidden))
    if kind == "cocoop":
        params["res_w"] = leaf(np.zeros((hidden, e)))
        params["res_b"] = leaf(np.zeros(e))
    if kind == "vpt_conditional":
        for head in ("mu", "logvar"):
            params[f"{head}_w"] = leaf(np.zeros((hidden, e)))
            params[f"{head}_b"] = leaf(np.zeros(e))
    if kind == "vpt_global":
        params["mu"] = leaf(np.zeros(e))
        params["logvar"] = leaf(np.zeros(e))
    state = PromptState(kind=kind, params=params)
    validate_state(state, world)
    return state


# ----------------------------------------------------------------- sequences
def encode_class_weights(
    world: World, contexts: list[ParamLike], class_ids: list[int]
) -> ParamLike:
    """Encode every (context, class) pair into a unit classifier weight row.

    Returns ``len(contexts) * len(class_ids)`` rows ordered context-major:
    row ``s * C + c`` holds context ``s`` with class ``c``.
    """
    if not class_ids:
        raise ValueError("class set must be nonempty")
    if len(set(class_ids)) != len(class_ids):
        raise ValueError("class set contains duplicate ids")
    vocab = world.vocab
    e = world.config.embed_dim
    class_rows = [vocab.embedding[int(c)].reshape(1, e) for c in class_ids]
    pieces: list[ParamLike] = []
    for ctx in contexts:
        for row in class_rows:
            pieces.append(ctx)
            pieces.append(row)
    stacked = ad.concat(pieces, axis=0)
    return encode_text_stacked(world.encoder, stacked, len(contexts) * len(class_ids))


def build_prompt(context: ParamLike, residual: ParamLike) -> ParamLike:
    """Add one residual vector to every context row."""
    ctx_shape = context.shape
    res_shape = residual.shape
    if len(ctx_shape) != 2 or res_shape != (ctx_shape[1],):
        raise ValueError(
            f"expected context (L, e) and residual (e,), got {ctx_shape} and {res_shape}"
        )
    return context + residual


def _image_logits(weights: ParamLike, fx: Array, tau: float) -> ParamLike:
    return tau * (weights @ fx)


# ------------------------------------------------------------------ zero shot
def zero_shot_logits(
    world: World,
    x_features: Array,
    class_ids: list[int],
    template: str = DEFAULT_TEMPLATE,
    tau: float = DEFAULT_TAU,
) -> Array:
    """Logits of the training-free classifier built from a text template.

    Accepts a single feature vector or a batch of feature rows.
    """
    context = template_context(world, template)
    weights = np.asarray(encode_class_weights(world, [context], class_ids))
    fx = encode_image(world.encoder, x_features)
    if fx.ndim == 2:
        return tau * (fx @ weights.T)
    return _image_logits(weights, fx, tau)


# ---------------------------------------------------------------- point losses
def _check_kind(state: PromptState, expected: tuple[str, ...]) -> None:
    if state.kind not in expected:
        raise ValueError(f"loss expects learner kind in {expected}, got {state.kind!r}")


def coop_loss(
    world: World,
    state: PromptState,
    class_ids: list[int],
    x_features: Array,
    y: int,
    tau: float = DEFAULT_TAU,
) -> Tensor:
    """Cross-entropy of the shared-context learner on one example."""
    _check_kind(state, ("coop",))
    fx = encode_image(world.encoder, x_features)
    weights = encode_class_weights(world, [state.params["context"]], class_ids)
    return ad.softmax_cross_entropy(_image_logits(weights, fx, tau), y)


def metanet_trunk(params: dict[str, ParamLike], fx: Array) -> ParamLike:
    """Shared metanet body: two linear layers, each followed by an ELU."""
    h = ad.elu(fx @ params["trunk_w1"] + params["trunk_b1"])
    return ad.elu(h @ params["trunk_w2"] + params["trunk_b2"])


def cocoop_residual(params: dict[str, ParamLike], fx: Array) -> ParamLike:
    """Deterministic image-conditioned residual vector."""
    return metanet_trunk(params, fx) @ params["res_w"] + params["res_b"]


def cocoop_loss(
    world: World,
    state: PromptState,
    class_ids: list[int],
    x_features: Array,
    y: int,
    tau: float = DEFAULT_TAU,
) -> Tensor:
    """Cross-entropy of the image-conditioned residual learner on one example."""
    _check_kind(state, ("cocoop",))
    fx = encode_image(world.encoder, x_features)
    residual = cocoop_residual(state.params, fx)
    context = build_prompt(state.params["context"], residual)
    weights = encode_class_weights(world, [context], class_ids)
    return ad.softmax_cross_entropy(_image_logits(weights, fx, tau), y)


# ----------------------------------------------------------------- variational
def variational_posterior(
    state: PromptState, fx: Array | None
) -> PosteriorParams:
    """Residual posterior of a variational learner.

    For ``vpt_conditional`` the mean and log-variance are metanet head
    outputs on the image embedding; for ``vpt_global`` they are free
    parameters and ``fx`` is ignored.  Log-variance is clamped to
    ``[LOGVAR_MIN, LOGVAR_MAX]`` before any exponentiation.
    """
    _check_kind(state, ("vpt_global", "vpt_conditional"))
    p = state.params
    if state.kind == "vpt_global":
        return PosteriorParams(mu=p["mu"], logvar=_clip(p["logvar"], LOGVAR_MIN, LOGVAR_MAX))
    if fx is None:
        raise ValueError("vpt_conditional posterior requires an image embedding")
    trunk = metanet_trunk(p, fx)
    mu = trunk @ p["mu_w"] + p["mu_b"]
    logvar = _clip(trunk @ p["logvar_w"] + p["logvar_b"], LOGVAR_MIN, LOGVAR_MAX)
    return PosteriorParams(mu=mu, logvar=logvar)


def sample_residual(posterior: PosteriorParams, z: Array) -> ParamLike:
    """Reparameterised draw ``mu + exp(logvar / 2) * z``."""
    sigma = ad.exp(0.5 * posterior.logvar)
    return posterior.mu + sigma * np.asarray(z, dtype=np.float64)


def kl_to_standard_normal(posterior: PosteriorParams) -> ParamLike:
    """Closed-form KL divergence from a diagonal Gaussian to the unit Gaussian.

    ``sum_i (mu_i^2 + var_i - 1 - log var_i) / 2``; raises on non-finite
    parameters, where the divergence is undefined.
    """
    mu_v, lv_v = _values(posterior.mu), _values(posterior.logvar)
    if not (np.all(np.isfinite(mu_v)) and np.all(np.isfinite(lv_v))):
        raise ValueError("KL divergence is undefined for non-finite posterior parameters")
    mu, lv = posterior.mu, posterior.logvar
    return (mu * mu + ad.exp(lv) - 1.0 - lv).sum() * 0.5


def elbo_loss(
    world: World,
    state: PromptState,
    class_ids: list[int],
    x_features: Array,
    y: int,
    noises: Array,
    beta: float = 1.0,
    tau: float = DEFAULT_TAU,
) -> Tensor:
    """Negative evidence lower bound of a variational learner on one example.

    ``noises`` holds ``S >= 1`` standard-normal rows; the loss is the mean
    cross-entropy over the ``S`` reparameterised residual draws plus
    ``beta`` times the KL divergence of the posterior from the prior.
    """
    _check_kind(state, ("vpt_global", "vpt_conditional"))
    noises = np.asarray(noises, dtype=np.float64)
    if noises.ndim != 2 or noises.shape[0] < 1 or noises.shape[1] != world.config.embed_dim:
        raise ValueError(
            f"noises must be (S >= 1, embed_dim={world.config.embed_dim}), got {noises.shape}"
        )
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    n_classes = len(class_ids)
    y = int(y)
    if not 0 <= y < n_classes:
        raise ValueError(f"label {y} out of range for {n_classes} classes")
    fx = encode_image(world.encoder, x_features)
    posterior = variational_posterior(state, fx)
    kl = kl_to_standard_normal(posterior)
    contexts = [
        build_prompt(state.params["context"], sample_residual(posterior, z)) for z in noises
    ]
    weights = encode_class_weights(world, contexts, class_ids)
    logits = _image_logits(weights, fx, tau).reshape(len(contexts), n_classes)
    onehot = np.zeros((len(contexts), n_classes))
    onehot[:, y] = 1.0
    ce = (ad.logsumexp(logits, axis=1) - (logits * onehot).sum(axis=1)).mean()
    return ce + beta * kl


# ---------------------------------------------------------------------- proda
def proda_contexts(state: PromptState) -> list[Tensor]:
    keys = proda_context_keys(len(state.params))
    return [state.params[k] for k in keys]


def proda_loss(
    world: World,
    state: PromptState,
    class_ids: list[int],
    x_features: Array,
    y: int,
    noise: Array,
    tau: float = DEFAULT_TAU,
) -> Tensor:
    """Sampled surrogate for the prompt-distribution learner on one example.

    The collection's encoded class weights are summarised per class by their
    sample mean and unbiased diagonal variance; ``noise`` of shape
    ``(M, C, out_dim)`` drives ``M`` weight draws per class, and the loss is
    the negative log of the averaged likelihood of ``y`` over the draws.
    """
    _check_kind(state, ("proda",))
    contexts = proda_contexts(state)
    k = len(contexts)
    if k < 2:
        raise ValueError("proda covariance is undefined for fewer than 2 prompts")
    n_classes = len(class_ids)
    y = int(y)
    if not 0 <= y < n_classes:
        raise ValueError(f"label {y} out of range for {n_classes} classes")
    noise = np.asarray(noise, dtype=np.float64)
    d = world.config.out_dim
    if noise.ndim != 3 or noise.shape[0] < 1 or noise.shape[1:] != (n_classes, d):
        raise ValueError(
            f"noise must be (M >= 1, {n_classes}, {d}), got {noise.shape}"
        )
    m = noise.shape[0]
    fx = encode_image(world.encoder, x_features)
    weights = encode_class_weights(world, contexts, class_ids)

    mean_pool = np.zeros((n_classes, k * n_classes))
    var_pool = np.zeros((n_classes, k * n_classes))
    for c in range(n_classes):
        rows = np.arange(k) * n_classes + c
        mean_pool[c, rows] = 1.0 / k
        var_pool[c, rows] = 1.0 / (k - 1)
    tile_k = np.tile(np.eye(n_classes), (k, 1))
    tile_m = np.tile(np.eye(n_classes), (m, 1))

    mu = mean_pool @ weights
    dev = weights - tile_k @ mu
    var = var_pool @ (dev * dev)
    sigma = ad.sqrt(var + _PRODA_VAR_FLOOR)
    drawn = tile_m @ mu + (tile_m @ sigma) * noise.reshape(m * n_classes, d)
    logits = _image_logits(drawn, fx, tau).reshape(m, n_classes)
    onehot = np.zeros((m, n_classes))
    onehot[:, y] = 1.0
    log_lik = (logits * onehot).sum(axis=1) - ad.logsumexp(logits, axis=1)
    return np.log(float(m)) - ad.logsumexp(log_lik)
