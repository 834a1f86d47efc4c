"""Frozen toy text/image encoder pair over a closed synthetic vocabulary.

The pair plays the role of a pretrained contrastive backbone at desk scale:

* the text encoder maps a sequence of ``context_len`` prompt rows plus one
  class-token row through a sinusoidal position signal, two blocks of
  (linear, ELU, linear) whose first linear step also mixes information
  across positions, mean pooling over positions and a final projection onto
  the unit sphere in ``out_dim`` dimensions;
* the image encoder maps a raw feature vector through a two-layer
  feed-forward net onto the same sphere.

Both encoders are sampled once from a seeded distribution and never trained;
their arrays are write-protected and a checksum helper lets callers assert
bit-level freshness after any optimisation run.

Class-name tokens carry extra structure that the synthetic dataset generator
relies on: each class token owns a low-dimensional latent vector, its
embedding row lies near a shared linear image of that latent, and a unit
"anchor" direction in image-feature space is derived from the same latent.
Visual prototypes built from the anchors therefore relate coherently to the
class-token embeddings, which is what makes transfer from trained to unseen
classes possible at all in this laboratory.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .containers import ContainerFormatError, load_arrays, save_arrays

DEFAULT_TEMPLATE = "a photo of a {class}"
IMAGE_TEMPLATE = "an image of a {class}"
PAD_TOKEN = "<pad>"
CLASS_PLACEHOLDER = "{class}"

_TEMPLATE_WORDS = ("a", "an", "image", "of", "photo", "the")


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions and structural constants of a frozen world."""

    vocab_size: int = 64
    embed_dim: int = 16
    context_len: int = 4
    out_dim: int = 32
    image_dim: int = 32
    text_hidden: int = 32
    image_hidden: int = 32
    n_class_tokens: int = 40
    class_latent_dim: int = 3
    class_jitter: float = 0.6
    class_row_scale: float = 2.0
    anchor_mix: float = 0.65
    class_pool_weight: float = 0.45

    def __post_init__(self) -> None:
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even for the sinusoidal position signal")
        for name in ("vocab_size", "embed_dim", "context_len", "out_dim", "image_dim",
                     "text_hidden", "image_hidden", "n_class_tokens", "class_latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        reserved = 1 + len(_TEMPLATE_WORDS)
        if self.vocab_size < reserved + self.n_class_tokens:
            raise ValueError(
                f"vocab_size {self.vocab_size} too small for {self.n_class_tokens} class tokens "
                f"plus {reserved} reserved tokens"
            )
        if self.n_class_tokens < 4:
            raise ValueError("need at least 4 class tokens to form a dataset")
        if not 0.0 <= self.anchor_mix <= 1.0:
            raise ValueError("anchor_mix must lie in [0, 1]")
        if self.class_row_scale <= 0:
            raise ValueError("class_row_scale must be positive")
        if not 0.0 < self.class_pool_weight <= 1.0:
            raise ValueError("class_pool_weight must lie in (0, 1]")


@dataclass
class Vocabulary:
    """Closed token set with embedding table and class-token structure."""

    tokens: list[str]
    token_to_id: dict[str, int]
    pad_id: int
    class_token_ids: list[int]
    embedding: Array
    class_latents: Array
    class_anchors: Array

    def lookup(self, token: str) -> int:
        token = token.lower()
        if token not in self.token_to_id:
            raise ValueError(f"unknown token {token!r}")
        return self.token_to_id[token]

    @property
    def class_names(self) -> list[str]:
        return [self.tokens[i] for i in self.class_token_ids]


@dataclass
class EncoderPair:
    """Weights of the frozen text and image encoders."""

    config: EncoderConfig
    seed: int
    pos_encoding: Array
    text_mix1: Array
    text_mix2: Array
    text_w1: Array
    text_b1: Array
    text_w2: Array
    text_b2: Array
    text_w3: Array
    text_b3: Array
    text_w4: Array
    text_b4: Array
    text_out_w: Array
    text_out_b: Array
    img_w1: Array
    img_b1: Array
    img_w2: Array
    img_b2: Array

    def arrays(self) -> dict[str, Array]:
        out = {}
        for f in fields(self):
            if f.name in ("config", "seed"):
                continue
            out[f.name] = getattr(self, f.name)
        return out


@dataclass
class World:
    """A frozen encoder pair plus its vocabulary."""

    encoder: EncoderPair
    vocab: Vocabulary

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config


def _freeze(arr: Array) -> Array:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _sinusoidal_positions(length: int, dim: int) -> Array:
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * idx / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def _token_list(config: EncoderConfig) -> list[str]:
    tokens = [PAD_TOKEN, *_TEMPLATE_WORDS]
    tokens += [f"obj{i:02d}" for i in range(config.n_class_tokens)]
    tokens += [f"tok{i:02d}" for i in range(config.vocab_size - len(tokens))]
    return tokens


_HIDDEN_SCALE = 2.0
_ANCHOR_RADIUS = 2.0
_ANCHOR_STEPS = 120
_ANCHOR_STEP_SIZE = 0.5
_ANCHOR_MARGIN = 0.5
_ANCHOR_REPULSION = 2.0


def _align_anchors(encoder: EncoderPair, init_dirs: Array, targets: Array) -> Array:
    """Refine unit anchor directions so encoded centers face their targets.

    Runs a fixed number of projected gradient ascent steps on the summed
    cosine between the image encoding of each anchor (at the reference
    cluster radius) and the matching class's template text weight, minus a
    hinge penalty on pairs of encoded anchors whose cosine exceeds a margin.
    The penalty keeps prototypes distinguishable even for class pairs whose
    template weights happen to be nearly collinear; the fixed step count
    keeps the result a pure function of its inputs.
    """
    x = _ANCHOR_RADIUS * init_dirs
    off_diag = 1.0 - np.eye(init_dirs.shape[0])
    for _ in range(_ANCHOR_STEPS):
        point = Tensor(x, requires_grad=True)
        h = ad.elu(point @ encoder.img_w1 + encoder.img_b1) @ encoder.img_w2 + encoder.img_b2
        encoded = ad.l2_normalize(h)
        attraction = (encoded * targets).sum()
        crowding = ((encoded @ encoded.transpose()) * off_diag - _ANCHOR_MARGIN).clip(0.0, np.inf)
        score = attraction - _ANCHOR_REPULSION * (crowding * crowding).sum()
        score.backward()
        x = x + _ANCHOR_STEP_SIZE * point.grad
        x = _ANCHOR_RADIUS * x / np.linalg.norm(x, axis=1, keepdims=True)
    return x / _ANCHOR_RADIUS


def init_frozen(seed: int = 0, config: EncoderConfig | None = None) -> World:
    """Sample a frozen world deterministically from ``seed``.

    The same seed and config always reproduce bit-identical weights; any two
    distinct seeds give different weights.  After drawing the raw weights,
    the class anchors are aligned so that the image encoding of each class's
    cluster center correlates with that class's template text weight; this
    coupling between prototype geometry and class-token geometry is what
    gives the world a nontrivial zero-shot classifier and makes prompt
    transfer to unseen classes measurable.
    """
    config = config or EncoderConfig()
    tokens = _token_list(config)
    token_to_id = {tok: i for i, tok in enumerate(tokens)}
    class_ids = [token_to_id[t] for t in tokens if t.startswith("obj")]

    rng_vocab = np.random.default_rng([seed, 0])
    embedding = rng_vocab.normal(size=(config.vocab_size, config.embed_dim))
    embedding[token_to_id[PAD_TOKEN]] = 0.0
    k = config.class_latent_dim
    latents = np.zeros((config.vocab_size, k))
    latent_to_embed = rng_vocab.normal(size=(k, config.embed_dim)) / np.sqrt(k)
    latent_to_feature = rng_vocab.normal(size=(k, config.image_dim)) / np.sqrt(k)
    init_dirs = np.zeros((len(class_ids), config.image_dim))
    mix = config.anchor_mix
    for row, cid in enumerate(class_ids):
        u = rng_vocab.normal(size=k)
        unique = rng_vocab.normal(size=config.image_dim)
        latents[cid] = u
        embedding[cid] = config.class_row_scale * (
            u @ latent_to_embed + config.class_jitter * embedding[cid]
        )
        shared = u @ latent_to_feature
        direction = mix * shared / np.linalg.norm(shared) + (1.0 - mix) * unique / np.linalg.norm(unique)
        init_dirs[row] = direction / np.linalg.norm(direction)
    # The anchors are aligned against text weights computed with this hidden
    # context rather than with any runtime template, so the bundled template
    # gives a useful but improvable zero-shot classifier: prompt tuning can
    # close the gap on trained classes and, because the gap is shared across
    # classes, carry part of the correction over to unseen ones.
    hidden_context = _HIDDEN_SCALE * rng_vocab.normal(size=(config.context_len, config.embed_dim))

    rng_text = np.random.default_rng([seed, 1])
    e, h, d = config.embed_dim, config.text_hidden, config.out_dim
    s = config.context_len + 1
    # Token mixing is identity plus noise: each position keeps most of its
    # own signal but every other position leaks in, so the class row and the
    # context rows genuinely interact inside the ELU nonlinearities.
    text = {
        "pos_encoding": _sinusoidal_positions(config.context_len + 1, e),
        "text_mix1": np.eye(s) + 0.5 * rng_text.normal(size=(s, s)) / np.sqrt(s),
        "text_mix2": np.eye(s) + 0.5 * rng_text.normal(size=(s, s)) / np.sqrt(s),
        "text_w1": rng_text.normal(size=(e, h)) / np.sqrt(e),
        "text_b1": np.zeros(h),
        "text_w2": rng_text.normal(size=(h, e)) / np.sqrt(h),
        "text_b2": np.zeros(e),
        "text_w3": rng_text.normal(size=(e, h)) / np.sqrt(e),
        "text_b3": np.zeros(h),
        "text_w4": rng_text.normal(size=(h, e)) / np.sqrt(h),
        "text_b4": np.zeros(e),
        "text_out_w": rng_text.normal(size=(e, d)) / np.sqrt(e),
        "text_out_b": np.zeros(d),
    }
    rng_img = np.random.default_rng([seed, 2])
    hi = config.image_hidden
    image = {
        "img_w1": rng_img.normal(size=(config.image_dim, hi)) / np.sqrt(config.image_dim),
        "img_b1": np.zeros(hi),
        "img_w2": rng_img.normal(size=(hi, d)) / np.sqrt(hi),
        "img_b2": np.zeros(d),
    }
    encoder = EncoderPair(
        config=config,
        seed=seed,
        **{name: _freeze(arr) for name, arr in {**text, **image}.items()},
    )
    vocab = Vocabulary(
        tokens=tokens,
        token_to_id=token_to_id,
        pad_id=token_to_id[PAD_TOKEN],
        class_token_ids=class_ids,
        embedding=_freeze(embedding),
        class_latents=_freeze(latents),
        class_anchors=np.zeros((config.vocab_size, config.image_dim)),
    )
    stacked = np.vstack([np.vstack([hidden_context, embedding[cid]]) for cid in class_ids])
    targets = encode_text_stacked(encoder, stacked, len(class_ids))
    anchors = np.zeros((config.vocab_size, config.image_dim))
    anchors[class_ids] = _align_anchors(encoder, init_dirs, targets)
    vocab.class_anchors = _freeze(anchors)
    return World(encoder=encoder, vocab=vocab)


# ------------------------------------------------------------------ encoding
_POOL_CACHE: dict[tuple[int, int, float], Array] = {}


def _pool_matrix(n_seq: int, seq_len: int, class_weight: float) -> Array:
    """Block matrix pooling each sequence's rows of a stacked batch.

    Pooling is a fixed weighted mean that puts ``class_weight`` of the mass
    on the final (class token) position and spreads the rest uniformly, so
    the summary tracks the class row the way a contrastive text tower reads
    its end-of-text slot while still seeing the context.
    """
    key = (n_seq, seq_len, class_weight)
    if key not in _POOL_CACHE:
        if seq_len == 1:
            row = np.ones((1, 1))
        else:
            row = np.full((1, seq_len), (1.0 - class_weight) / (seq_len - 1))
            row[0, -1] = class_weight
        _POOL_CACHE[key] = np.kron(np.eye(n_seq), row)
    return _POOL_CACHE[key]


def encode_text_stacked(
    encoder: EncoderPair, stacked: Tensor | Array, n_seq: int
) -> Tensor | Array:
    """Encode ``n_seq`` sequences stacked row-wise into unit vectors.

    ``stacked`` has shape ``(n_seq * (context_len + 1), embed_dim)``; the
    result has one unit row per sequence.  Works on graph tensors (gradients
    flow to the input rows, never to the frozen weights) and plain arrays.
    """
    seq_len = encoder.config.context_len + 1
    shape = stacked.shape
    if len(shape) != 2 or shape[0] != n_seq * seq_len or shape[1] != encoder.config.embed_dim:
        raise ValueError(
            f"expected stacked shape ({n_seq * seq_len}, {encoder.config.embed_dim}), got {shape}"
        )
    h = stacked + np.tile(encoder.pos_encoding, (n_seq, 1))
    h = np.kron(np.eye(n_seq), encoder.text_mix1) @ h
    h = ad.elu(h @ encoder.text_w1 + encoder.text_b1) @ encoder.text_w2 + encoder.text_b2
    h = np.kron(np.eye(n_seq), encoder.text_mix2) @ h
    h = ad.elu(h @ encoder.text_w3 + encoder.text_b3) @ encoder.text_w4 + encoder.text_b4
    pooled = _pool_matrix(n_seq, seq_len, encoder.config.class_pool_weight) @ h
    return ad.l2_normalize(pooled @ encoder.text_out_w + encoder.text_out_b)


def encode_text(encoder: EncoderPair, sequence: Tensor | Array) -> Tensor | Array:
    """Encode one prompt-plus-class-token sequence into a unit vector.

    The sequence must have exactly ``context_len + 1`` rows: the context
    rows followed by the class-token row.  Position signals make the map
    order sensitive.
    """
    return encode_text_stacked(encoder, sequence, 1).reshape(encoder.config.out_dim)


def encode_image(encoder: EncoderPair, features: Array) -> Array:
    """Map raw image features to a unit vector (or one per row for a batch)."""
    x = np.asarray(features, dtype=np.float64)
    batched = x.ndim == 2
    if (batched and x.shape[1] != encoder.config.image_dim) or (
        not batched and x.shape != (encoder.config.image_dim,)
    ):
        raise ValueError(
            f"expected features of dimension {encoder.config.image_dim}, got shape {x.shape}"
        )
    h = ad.elu(x @ encoder.img_w1 + encoder.img_b1) @ encoder.img_w2 + encoder.img_b2
    return ad.l2_normalize(h)


# ---------------------------------------------------------------- tokenizing
def tokenize_prompt_text(
    vocab: Vocabulary, text: str, class_name: str, context_len: int
) -> tuple[Array, Array]:
    """Turn a prompt template into (context rows, class-token row).

    The class placeholder must terminate the template.  Context shorter than
    ``context_len`` is left-padded with the pad token; longer is an error, as
    is any token missing from the vocabulary.
    """
    parts = text.lower().split()
    if not parts or parts[-1] != CLASS_PLACEHOLDER:
        raise ValueError(f"prompt text must end with {CLASS_PLACEHOLDER!r}: {text!r}")
    context_tokens = parts[:-1]
    if len(context_tokens) > context_len:
        raise ValueError(
            f"template has {len(context_tokens)} context tokens, more than context_len={context_len}"
        )
    context_tokens = [PAD_TOKEN] * (context_len - len(context_tokens)) + context_tokens
    ids = [vocab.lookup(t) for t in context_tokens]
    class_id = vocab.lookup(class_name)
    return vocab.embedding[ids].copy(), vocab.embedding[class_id].copy()


def random_context(context_len: int, embed_dim: int, seed: int) -> Array:
    """Seeded standard-normal context rows for random prompt initialisation."""
    return np.random.default_rng([seed, 3]).normal(size=(context_len, embed_dim))


# --------------------------------------------------------------- persistence
def world_checksum(world: World) -> str:
    """SHA-256 over every weight table and the token list, for freshness checks."""
    digest = hashlib.sha256()
    for name in sorted(world.encoder.arrays()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(world.encoder.arrays()[name]).tobytes())
    for name, arr in (
        ("embedding", world.vocab.embedding),
        ("class_latents", world.vocab.class_latents),
        ("class_anchors", world.vocab.class_anchors),
    ):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    digest.update("\x00".join(world.vocab.tokens).encode())
    return digest.hexdigest()


def save_world(path: str | Path, world: World) -> None:
    """Write the frozen world to a versioned named-array container."""
    arrays = dict(world.encoder.arrays())
    arrays["embedding"] = world.vocab.embedding
    arrays["class_latents"] = world.vocab.class_latents
    arrays["class_anchors"] = world.vocab.class_anchors
    payload = {
        "kind": "frozen_world",
        "seed": world.encoder.seed,
        "config": {f.name: getattr(world.config, f.name) for f in fields(EncoderConfig)},
        "tokens": world.vocab.tokens,
        "pad_id": world.vocab.pad_id,
        "class_token_ids": world.vocab.class_token_ids,
    }
    save_arrays(path, arrays, payload)


def load_world(path: str | Path) -> World:
    """Reload a saved world; encodings reproduce the original bit for bit."""
    arrays, payload = load_arrays(path)
    if payload.get("kind") != "frozen_world":
        raise ContainerFormatError(f"{path}: not a frozen-world file (kind={payload.get('kind')!r})")
    try:
        config = EncoderConfig(**payload["config"])
        tokens = list(payload["tokens"])
        pad_id = int(payload["pad_id"])
        class_ids = [int(i) for i in payload["class_token_ids"]]
        seed = int(payload["seed"])
    except (KeyError, TypeError) as exc:
        raise ContainerFormatError(f"{path}: incomplete frozen-world header ({exc})") from exc
    encoder_fields = [
        f.name for f in fields(EncoderPair) if f.name not in ("config", "seed")
    ]
    weights = {}
    for name in encoder_fields:
        if name not in arrays:
            raise ContainerFormatError(f"{path}: missing weight array {name!r}")
        weights[name] = _freeze(arrays[name])
    for name in ("embedding", "class_latents", "class_anchors"):
        if name not in arrays:
            raise ContainerFormatError(f"{path}: missing vocabulary array {name!r}")
    encoder = EncoderPair(config=config, seed=seed, **weights)
    vocab = Vocabulary(
        tokens=tokens,
        token_to_id={tok: i for i, tok in enumerate(tokens)},
        pad_id=pad_id,
        class_token_ids=class_ids,
        embedding=_freeze(arrays["embedding"]),
        class_latents=_freeze(arrays["class_latents"]),
        class_anchors=_freeze(arrays["class_anchors"]),
    )
    return World(encoder=encoder, vocab=vocab)
