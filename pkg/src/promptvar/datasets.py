"""Synthetic Gaussian-cluster datasets, episode splits and benchmark metrics.

Each dataset assigns a subset of the vocabulary's class tokens to its
classes and places one Gaussian cluster per class around a prototype built
from the class token's feature-space anchor.  Because anchors and token
embeddings derive from the same low-dimensional latent (see the encoder
module), the geometry of the clusters is correlated with the geometry of
the class-token embeddings; a prompt tuned on some classes can therefore
carry signal to classes never seen in training, which is what the
base-to-new, cross-dataset and domain-shift protocols measure.

Episodes split classes into a base half and a new half, sample a few-shot
support set from the base classes and reserve a fixed evaluation set per
class that support sampling can never touch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoders import World

EVAL_RESERVE = 20


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Recipe for one synthetic classification dataset.

    ``rotation_angle`` (radians), ``noise_inflation`` and ``translation``
    parameterise the domain-shift operator at unit severity.
    """

    n_classes: int = 16
    examples_per_class: int = 40
    dispersion: float = 2.0
    noise_scale: float = 0.2
    rotation_angle: float = math.pi / 8
    noise_inflation: float = 0.5
    translation: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 4:
            raise ValueError("a dataset needs at least 4 classes to support a base/new split")
        if self.examples_per_class <= EVAL_RESERVE:
            raise ValueError(
                f"examples_per_class must exceed the evaluation reserve of {EVAL_RESERVE}"
            )
        if self.noise_scale < 0 or self.dispersion <= 0:
            raise ValueError("dispersion must be positive and noise_scale nonnegative")
        if self.dispersion <= self.noise_scale:
            raise ValueError("cluster dispersion must exceed the within-cluster noise scale")


@dataclass
class Dataset:
    """Materialised examples of one spec: features, labels and prototypes."""

    spec: SyntheticDatasetSpec
    class_token_ids: list[int]
    class_names: list[str]
    prototypes: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]


def generate_dataset(world: World, spec: SyntheticDatasetSpec) -> Dataset:
    """Sample a dataset whose prototypes follow the class-token anchors.

    Class tokens are drawn without replacement from the vocabulary's class
    pool; each class contributes ``examples_per_class`` draws from an
    isotropic Gaussian of scale ``noise_scale`` around
    ``dispersion * anchor``.  Deterministic in ``spec.seed``.
    """
    pool = world.vocab.class_token_ids
    if spec.n_classes > len(pool):
        raise ValueError(
            f"spec asks for {spec.n_classes} classes but the vocabulary has {len(pool)} class tokens"
        )
    dim = world.config.image_dim
    rng = np.random.default_rng([spec.seed, 10])
    chosen = sorted(rng.choice(len(pool), size=spec.n_classes, replace=False).tolist())
    token_ids = [pool[i] for i in chosen]
    prototypes = spec.dispersion * world.vocab.class_anchors[token_ids]
    n = spec.n_classes * spec.examples_per_class
    features = np.zeros((n, dim))
    labels = np.zeros(n, dtype=np.int64)
    for c in range(spec.n_classes):
        lo = c * spec.examples_per_class
        hi = lo + spec.examples_per_class
        noise = rng.normal(size=(spec.examples_per_class, dim))
        features[lo:hi] = prototypes[c] + spec.noise_scale * noise
        labels[lo:hi] = c
    return Dataset(
        spec=spec,
        class_token_ids=token_ids,
        class_names=[world.vocab.tokens[t] for t in token_ids],
        prototypes=prototypes,
        features=features,
        labels=labels,
    )


# ------------------------------------------------------------------- episodes
@dataclass
class Episode:
    """Index-level view of one base-to-new split of a dataset.

    ``support`` indexes base-class training examples; the eval index sets
    are disjoint from support by construction.  Class lists hold positions
    into ``dataset.class_token_ids``.
    """

    base_classes: list[int]
    new_classes: list[int]
    support: np.ndarray
    base_eval: np.ndarray
    new_eval: np.ndarray


@dataclass
class SplitView:
    """Examples of one episode side with labels local to its class list."""

    class_token_ids: list[int]
    features: np.ndarray
    labels: np.ndarray
    example_ids: np.ndarray


def make_episode(
    dataset: Dataset,
    base_fraction: float = 0.5,
    shots: int = 16,
    seed: int = 0,
) -> Episode:
    """Split classes and sample support/eval index sets deterministically.

    The class split depends only on the dataset (via its spec seed) so that
    reseeding a learner never moves classes between the base and new sides;
    the per-class evaluation reserve and the support shots are sampled from
    the episode seed.  ``base_fraction == 1.0`` puts every class in base,
    for protocols that train on the full class set.
    """
    spec = dataset.spec
    c = spec.n_classes
    if not 0.0 < base_fraction <= 1.0:
        raise ValueError("base_fraction must lie in (0, 1]")
    n_base = int(round(c * base_fraction))
    n_base = min(max(n_base, 1), c)
    if base_fraction < 1.0 and n_base == c:
        n_base = c - 1
    split_rng = np.random.default_rng([spec.seed, 11])
    order = split_rng.permutation(c)
    base_classes = sorted(int(i) for i in order[:n_base])
    new_classes = sorted(int(i) for i in order[n_base:])

    per_class = spec.examples_per_class
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if shots > per_class - EVAL_RESERVE:
        raise ValueError(
            f"cannot draw {shots} shots per class: only {per_class - EVAL_RESERVE} examples "
            f"per class remain outside the evaluation reserve of {EVAL_RESERVE}"
        )
    sample_rng = np.random.default_rng([seed, 12])
    support: list[int] = []
    eval_by_class: dict[int, np.ndarray] = {}
    for cls in range(c):
        lo = cls * per_class
        perm = lo + sample_rng.permutation(per_class)
        eval_by_class[cls] = np.sort(perm[:EVAL_RESERVE])
        if cls in base_classes:
            support.extend(sorted(int(i) for i in perm[EVAL_RESERVE:EVAL_RESERVE + shots]))
    return Episode(
        base_classes=base_classes,
        new_classes=new_classes,
        support=np.asarray(support, dtype=np.int64),
        base_eval=np.concatenate([eval_by_class[cls] for cls in base_classes]),
        new_eval=np.concatenate([eval_by_class[cls] for cls in new_classes])
        if new_classes
        else np.zeros(0, dtype=np.int64),
    )


def split_view(dataset: Dataset, episode: Episode, side: str) -> SplitView:
    """Materialise one side of an episode with side-local labels."""
    if side == "support":
        classes, index = episode.base_classes, episode.support
    elif side == "base_eval":
        classes, index = episode.base_classes, episode.base_eval
    elif side == "new_eval":
        classes, index = episode.new_classes, episode.new_eval
    else:
        raise ValueError(f"unknown episode side {side!r}")
    if len(index) == 0:
        raise ValueError(f"episode side {side!r} is empty")
    local = {cls: i for i, cls in enumerate(classes)}
    labels = np.asarray([local[int(dataset.labels[i])] for i in index], dtype=np.int64)
    return SplitView(
        class_token_ids=[dataset.class_token_ids[cls] for cls in classes],
        features=dataset.features[index],
        labels=labels,
        example_ids=np.asarray(index, dtype=np.int64),
    )


# -------------------------------------------------------------------- metrics
def harmonic_mean(base: float, new: float) -> float:
    """Harmonic mean ``2 * base * new / (base + new)`` of two accuracies."""
    if base < 0 or new < 0:
        raise ValueError("accuracies must be nonnegative")
    if base + new == 0:
        raise ValueError("harmonic mean is undefined when both accuracies are zero")
    return 2.0 * base * new / (base + new)


# --------------------------------------------------------------- domain shift
def apply_domain_shift(
    spec: SyntheticDatasetSpec, features: np.ndarray, severity: float, seed: int
) -> np.ndarray:
    """Shift features by a severity-scaled rotation, translation and noise.

    The rotation turns every consecutive coordinate pair by
    ``severity * rotation_angle``; the translation moves along a direction
    seeded by the dataset, scaled by ``severity * translation``; finally
    isotropic noise of scale ``severity * noise_inflation`` is added from a
    stream keyed on ``seed``.  Severity 0 returns the input unchanged.
    """
    if severity < 0:
        raise ValueError("severity must be nonnegative")
    features = np.asarray(features, dtype=np.float64)
    if severity == 0.0:
        return features.copy()
    dim = features.shape[1]
    theta = severity * spec.rotation_angle
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = np.eye(dim)
    for i in range(0, dim - 1, 2):
        rot[i, i] = cos_t
        rot[i, i + 1] = -sin_t
        rot[i + 1, i] = sin_t
        rot[i + 1, i + 1] = cos_t
    direction_rng = np.random.default_rng([spec.seed, 13])
    direction = direction_rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    noise_rng = np.random.default_rng([seed, 14])
    noise = noise_rng.normal(size=features.shape)
    return features @ rot.T + severity * spec.translation * direction + severity * spec.noise_inflation * noise


# ------------------------------------------------------------------ text dump
_DUMP_HEADER_PREFIX = "# spec: "


def dump_dataset(path: str | Path, dataset: Dataset) -> None:
    """Write a dataset as delimited text: id, class name, feature columns.

    The first line stores the generating spec as a JSON comment so the file
    round-trips; rows follow in index order with full float precision.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(_DUMP_HEADER_PREFIX + json.dumps(asdict(dataset.spec), sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "class"] + [f"x{i}" for i in range(dim)])
        for i in range(dataset.n_examples):
            name = dataset.class_names[int(dataset.labels[i])]
            writer.writerow([i, name] + [repr(float(v)) for v in dataset.features[i]])


def load_dataset(path: str | Path, world: World) -> Dataset:
    """Reload a dumped dataset; features and labels round-trip exactly."""
    path = Path(path)
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.startswith(_DUMP_HEADER_PREFIX):
            raise ValueError(f"{path}: missing spec header line")
        spec = SyntheticDatasetSpec(**json.loads(header[len(_DUMP_HEADER_PREFIX):]))
        reader = csv.reader(fh)
        columns = next(reader)
        if columns[:2] != ["id", "class"]:
            raise ValueError(f"{path}: expected columns (id, class, x0, ...), got {columns[:2]}")
        names: list[str] = []
        rows: list[tuple[int, str, list[float]]] = []
        for row in reader:
            name = row[1]
            if name not in names:
                names.append(name)
            rows.append((int(row[0]), name, [float(v) for v in row[2:]]))
    names = sorted(names)
    for name in names:
        world.vocab.lookup(name)
    token_ids = [world.vocab.token_to_id[name] for name in names]
    name_to_label = {name: i for i, name in enumerate(names)}
    features = np.zeros((len(rows), len(rows[0][2])))
    labels = np.zeros(len(rows), dtype=np.int64)
    for i, (_, name, vals) in enumerate(rows):
        features[i] = vals
        labels[i] = name_to_label[name]
    prototypes = spec.dispersion * world.vocab.class_anchors[token_ids]
    return Dataset(
        spec=spec,
        class_token_ids=token_ids,
        class_names=names,
        prototypes=prototypes,
        features=features,
        labels=labels,
    )
