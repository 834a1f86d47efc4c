"""Multi-seed experiment protocols, bundled presets and the result writer.

An experiment is described by an ``ExperimentConfig``: a protocol name, a
list of learners (by their table aliases), dataset and training settings,
and a seed list.  ``run_experiment`` executes every (learner, seed) cell,
saves one checkpoint and one loss-history file per trained cell, and writes
a ``results.json`` whose numbers are reproduced byte for byte when the same
config runs again.  Rendered CSV and text tables are derived from the JSON
payload only, never the other way around.

Per-run randomness is tied to the run seed: a run with seed ``s`` draws its
dataset from ``spec.seed + s``, its episode, training order and evaluation
streams from ``s`` directly.  The frozen world is shared by every cell and
its weight checksum is recorded in the results payload.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .checkpoints import save_checkpoint
from .datasets import (
    EVAL_RESERVE,
    Dataset,
    Episode,
    SplitView,
    SyntheticDatasetSpec,
    apply_domain_shift,
    generate_dataset,
    harmonic_mean,
    make_episode,
    split_view,
)
from .encoders import World, init_frozen, world_checksum
from .inference import SAMPLER_FAMILIES, SamplerSpec, evaluate
from .learners import init_prompt_state
from .training import TrainConfig, TrainHistory, train

PROTOCOLS = (
    "base_to_new",
    "cross_dataset",
    "domain_shift",
    "ablation_posterior",
    "ablation_mc",
    "ablation_init",
)

# Table aliases for learners, in the order result tables print them.
LEARNER_ALIASES = {
    "clip_zero_shot": "zero_shot",
    "coop": "coop",
    "coop+vpt": "vpt_global",
    "cocoop": "cocoop",
    "cocoop+vpt": "vpt_conditional",
    "proda": "proda",
}

# Signed-difference columns compare each variational learner against its
# deterministic ancestor.
DELTA_BASELINES = {"coop+vpt": "coop", "cocoop+vpt": "cocoop"}

INIT_MODES = ("template", "random")

OUT_DIR_ENV = "PROMPTVAR_OUT"

RESULTS_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration, with one message per bad field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment end to end."""

    protocol: str = "base_to_new"
    learners: tuple[str, ...] = ("coop",)
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    seeds: tuple[int, ...] = (1, 2, 3)
    world_seed: int = 0
    base_fraction: float = 0.5
    shots: int = 16
    targets: tuple[SyntheticDatasetSpec, ...] = ()
    severities: tuple[float, ...] = ()
    k_values: tuple[int, ...] = ()
    sampler_families: tuple[str, ...] = ()
    init_modes: tuple[str, ...] = ()
    mc_eval_repeats: int = 5
    out_dir: str = "runs"


def validate_config(config: ExperimentConfig) -> None:
    """Raise ``ConfigError`` listing every invalid field."""
    problems: list[str] = []
    if config.protocol not in PROTOCOLS:
        problems.append(
            f"protocol: unknown protocol {config.protocol!r}; expected one of {PROTOCOLS}"
        )
    if not config.learners:
        problems.append("learners: must name at least one learner")
    for i, alias in enumerate(config.learners):
        if alias not in LEARNER_ALIASES:
            problems.append(
                f"learners[{i}]: unknown learner {alias!r}; "
                f"expected one of {tuple(LEARNER_ALIASES)}"
            )
    if not config.seeds:
        problems.append("seeds: must list at least one seed")
    if not 0.0 < config.base_fraction <= 1.0:
        problems.append(f"base_fraction: must lie in (0, 1], got {config.base_fraction}")
    if config.shots < 1:
        problems.append(f"shots: must be >= 1, got {config.shots}")
    elif config.shots > config.dataset.examples_per_class - EVAL_RESERVE:
        problems.append(
            f"shots: {config.shots} exceeds examples_per_class - eval reserve "
            f"({config.dataset.examples_per_class} - {EVAL_RESERVE})"
        )
    if config.train.epochs < config.train.warmup_epochs:
        problems.append("train.epochs: must be >= train.warmup_epochs")
    if config.train.learning_rate <= 0:
        problems.append("train.learning_rate: must be positive")
    if config.mc_eval_repeats < 1:
        problems.append(f"mc_eval_repeats: must be >= 1, got {config.mc_eval_repeats}")
    if config.protocol == "domain_shift":
        if not config.severities:
            problems.append("severities: domain_shift requires at least one severity")
        elif list(config.severities) != sorted(config.severities):
            problems.append("severities: must be sorted ascending")
        elif config.severities[0] < 0:
            problems.append("severities: must be nonnegative")
    if config.protocol == "ablation_mc":
        if not config.k_values:
            problems.append("k_values: ablation_mc requires at least one sample count")
        elif any(k < 1 for k in config.k_values):
            problems.append("k_values: sample counts must be >= 1")
        elif list(config.k_values) != sorted(config.k_values):
            problems.append("k_values: must be sorted ascending")
    if config.protocol == "ablation_posterior":
        if not config.sampler_families:
            problems.append("sampler_families: ablation_posterior requires at least one family")
        for i, fam in enumerate(config.sampler_families):
            if fam not in SAMPLER_FAMILIES:
                problems.append(
                    f"sampler_families[{i}]: unknown family {fam!r}; "
                    f"expected one of {SAMPLER_FAMILIES}"
                )
    if config.protocol == "ablation_init":
        if not config.init_modes:
            problems.append("init_modes: ablation_init requires at least one mode")
        for i, mode in enumerate(config.init_modes):
            if mode not in INIT_MODES:
                problems.append(
                    f"init_modes[{i}]: unknown mode {mode!r}; expected one of {INIT_MODES}"
                )
    if problems:
        raise ConfigError(problems)


# ------------------------------------------------------------- serialization
def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Plain nested dict representation, suitable for JSON or YAML."""
    out: dict[str, Any] = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "dataset":
            out[f.name] = _spec_to_dict(value)
        elif f.name == "targets":
            out[f.name] = [_spec_to_dict(s) for s in value]
        elif f.name == "train":
            out[f.name] = {g.name: getattr(value, g.name) for g in fields(TrainConfig)}
        elif f.name == "sampler":
            out[f.name] = {"family": value.family, "k": value.k, "seed": value.seed}
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def _spec_to_dict(spec: SyntheticDatasetSpec) -> dict[str, Any]:
    return {f.name: getattr(spec, f.name) for f in fields(SyntheticDatasetSpec)}


def _build(cls: type, payload: Any, label: str, problems: list[str]) -> Any:
    if not isinstance(payload, dict):
        problems.append(f"{label}: expected a mapping, got {type(payload).__name__}")
        return None
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        problems.append(f"{label}: unknown fields {unknown}; expected a subset of {sorted(known)}")
        return None
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        problems.append(f"{label}: {exc}")
        return None


def config_from_dict(payload: dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config from a plain dict; strict about fields."""
    if not isinstance(payload, dict):
        raise ConfigError([f"config: expected a mapping, got {type(payload).__name__}"])
    problems: list[str] = []
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        problems.append(f"config: unknown fields {unknown}; expected a subset of {sorted(known)}")
    kwargs: dict[str, Any] = {}
    for name, value in payload.items():
        if name in unknown:
            continue
        if name == "dataset":
            value = _build(SyntheticDatasetSpec, value, "dataset", problems)
        elif name == "targets":
            if not isinstance(value, (list, tuple)):
                problems.append("targets: expected a list of dataset specs")
                continue
            value = tuple(
                s
                for i, item in enumerate(value)
                if (s := _build(SyntheticDatasetSpec, item, f"targets[{i}]", problems)) is not None
            )
        elif name == "train":
            value = _build(TrainConfig, value, "train", problems)
        elif name == "sampler":
            value = _build(SamplerSpec, value, "sampler", problems)
        elif isinstance(value, list):
            value = tuple(value)
        if value is not None:
            kwargs[name] = value
    if problems:
        raise ConfigError(problems)
    config = ExperimentConfig(**kwargs)
    validate_config(config)
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a JSON or YAML config file, selected by extension."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        payload = yaml.safe_load(text)
    else:
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config: {path} is not valid JSON ({exc})"]) from exc
    return config_from_dict(payload)


# ------------------------------------------------------------------- presets
def _suite_train(**overrides: Any) -> TrainConfig:
    """Training settings calibrated for the bundled synthetic suite.

    The toy geometry needs a far larger step size than the full-scale
    default of 2e-3, and a small KL weight so the posterior mean can travel;
    120 epochs on a 2-shot support set puts the deterministic learners in
    their overfitting regime, which is where the variational ones are
    expected to earn their keep.
    """
    base = dict(learning_rate=0.2, epochs=120, kl_weight=0.01, train_samples=1)
    base.update(overrides)
    return TrainConfig(**base)


def preset(name: str) -> ExperimentConfig:
    """A fully populated config for one of the bundled protocol presets."""
    suite_seeds = (1, 2, 3, 4, 5)
    if name == "base_to_new":
        return ExperimentConfig(
            protocol="base_to_new",
            learners=("clip_zero_shot", "coop", "coop+vpt", "cocoop", "cocoop+vpt", "proda"),
            train=_suite_train(),
            sampler=SamplerSpec(family="posterior_full", k=10, seed=0),
            seeds=suite_seeds,
            shots=2,
            out_dir="runs/base_to_new",
        )
    if name == "cross_dataset":
        return ExperimentConfig(
            protocol="cross_dataset",
            learners=("coop", "coop+vpt"),
            train=_suite_train(),
            sampler=SamplerSpec(family="posterior_full", k=10, seed=0),
            seeds=(1, 2, 3),
            shots=2,
            targets=(
                SyntheticDatasetSpec(seed=100),
                SyntheticDatasetSpec(n_classes=12, seed=200),
                SyntheticDatasetSpec(n_classes=8, seed=300),
            ),
            out_dir="runs/cross_dataset",
        )
    if name == "domain_shift":
        return ExperimentConfig(
            protocol="domain_shift",
            learners=("coop", "coop+vpt"),
            train=_suite_train(),
            sampler=SamplerSpec(family="posterior_full", k=10, seed=0),
            seeds=(1, 2, 3),
            shots=2,
            severities=(0.0, 0.25, 0.5, 1.0, 2.0, 4.0),
            out_dir="runs/domain_shift",
        )
    if name == "ablation_posterior":
        return ExperimentConfig(
            protocol="ablation_posterior",
            learners=("coop+vpt",),
            train=_suite_train(),
            sampler=SamplerSpec(family="posterior_full", k=1, seed=0),
            seeds=suite_seeds,
            shots=2,
            sampler_families=SAMPLER_FAMILIES,
            out_dir="runs/ablation_posterior",
        )
    if name == "ablation_mc":
        return ExperimentConfig(
            protocol="ablation_mc",
            learners=("coop+vpt",),
            train=_suite_train(),
            sampler=SamplerSpec(family="posterior_full", k=10, seed=0),
            seeds=suite_seeds,
            shots=2,
            k_values=(1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 20),
            mc_eval_repeats=5,
            out_dir="runs/ablation_mc",
        )
    if name == "ablation_init":
        return ExperimentConfig(
            protocol="ablation_init",
            learners=("coop", "coop+vpt"),
            train=_suite_train(),
            sampler=SamplerSpec(family="posterior_full", k=10, seed=0),
            seeds=(1, 2, 3),
            shots=2,
            init_modes=INIT_MODES,
            out_dir="runs/ablation_init",
        )
    raise ValueError(f"unknown preset {name!r}; available presets: {PROTOCOLS}")


# ----------------------------------------------------------------- execution
@dataclass
class _Sink:
    """Collects per-cell artifacts while a protocol executes."""

    out: Path
    cells: dict[str, Any] = field(default_factory=dict)

    def save_cell(self, alias: str, seed: int, state, history: TrainHistory | None,
                  tag: str = "") -> None:
        stem = f"{alias}{tag}_seed{seed}"
        save_checkpoint(self.out / "checkpoints" / f"{stem}.npz", state)
        if history is not None:
            history.to_csv(self.out / "history" / f"{stem}.csv")


def _episode_views(
    world: World, config: ExperimentConfig, seed: int,
    base_fraction: float, spec: SyntheticDatasetSpec | None = None,
) -> tuple[Dataset, Episode, dict[str, SplitView]]:
    spec = spec if spec is not None else config.dataset
    ds = generate_dataset(world, replace(spec, seed=spec.seed + seed))
    ep = make_episode(ds, base_fraction=base_fraction, shots=config.shots, seed=seed)
    views = {"base_eval": split_view(ds, ep, "base_eval")}
    if ep.new_classes:
        views["new_eval"] = split_view(ds, ep, "new_eval")
    return ds, ep, views


def _train_cell(
    world: World, config: ExperimentConfig, alias: str, seed: int,
    ds: Dataset, ep: Episode, init_mode: str | None = None,
):
    """Train (or initialise) one learner cell; returns (state, history)."""
    kind = LEARNER_ALIASES[alias]
    if kind == "zero_shot":
        state = init_prompt_state(world, "zero_shot", seed, template=config.train.template)
        return state, None
    cfg = replace(config.train, learner=kind, seed=seed)
    if init_mode is not None:
        cfg = replace(cfg, init=init_mode)
    return train(world, ds, ep, cfg)


def _accuracy(
    world: World, config: ExperimentConfig, state, view: SplitView, seed: int,
    family: str | None = None, k: int | None = None, sampler_seed: int | None = None,
    features: np.ndarray | None = None,
) -> float:
    """Percent accuracy of one state on one split view."""
    sampler = SamplerSpec(
        family=config.sampler.family if family is None else family,
        k=config.sampler.k if k is None else k,
        seed=seed if sampler_seed is None else sampler_seed,
    )
    return 100.0 * evaluate(
        world, state, view.class_token_ids,
        view.features if features is None else features,
        view.labels, sampler, tau=config.train.tau, example_ids=view.example_ids,
    )


def _mean(values: list[float]) -> float:
    return float(np.mean(values))


def _run_base_to_new(world: World, config: ExperimentConfig, sink: _Sink) -> dict[str, Any]:
    cells = sink.cells
    for alias in config.learners:
        cells[alias] = {}
    for seed in config.seeds:
        ds, ep, views = _episode_views(world, config, seed, config.base_fraction)
        for alias in config.learners:
            state, history = _train_cell(world, config, alias, seed, ds, ep)
            sink.save_cell(alias, seed, state, history)
            base = _accuracy(world, config, state, views["base_eval"], seed)
            new = _accuracy(world, config, state, views["new_eval"], seed)
            cells[alias][str(seed)] = {
                "base": base, "new": new, "h": harmonic_mean(base, new),
            }
    return cells


def _run_cross_dataset(world: World, config: ExperimentConfig, sink: _Sink) -> dict[str, Any]:
    cells = sink.cells
    for alias in config.learners:
        cells[alias] = {}
    for seed in config.seeds:
        ds, ep, views = _episode_views(world, config, seed, base_fraction=1.0)
        target_views = []
        for i, target in enumerate(config.targets):
            _, _, tviews = _episode_views(world, config, seed, 1.0, spec=target)
            target_views.append((f"target_{i}", tviews["base_eval"]))
        for alias in config.learners:
            state, history = _train_cell(world, config, alias, seed, ds, ep)
            sink.save_cell(alias, seed, state, history)
            source = _accuracy(world, config, state, views["base_eval"], seed)
            targets = {
                name: _accuracy(world, config, state, view, seed)
                for name, view in target_views
            }
            cell = {"source": source, "targets": targets}
            if targets:
                cell["target_mean"] = _mean(list(targets.values()))
            cells[alias][str(seed)] = cell
    return cells


def _run_domain_shift(world: World, config: ExperimentConfig, sink: _Sink) -> dict[str, Any]:
    cells = sink.cells
    for alias in config.learners:
        cells[alias] = {}
    for seed in config.seeds:
        ds, ep, views = _episode_views(world, config, seed, base_fraction=1.0)
        view = views["base_eval"]
        shifted = {
            severity: apply_domain_shift(ds.spec, view.features, severity, seed)
            for severity in config.severities
        }
        for alias in config.learners:
            state, history = _train_cell(world, config, alias, seed, ds, ep)
            sink.save_cell(alias, seed, state, history)
            cells[alias][str(seed)] = {
                "severities": list(config.severities),
                "accuracy": [
                    _accuracy(world, config, state, view, seed, features=shifted[severity])
                    for severity in config.severities
                ],
            }
    return cells


def _run_ablation_posterior(world: World, config: ExperimentConfig, sink: _Sink) -> dict[str, Any]:
    cells = sink.cells
    for alias in config.learners:
        cells[alias] = {}
    for seed in config.seeds:
        ds, ep, views = _episode_views(world, config, seed, config.base_fraction)
        for alias in config.learners:
            state, history = _train_cell(world, config, alias, seed, ds, ep)
            sink.save_cell(alias, seed, state, history)
            cells[alias][str(seed)] = {
                family: _accuracy(world, config, state, views["new_eval"], seed, family=family)
                for family in config.sampler_families
            }
    return cells


def _run_ablation_mc(world: World, config: ExperimentConfig, sink: _Sink) -> dict[str, Any]:
    """Accuracy-versus-K curves for the Monte Carlo predictor.

    Each point averages the evaluation over ``mc_eval_repeats`` sampler
    seeds, giving a low-variance estimate of the expected accuracy at that
    sample count rather than the luck of a single draw sequence.
    """
    cells = sink.cells
    for alias in config.learners:
        cells[alias] = {}
    for seed in config.seeds:
        ds, ep, views = _episode_views(world, config, seed, config.base_fraction)
        for alias in config.learners:
            state, history = _train_cell(world, config, alias, seed, ds, ep)
            sink.save_cell(alias, seed, state, history)
            curve = []
            for k in config.k_values:
                repeats = [
                    _accuracy(
                        world, config, state, views["new_eval"], seed,
                        k=k, sampler_seed=seed + 100 * r,
                    )
                    for r in range(config.mc_eval_repeats)
                ]
                curve.append(_mean(repeats))
            cells[alias][str(seed)] = {"k": list(config.k_values), "accuracy": curve}
    return cells


def _run_ablation_init(world: World, config: ExperimentConfig, sink: _Sink) -> dict[str, Any]:
    cells = sink.cells
    for alias in config.learners:
        cells[alias] = {mode: {} for mode in config.init_modes}
    for seed in config.seeds:
        ds, ep, views = _episode_views(world, config, seed, config.base_fraction)
        for alias in config.learners:
            for mode in config.init_modes:
                state, history = _train_cell(world, config, alias, seed, ds, ep, init_mode=mode)
                sink.save_cell(alias, seed, state, history, tag=f"_{mode}")
                base = _accuracy(world, config, state, views["base_eval"], seed)
                new = _accuracy(world, config, state, views["new_eval"], seed)
                cells[alias][mode][str(seed)] = {
                    "base": base, "new": new, "h": harmonic_mean(base, new),
                }
    return cells


_RUNNERS: dict[str, Callable[[World, ExperimentConfig, _Sink], dict[str, Any]]] = {
    "base_to_new": _run_base_to_new,
    "cross_dataset": _run_cross_dataset,
    "domain_shift": _run_domain_shift,
    "ablation_posterior": _run_ablation_posterior,
    "ablation_mc": _run_ablation_mc,
    "ablation_init": _run_ablation_init,
}


# ------------------------------------------------------------------ summary
def _fmt(x: float) -> float:
    """Percentages are reported to 2 decimals in every rendered table."""
    return round(float(x), 2)


def summarize(protocol: str, config_dict: dict[str, Any], cells: dict[str, Any]) -> list[dict[str, Any]]:
    """Aggregate per-seed cells into the tables the protocol reports.

    Every number here is recomputed from ``cells``; tables never carry
    information that is absent from the per-seed payload.
    """
    learners = list(cells)
    tables: list[dict[str, Any]] = []
    if protocol in ("base_to_new",):
        columns = ["learner", "base", "new", "H", "dH"]
        rows = []
        means: dict[str, dict[str, float]] = {}
        for alias in learners:
            per_seed = cells[alias]
            means[alias] = {
                key: _mean([cell[key] for cell in per_seed.values()])
                for key in ("base", "new", "h")
            }
        for alias in learners:
            m = means[alias]
            baseline = DELTA_BASELINES.get(alias)
            delta = m["h"] - means[baseline]["h"] if baseline in means else None
            rows.append([alias, _fmt(m["base"]), _fmt(m["new"]), _fmt(m["h"]),
                         None if delta is None else _fmt(delta)])
        tables.append({"name": "base_to_new", "columns": columns, "rows": rows})
    elif protocol == "cross_dataset":
        target_names = []
        first = cells[learners[0]]
        for cell in first.values():
            target_names = list(cell["targets"])
            break
        columns = ["learner", "source"] + target_names + (["target_mean"] if target_names else [])
        rows = []
        for alias in learners:
            per_seed = cells[alias].values()
            row = [alias, _fmt(_mean([c["source"] for c in per_seed]))]
            for name in target_names:
                row.append(_fmt(_mean([c["targets"][name] for c in cells[alias].values()])))
            if target_names:
                row.append(_fmt(_mean([c["target_mean"] for c in cells[alias].values()])))
            rows.append(row)
        tables.append({"name": "cross_dataset", "columns": columns, "rows": rows})
    elif protocol == "domain_shift":
        severities = config_dict["severities"]
        columns = ["learner"] + [f"severity_{s:g}" for s in severities]
        rows = []
        for alias in learners:
            acc = np.array([cell["accuracy"] for cell in cells[alias].values()])
            rows.append([alias] + [_fmt(v) for v in acc.mean(axis=0)])
        tables.append({"name": "domain_shift", "columns": columns, "rows": rows})
    elif protocol == "ablation_posterior":
        families = config_dict["sampler_families"]
        columns = ["learner"] + list(families)
        rows = []
        for alias in learners:
            per_seed = cells[alias].values()
            rows.append([alias] + [
                _fmt(_mean([cell[family] for cell in per_seed])) for family in families
            ])
        tables.append({"name": "ablation_posterior", "columns": columns, "rows": rows})
    elif protocol == "ablation_mc":
        k_values = config_dict["k_values"]
        columns = ["learner"] + [f"K{k}" for k in k_values]
        rows = []
        for alias in learners:
            acc = np.array([cell["accuracy"] for cell in cells[alias].values()])
            rows.append([alias] + [_fmt(v) for v in acc.mean(axis=0)])
        tables.append({"name": "ablation_mc", "columns": columns, "rows": rows})
    elif protocol == "ablation_init":
        columns = ["learner", "init", "base", "new", "H"]
        rows = []
        for alias in learners:
            for mode, per_seed in cells[alias].items():
                rows.append([
                    alias, mode,
                    _fmt(_mean([c["base"] for c in per_seed.values()])),
                    _fmt(_mean([c["new"] for c in per_seed.values()])),
                    _fmt(_mean([c["h"] for c in per_seed.values()])),
                ])
        tables.append({"name": "ablation_init", "columns": columns, "rows": rows})
    return tables


def render_table(table: dict[str, Any]) -> str:
    """Fixed-width text rendering of one summary table."""
    columns = table["columns"]
    body = [[("" if v is None else str(v)) for v in row] for row in table["rows"]]
    widths = [
        max(len(str(col)), *(len(row[i]) for row in body)) if body else len(str(col))
        for i, col in enumerate(columns)
    ]
    lines = [table["name"]]
    lines.append("  ".join(str(col).ljust(widths[i]) for i, col in enumerate(columns)))
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(columns))))
    return "\n".join(lines)


def _write_tables(out: Path, tables: list[dict[str, Any]]) -> None:
    tables_dir = out / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    rendered = []
    for table in tables:
        with open(tables_dir / f"{table['name']}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(table["columns"])
            for row in table["rows"]:
                writer.writerow(["" if v is None else v for v in row])
        rendered.append(render_table(table))
    (tables_dir / "summary.txt").write_text("\n\n".join(rendered) + "\n")


def _write_results(out: Path, payload: dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, sort_keys=True)
    (out / "results.json").write_text(text + "\n")


def resolve_out_dir(config: ExperimentConfig, override: str | None = None) -> Path:
    """Output directory: explicit override, else environment, else config."""
    if override:
        return Path(override)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env) / Path(config.out_dir).name
    return Path(config.out_dir)


def run_experiment(
    config: ExperimentConfig, out_dir: str | Path | None = None,
) -> dict[str, Any]:
    """Execute a validated config and write its result files.

    Writes ``results.json``, per-cell checkpoints and loss histories, and
    CSV plus plain-text summary tables under the output directory.  If a
    cell fails mid-run the partial payload is still written, marked with
    ``status: failed`` and the error message, before the exception
    propagates.
    """
    validate_config(config)
    out = Path(out_dir) if out_dir is not None else resolve_out_dir(config)
    world = init_frozen(seed=config.world_seed)
    checksum_before = world_checksum(world)
    config_dict = config_to_dict(config)
    payload: dict[str, Any] = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "protocol": config.protocol,
        "config": config_dict,
        "world_checksum": checksum_before,
        "status": "ok",
        "cells": {},
        "tables": [],
    }
    sink = _Sink(out=out)
    try:
        cells = _RUNNERS[config.protocol](world, config, sink)
    except Exception as exc:
        payload["status"] = "failed"
        payload["error"] = f"{type(exc).__name__}: {exc}"
        payload["cells"] = sink.cells
        _write_results(out, payload)
        raise
    if world_checksum(world) != checksum_before:
        raise RuntimeError("frozen encoder weights changed during the experiment")
    payload["cells"] = cells
    payload["tables"] = summarize(config.protocol, config_dict, cells)
    _write_results(out, payload)
    _write_tables(out, payload["tables"])
    return payload


def run_experiment_file(path: str | Path, out_dir: str | None = None) -> dict[str, Any]:
    """Load, validate and run a config file; see ``run_experiment``."""
    config = load_config(path)
    return run_experiment(config, out_dir=resolve_out_dir(config, out_dir))
