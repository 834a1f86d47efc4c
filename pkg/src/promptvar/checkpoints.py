"""Prompt-learner checkpoints: exact round-trip of a PromptState.

A checkpoint stores every named parameter array plus the learner kind in
the shared container format, so ``load(save(state))`` reproduces the state
bit for bit.  Corrupt files, unsupported format versions and a learner-kind
mismatch raise three distinct error types.
"""

from __future__ import annotations

from pathlib import Path

from .autodiff import Tensor
from .containers import ContainerFormatError, ContainerVersionError, load_arrays, save_arrays
from .learners import KINDS, PromptState

__all__ = [
    "CheckpointError",
    "CorruptCheckpointError",
    "CheckpointVersionError",
    "LearnerKindMismatchError",
    "save_checkpoint",
    "load_checkpoint",
]


class CheckpointError(Exception):
    """Common base for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """The file is unreadable or structurally malformed."""


class CheckpointVersionError(CheckpointError):
    """The file was written with an unsupported format version."""


class LearnerKindMismatchError(CheckpointError):
    """The stored learner kind differs from the kind the caller expected."""


def save_checkpoint(path: str | Path, state: PromptState) -> None:
    """Write a learner state to ``path``; parent directories are created."""
    save_arrays(path, state.values(), {"learner_kind": state.kind})


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> PromptState:
    """Read a learner state back, optionally enforcing its kind.

    Parameters are restored as trainable tensors, so a loaded state can be
    evaluated or trained further interchangeably with a fresh one.
    """
    try:
        arrays, payload = load_arrays(path)
    except ContainerVersionError as exc:
        raise CheckpointVersionError(str(exc)) from exc
    except ContainerFormatError as exc:
        raise CorruptCheckpointError(str(exc)) from exc
    kind = payload.get("learner_kind")
    if kind not in KINDS:
        raise CorruptCheckpointError(f"{path}: header names unknown learner kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise LearnerKindMismatchError(
            f"{path}: checkpoint holds a {kind!r} learner, expected {expected_kind!r}"
        )
    if not arrays:
        raise CorruptCheckpointError(f"{path}: checkpoint holds no parameter arrays")
    params = {name: Tensor(arr, requires_grad=kind != "zero_shot") for name, arr in arrays.items()}
    return PromptState(kind=kind, params=params)
