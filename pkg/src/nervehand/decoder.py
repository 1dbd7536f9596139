"""Ensemble of 1-5 decoders merged into one per-finger prediction."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ModelParams, forward, load_checkpoint

N_FINGERS = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleMember:
    params: ModelParams
    finger_mask: tuple

    @classmethod
    def from_checkpoint(cls, path, finger_mask=None) -> "EnsembleMember":
        params = load_checkpoint(path)
        mask = params.config.finger_mask if finger_mask is None else finger_mask
        return cls(params, tuple(bool(b) for b in mask))


@dataclass
class EnsembleConfig:
    members: list
    threshold: float = 0.5

    def __post_init__(self):
        if not 1 <= len(self.members) <= N_FINGERS:
            raise ConfigError(f"an ensemble holds 1-{N_FINGERS} models, got {len(self.members)}")
        owners = np.zeros(N_FINGERS, dtype=int)
        for m in self.members:
            if len(m.finger_mask) != N_FINGERS:
                raise ConfigError("finger masks need 5 entries")
            owners += np.array(m.finger_mask, dtype=int)
        if np.any(owners == 0):
            raise ConfigError(f"fingers {np.flatnonzero(owners == 0).tolist()} have no owning model")
        if np.any(owners > 1):
            raise ConfigError(f"fingers {np.flatnonzero(owners > 1).tolist()} are owned by several models")
        scales = [m.params.meta.get("channel_scale") for m in self.members]
        if any(s != scales[0] for s in scales[1:]):
            raise ConfigError("all models must share the same feature pre-processing")

    @property
    def channel_scale(self):
        s = self.members[0].params.meta.get("channel_scale")
        return None if s is None else np.asarray(s, dtype=float)

    def owner_of(self) -> list[int]:
        return [next(i for i, m in enumerate(self.members) if m.finger_mask[f]) for f in range(N_FINGERS)]


def split_masks(model_count: int) -> list[tuple]:
    """Contiguous finger groups for ``model_count`` models, e.g. 2 -> 11100 / 00011."""
    groups = np.array_split(np.arange(N_FINGERS), model_count)
    return [tuple(bool(f in g) for f in range(N_FINGERS)) for g in groups]


@dataclass(frozen=True, eq=False)
class Prediction:
    probs: np.ndarray
    states: np.ndarray
    newest_sample_timestamp_ns: int
    produced_timestamp_ns: int
    inference_ns: int = 0

    @property
    def lag_ns(self) -> int:
        return self.produced_timestamp_ns - self.newest_sample_timestamp_ns

    def csv_row(self) -> str:
        p = ",".join(f"{x:.6f}" for x in self.probs)
        s = ",".join(str(int(x)) for x in self.states)
        return f"{self.produced_timestamp_ns},{p},{s},{self.lag_ns / 1e6:.3f}"


PREDICTION_CSV_HEADER = "t_ns,p1,p2,p3,p4,p5,s1,s2,s3,s4,s5,latency_ms"


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(probs) > threshold


def merge(outputs: Sequence[np.ndarray], members: Sequence[EnsembleMember]) -> np.ndarray:
    probs = np.zeros(N_FINGERS)
    for out, m in zip(outputs, members):
        mask = np.array(m.finger_mask)
        probs[mask] = np.asarray(out)[mask]
    return probs


class Ensemble:
    """Runs every member on a window and merges owned outputs.

    ``work_hook(n_models, started_ns)`` lets the pipeline stretch the tick to an
    emulated compute budget; it returns the produced timestamp.
    """

    def __init__(self, config: EnsembleConfig, clock: Callable[[], int] = time.monotonic_ns):
        self.config = config
        self.clock = clock

    def __len__(self):
        return len(self.config.members)

    def evaluate(self, window: np.ndarray) -> np.ndarray:
        outs = [forward(m.params, window) for m in self.config.members]
        return merge(outs, self.config.members)

    def infer_tick(self, window, newest_sample_ns: int | None = None, work_hook=None) -> Prediction:
        mat = window.matrix() if hasattr(window, "matrix") else np.asarray(window)
        if newest_sample_ns is None:
            newest_sample_ns = getattr(window, "newest_timestamp_ns", 0)
        started = self.clock()
        probs = self.evaluate(mat)
        produced = work_hook(len(self), started) if work_hook else self.clock()
        produced = max(produced, newest_sample_ns)
        return Prediction(probs, binarize(probs, self.config.threshold), newest_sample_ns,
                          produced, produced - started)


def infer_tick(config: EnsembleConfig, window, clock=time.monotonic_ns) -> Prediction:
    return Ensemble(config, clock).infer_tick(window)
