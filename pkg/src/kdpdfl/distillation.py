"""Distillation-based model similarity measured on the star node's own data.

The "Wasserstein" distance here is what the algorithm actually computes: the
batch mean of squared Euclidean distances between per-sample output
distributions. It is not an optimal-transport distance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nn import Batch, ParamVector, predict_logits, softmax


@dataclass
class DistillationProbe:
    batch: Batch
    layer: str = "output"
    # compare raw logits instead of softmax rows
    raw_logits: bool = False

    def __post_init__(self):
        if len(self.batch) == 0:
            raise ValueError("probe batch must be nonempty")
        if self.layer != "output":
            raise ValueError(f"unsupported probe layer {self.layer!r}")


@dataclass
class DistanceVector:
    owner: int
    entries: dict[int, float] = field(default_factory=dict)


def make_probe(train: Batch, size: int, rng: np.random.Generator, raw_logits: bool = False) -> DistillationProbe:
    """Draw ``min(len(train), size)`` rows without replacement."""
    n = len(train)
    idx = np.sort(rng.choice(n, size=min(n, size), replace=False))
    return DistillationProbe(Batch(train.features[idx], train.labels[idx]), raw_logits=raw_logits)


def _outputs(model: ParamVector, probe: DistillationProbe) -> np.ndarray:
    logits = predict_logits(model, probe.batch.features)
    return logits if probe.raw_logits else softmax(logits)


def mid_getter(model_i: ParamVector, model_j: ParamVector, probe: DistillationProbe):
    """Outputs ``(z_i@i, z_j@i)`` of both models on the star's probe batch (eval mode)."""
    if model_i.arch.output_dim != model_j.arch.output_dim:
        raise ValueError("models disagree on output dimension")
    return _outputs(model_i, probe), _outputs(model_j, probe)


def wasserstein2d(z_i: np.ndarray, z_j: np.ndarray) -> float:
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_i.shape != z_j.shape or z_i.ndim != 2:
        raise ValueError(f"shape mismatch: {z_i.shape} vs {z_j.shape}")
    diff = z_i - z_j
    return float(np.einsum("xl,xl->", diff, diff) / z_i.shape[0])


def distance_vector(
    star: int,
    neighbor_models: Mapping[int, ParamVector],
    own_model: ParamVector,
    probe: DistillationProbe,
) -> DistanceVector:
    if not neighbor_models:
        raise ValueError("neighbor set is empty")
    own_out = _outputs(own_model, probe)
    out = DistanceVector(star)
    for j in sorted(neighbor_models):
        try:
            z_j = _outputs(neighbor_models[j], probe)
            out.entries[j] = wasserstein2d(own_out, z_j)
        except (ValueError, ArithmeticError) as exc:
            raise type(exc)(f"peer {j}: {exc}") from exc
    return out
