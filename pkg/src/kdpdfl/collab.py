"""Per-client collaboration state: connectivity vector, footprints, confidence, mixing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distillation import DistanceVector
from .nn import ParamVector, combine

STEP_MODES = ("literal_elementwise", "normalized_scalar")


@dataclass
class RegularizerConfig:
    mu1: float = 1.0
    mu2: float = 0.1
    epsilon: float = 1e-8
    step_mode: str = "normalized_scalar"
    eta_w: float = 0.1

    def __post_init__(self):
        if self.mu1 < 0 or self.mu2 < 0:
            raise ValueError("mu1 and mu2 must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}")
        if self.eta_w <= 0:
            raise ValueError("eta_w must be positive")


@dataclass
class ConnectivityVector:
    owner: int
    weights: np.ndarray

    @classmethod
    def initial(cls, owner: int, M: int) -> "ConnectivityVector":
        w = np.full(M, 1.0 / M)
        w[owner] = 0.0
        return cls(owner, w)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0):
            raise ValueError("connectivity weights must be nonnegative")


@dataclass
class Footprint:
    model: ParamVector
    received_at: int


@dataclass
class FootprintCache:
    owner: int
    entries: dict[int, Footprint] = field(default_factory=dict)

    def store(self, peer: int, model: ParamVector, t: int) -> None:
        if peer == self.owner:
            raise ValueError("a client does not cache its own model")
        self.entries[peer] = Footprint(model.copy(), t)

    def fresh(self, t: int, horizon: int | None) -> dict[int, Footprint]:
        """Entries received at most ``horizon`` iterations before ``t`` (None: all)."""
        if horizon is None:
            return dict(self.entries)
        return {j: f for j, f in self.entries.items() if t - f.received_at <= horizon}


def reg_grad(w: ConnectivityVector, epsilon: float = 1e-8) -> np.ndarray:
    """Gradient of ``-log(sum_{j != i} w_ij + eps)``."""
    mask = np.ones(w.weights.size, dtype=bool)
    mask[w.owner] = False
    total = w.weights[mask].sum()
    g = np.zeros_like(w.weights)
    g[mask] = -1.0 / (total + epsilon)
    return g


def conn_vector_update(w: ConnectivityVector, d: DistanceVector, cfg: RegularizerConfig) -> ConnectivityVector:
    """Projected descent step on the neighbors' coordinates of ``w``."""
    if d.owner != w.owner:
        raise ValueError(f"distance vector of client {d.owner} applied to client {w.owner}")
    new = w.weights.copy()
    if not d.entries:
        return ConnectivityVector(w.owner, new)
    peers = np.array(sorted(d.entries))
    if np.any(peers == w.owner):
        raise ValueError("distance vector must not contain the owner")
    dist = np.array([d.entries[j] for j in peers])
    grad = cfg.mu1 * dist + cfg.mu2 * reg_grad(w, cfg.epsilon)[peers]
    if cfg.step_mode == "literal_elementwise":
        eta = 1.0 / (np.abs(grad) + cfg.epsilon)
    else:
        eta = cfg.eta_w / (np.abs(grad).max() + cfg.epsilon)
    new[peers] = np.maximum(0.0, new[peers] - eta * grad)
    return ConnectivityVector(w.owner, new)


def confidence(n_train: int, n_neighbors: int, c_base: float) -> float:
    if c_base <= 0:
        raise ValueError("c_base must be positive")
    if n_neighbors < 0:
        raise ValueError("n_neighbors must be nonnegative")
    return min(n_train / c_base, 1.0 / (n_neighbors + 1))


def mixing_weights(w: ConnectivityVector, peers, conf: float) -> dict[int, float]:
    """Normalized mixing vector ``{client: weight}`` including the owner.

    The owner keeps ``conf`` and the peers share ``1 - conf`` in proportion to
    their connectivity weights. Without any peer mass the owner keeps it all.
    """
    if not 0 <= conf <= 1:
        raise ValueError(f"confidence {conf} outside [0, 1]")
    peers = sorted(peers)
    raw = np.array([w.weights[j] for j in peers], dtype=np.float64)
    total = raw.sum()
    if total <= 0:
        if conf <= 0:
            raise ValueError("no mixing mass: zero confidence and no weighted peers")
        return {w.owner: 1.0}
    out = {w.owner: conf}
    share = (1.0 - conf) * raw / total
    out.update({j: float(s) for j, s in zip(peers, share)})
    return out


def mix_models(
    own: ParamVector,
    w: ConnectivityVector,
    cache: FootprintCache | dict,
    conf: float,
) -> tuple[ParamVector, dict[int, float]]:
    """Personalized aggregate of the owner's model and its cached footprints."""
    entries = cache.entries if isinstance(cache, FootprintCache) else cache
    weights = mixing_weights(w, entries.keys(), conf)
    if set(weights) == {w.owner}:
        return own.copy(), weights
    terms = []
    for j, a in sorted(weights.items()):
        if a == 0:
            continue
        terms.append((a, own if j == w.owner else entries[j].model))
    return combine(terms), weights
