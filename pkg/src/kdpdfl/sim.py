"""Discrete-time simulation of the star-node exchange protocol and its baselines.

Every iteration ``t`` in ``1..T`` runs exactly one phase:

* ``t % T_ex == 0``: exchange. A random star collects its neighbors' models,
  measures distillation distances, updates its connectivity vector and mixes.
* ``t % T_ex == 1``: broadcast. The previous star sends its model to the
  neighbors it collected from.
* otherwise: every client takes one local SGD step.

Randomness is split into independent streams (star choice, channel, probe
batches, packet loss, one per client for minibatches) so that methods which
consume different amounts of randomness still see the same schedule.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .collab import (
    ConnectivityVector,
    FootprintCache,
    RegularizerConfig,
    confidence,
    conn_vector_update,
    mix_models,
)
from .data import ClientData
from .distillation import distance_vector, make_probe
from .nn import Architecture, Batch, ParamVector, combine, forward, init_model, train_step

log = logging.getLogger(__name__)

PAYLOAD_MODEL = "model_parameters"
BROADCAST_RULES = ("overwrite", "blend")
STAR_SELECTION = ("uniform", "rotation")
SPLITS = ("validation", "test")


class SimulationError(RuntimeError):
    """A failure inside the simulation loop, tagged with where it happened."""


@dataclass
class ChannelModel:
    """Rayleigh block fading: a peer is reachable when its power gain >= threshold."""

    threshold: float
    max_neighbors: int | None = None
    fading: str = "rayleigh"

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.max_neighbors is not None and self.max_neighbors < 0:
            raise ValueError("max_neighbors must be >= 0")
        if self.fading != "rayleigh":
            raise ValueError(f"unsupported fading model {self.fading!r}")

    @classmethod
    def calibrated(cls, M: int, target_mean: float = 5.0, max_neighbors: int | None = None):
        return cls(calibrate_threshold(M, target_mean), max_neighbors)


def calibrate_threshold(M: int, target_mean: float) -> float:
    """Threshold giving ``target_mean`` expected neighbors before capping.

    Squared Rayleigh amplitude is Exp(1), so ``P(gain >= tau) = exp(-tau)``.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    if target_mean <= 0:
        return math.inf
    if target_mean >= M - 1:
        return 0.0
    return math.log((M - 1) / target_mean)


def sample_neighbors(channel: ChannelModel, star: int, M: int, rng: np.random.Generator) -> list[int]:
    """Sorted list of peers reachable from ``star`` in this slot (may be empty)."""
    if M < 2:
        raise ValueError("M must be >= 2")
    peers = np.array([j for j in range(M) if j != star])
    gains = rng.exponential(1.0, size=peers.size)
    ok = gains >= channel.threshold
    peers, gains = peers[ok], gains[ok]
    k = channel.max_neighbors
    if k is not None and peers.size > k:
        keep = np.argsort(-gains, kind="stable")[:k]
        peers = peers[keep]
    return sorted(int(j) for j in peers)


def phase_of(t: int, T_ex: int) -> str:
    if t % T_ex == 0:
        return "exchange"
    if t % T_ex == 1:
        return "broadcast"
    return "local"


@dataclass
class SimConfig:
    T: int = 2000
    T_ex: int = 5
    local_lr: float = 0.05
    batch_size: int = 32
    probe_batch_size: int = 32
    raw_logits: bool = False
    c_base: float | None = None
    broadcast_rule: str = "overwrite"
    staleness_horizon: int | None = 0
    star_selection: str = "uniform"
    packet_loss: float = 0.0
    force_equal_confidence: bool = False
    # fedavg_plus
    t_switch: int | None = None
    reptile_beta: float = 0.5
    reptile_inner_steps: int = 10

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.T_ex < 2:
            raise ValueError("T_ex must be >= 2: exchange (t%T_ex==0) and broadcast (t%T_ex==1) would collide")
        if self.local_lr <= 0:
            raise ValueError("local_lr must be positive")
        if self.batch_size < 1 or self.probe_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.c_base is not None and self.c_base <= 0:
            raise ValueError("c_base must be positive")
        if self.broadcast_rule not in BROADCAST_RULES:
            raise ValueError(f"broadcast_rule must be one of {BROADCAST_RULES}")
        if self.star_selection not in STAR_SELECTION:
            raise ValueError(f"star_selection must be one of {STAR_SELECTION}")
        if self.staleness_horizon is not None and self.staleness_horizon < 0:
            raise ValueError("staleness_horizon must be >= 0")
        if not 0 <= self.packet_loss < 1:
            raise ValueError("packet_loss must be in [0, 1)")
        if not 0 < self.reptile_beta <= 1:
            raise ValueError("reptile_beta must be in (0, 1]")
        if self.reptile_inner_steps < 1:
            raise ValueError("reptile_inner_steps must be >= 1")


@dataclass
class ClientRuntime:
    id: int
    data: ClientData
    model: ParamVector
    collab: ConnectivityVector
    cache: FootprintCache
    rng: np.random.Generator
    last_confidence: float | None = None

    @property
    def n_train(self) -> int:
        return len(self.data.train)

    def next_batch(self, size: int) -> Batch:
        n = self.n_train
        idx = self.rng.choice(n, size=min(size, n), replace=False)
        return Batch(self.data.train.features[idx], self.data.train.labels[idx])


@dataclass
class ExchangeEvent:
    t: int
    star: int
    neighbors: list[int]
    received: list[int]
    distances: dict[int, float]
    confidence: float
    mixing: dict[int, float]


@dataclass
class MetricsRecord:
    t: int
    client_id: int
    split: str
    loss: float
    accuracy: float


@dataclass
class SimResult:
    metrics: list[MetricsRecord]
    final_models: list[ParamVector]
    final_W: np.ndarray | None
    schedule_log: list[ExchangeEvent]
    message_log: list[dict] = field(default_factory=list)
    broadcast_times: list[int] = field(default_factory=list)

    def final_accuracy(self, split: str = "test") -> np.ndarray:
        t_last = max(r.t for r in self.metrics)
        rows = sorted((r.client_id, r.accuracy) for r in self.metrics if r.t == t_last and r.split == split)
        return np.array([a for _, a in rows])


def client_seed(master_seed: int, cid: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, 1, cid])


def build_clients(
    client_data: list[ClientData],
    arch: Architecture,
    master_seed: int,
    shared_init: bool = True,
) -> list[ClientRuntime]:
    """Fresh runtimes with uniform 1/M connectivity and per-client minibatch streams.

    ``shared_init`` starts every client from the same random draw; otherwise
    each client gets its own init seed.
    """
    M = len(client_data)
    out = []
    for cd in client_data:
        cid = cd.client_id
        key = [master_seed, 2] if shared_init else [master_seed, 2, cid]
        init_seed = int(np.random.SeedSequence(key).generate_state(1)[0])
        out.append(
            ClientRuntime(
                id=cid,
                data=cd,
                model=init_model(arch, init_seed),
                collab=ConnectivityVector.initial(cid, M),
                cache=FootprintCache(cid),
                rng=np.random.default_rng(client_seed(master_seed, cid)),
            )
        )
    return out


def evaluate(clients: list[ClientRuntime], split: str = "test") -> list[tuple[float, float]]:
    """Per-client ``(accuracy, loss)`` on one local split, eval mode."""
    out = []
    for c in clients:
        ds = getattr(c.data, split)
        if len(ds) == 0:
            out.append((math.nan, math.nan))
            continue
        logits, loss = forward(c.model, ds.as_batch(), train_mode=False)
        acc = float(np.mean(logits.argmax(axis=1) == ds.labels))
        out.append((acc, loss))
    return out


class _Engine:
    """Shared loop; ``method`` selects the exchange rule."""

    def __init__(self, clients, cfg: SimConfig, channel: ChannelModel, reg: RegularizerConfig | None,
                 method: str, master_seed: int):
        if len(clients) < 2:
            raise ValueError("need at least two clients")
        arch = clients[0].model.arch
        if any(c.model.arch != arch for c in clients):
            raise ValueError("all clients must share one architecture")
        self.clients = clients
        self.cfg = cfg
        self.channel = channel
        self.reg = reg
        self.method = method
        self.M = len(clients)
        streams = [np.random.default_rng(np.random.SeedSequence([master_seed, 0, k])) for k in range(4)]
        self.star_rng, self.channel_rng, self.probe_rng, self.loss_rng = streams
        self.c_base = cfg.c_base if cfg.c_base is not None else 4.0 * np.mean([c.n_train for c in clients])
        self.metrics: list[MetricsRecord] = []
        self.events: list[ExchangeEvent] = []
        self.messages: list[dict] = []
        self.broadcast_times: list[int] = []
        self.pending: tuple[int, list[int]] | None = None
        self._rotation: list[int] = []
        self.active: int | None = None
        self.anchors = None

    # -- helpers ---------------------------------------------------------
    def _send(self, t, src, dst) -> bool:
        if self.cfg.packet_loss and self.loss_rng.random() < self.cfg.packet_loss:
            return False
        self.messages.append({"t": t, "from": src, "to": dst, "payload_kind": PAYLOAD_MODEL})
        return True

    def _pick_star(self) -> int:
        if self.cfg.star_selection == "uniform":
            return int(self.star_rng.integers(self.M))
        if not self._rotation:
            self._rotation = list(self.star_rng.permutation(self.M))
        return int(self._rotation.pop(0))

    def record(self, t):
        self.active = None
        for split in SPLITS:
            for c, (acc, loss) in zip(self.clients, evaluate(self.clients, split)):
                self.metrics.append(MetricsRecord(t, c.id, split, loss, acc))

    # -- phases ----------------------------------------------------------
    def exchange(self, t):
        star_id = self._pick_star()
        self.active = star_id
        star = self.clients[star_id]
        nbrs = sample_neighbors(self.channel, star_id, self.M, self.channel_rng)
        received = []
        for j in nbrs:
            if self._send(t, j, star_id):
                star.cache.store(j, self.clients[j].model, t)
                received.append(j)

        distances = {}
        if self.method == "kd_pdfl":
            if received:
                probe = make_probe(star.data.train.as_batch(), self.cfg.probe_batch_size,
                                   self.probe_rng, raw_logits=self.cfg.raw_logits)
                d = distance_vector(star_id, {j: star.cache.entries[j].model for j in received},
                                    star.model, probe)
                distances = d.entries
                star.collab = conn_vector_update(star.collab, d, self.reg)
            footprints = star.cache.fresh(t, self.cfg.staleness_horizon)
            collab = star.collab
        else:
            footprints = {j: star.cache.entries[j] for j in received}
            collab = ConnectivityVector(star_id, np.where(np.arange(self.M) == star_id, 0.0, 1.0))

        if self.method == "kd_pdfl" and not self.cfg.force_equal_confidence:
            conf = confidence(star.n_train, len(received), self.c_base)
        else:
            conf = 1.0 / (len(received) + 1)
        star.model, mixing = mix_models(star.model, collab, footprints, conf)
        star.last_confidence = conf
        self.events.append(ExchangeEvent(t, star_id, nbrs, received, distances, conf, mixing))
        self.pending = (star_id, nbrs)

    def broadcast(self, t):
        if self.pending is None:
            return
        star_id, nbrs = self.pending
        self.active = star_id
        self.pending = None
        self.broadcast_times.append(t)
        src = self.clients[star_id].model
        for j in nbrs:
            if not self._send(t, star_id, j):
                continue
            rcv = self.clients[j]
            if self.cfg.broadcast_rule == "overwrite":
                rcv.model = src.copy()
            else:
                c_j = confidence(rcv.n_train, 1, self.c_base)
                rcv.model = combine([(1.0 - c_j, src), (c_j, rcv.model)])

    def local(self, t):
        for c in self.clients:
            self.active = c.id
            c.model, _ = train_step(c.model, c.next_batch(self.cfg.batch_size), self.cfg.local_lr)

    def reptile(self, t):
        # t > t_switch: local fine-tuning with periodic outer interpolation
        self.local(t)
        if (t - self.cfg.t_switch) % self.cfg.reptile_inner_steps == 0:
            beta = self.cfg.reptile_beta
            for c, anchor in zip(self.clients, self.anchors):
                c.model = combine([(1.0 - beta, anchor), (beta, c.model)])
            self.anchors = [c.model.copy() for c in self.clients]

    # -- loop --------------------------------------------------------------
    def run(self) -> SimResult:
        cfg = self.cfg
        for t in range(0, cfg.T + 1):
            phase = "evaluate" if t == 0 else phase_of(t, cfg.T_ex)
            self.active = None
            try:
                if t == 0:
                    self.record(0)
                    continue
                if self.method == "local_only":
                    phase = "local"
                    self.local(t)
                elif self.method == "fedavg_plus" and t > cfg.t_switch:
                    phase = "finetune"
                    if self.anchors is None:
                        self.anchors = [c.model.copy() for c in self.clients]
                    self.reptile(t)
                elif phase == "exchange":
                    self.exchange(t)
                elif phase == "broadcast":
                    self.broadcast(t)
                else:
                    self.local(t)
                if t % cfg.T_ex == 0 or t == cfg.T:
                    phase = "evaluate"
                    self.record(t)
            except (ValueError, ArithmeticError) as exc:
                raise SimulationError(
                    f"t={t} phase={phase} client={self.active} method={self.method}: {exc}"
                ) from exc
        final_W = None
        if self.method == "kd_pdfl":
            final_W = np.vstack([c.collab.weights for c in self.clients])
            for c in self.clients:
                conf = c.last_confidence
                if conf is None:
                    conf = confidence(c.n_train, 0, self.c_base)
                final_W[c.id, c.id] = conf
        return SimResult(
            metrics=self.metrics,
            final_models=[c.model.copy() for c in self.clients],
            final_W=final_W,
            schedule_log=self.events,
            message_log=self.messages,
            broadcast_times=self.broadcast_times,
        )


def run_kd_pdfl(clients, cfg: SimConfig, channel: ChannelModel, reg: RegularizerConfig,
                master_seed: int = 0) -> SimResult:
    """Run the distillation-weighted personalized protocol; mutates ``clients``."""
    return _Engine(clients, cfg, channel, reg, "kd_pdfl", master_seed).run()


def run_baseline(clients, cfg: SimConfig, channel: ChannelModel, variant: str,
                 master_seed: int = 0) -> SimResult:
    """``local_only``, ``fedavg`` or ``fedavg_plus`` (FedAvg then Reptile fine-tuning)."""
    if variant not in ("local_only", "fedavg", "fedavg_plus"):
        raise ValueError(f"unknown baseline {variant!r}")
    if variant == "fedavg_plus":
        if cfg.t_switch is None or not 0 <= cfg.t_switch < cfg.T:
            raise ValueError("fedavg_plus needs 0 <= t_switch < T")
    return _Engine(clients, cfg, channel, None, variant, master_seed).run()
