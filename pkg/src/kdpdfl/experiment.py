"""Config-driven experiment runs, parameter sweeps and per-client accuracy summaries.

A run directory looks like::

    effective_config.json
    summary.json / summary.txt
    repeat_<r>/metrics.csv        t,client_id,split,loss,accuracy
    repeat_<r>/W.csv              kd_pdfl only
    repeat_<r>/partition.json     client id -> pool indices per split
    repeat_<r>/messages.jsonl     one record per transmitted model
    repeat_<r>/exchanges.jsonl    star, neighbors, distances, mixing vector
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .collab import STEP_MODES, RegularizerConfig
from .data import PartitionSpec, dirichlet_partition, generate_synthetic, load_csv, partition_manifest
from .nn import Architecture
from .sim import (
    BROADCAST_RULES,
    STAR_SELECTION,
    ChannelModel,
    SimConfig,
    SimResult,
    build_clients,
    run_baseline,
    run_kd_pdfl,
)

log = logging.getLogger(__name__)

METHODS = ("kd_pdfl", "local_only", "fedavg", "fedavg_plus")
SWEEP_AXES = ("neighbor_cap", "mu_grid")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    n_classes: int = 9
    n_features: int = 20
    n_clusters: int = 2
    samples_per_class: int = 600
    class_std: float = 1.5
    center_scale: float = 3.0
    cluster_angle: float = 1.0
    modes_per_class: int = 6
    csv_path: str | None = None
    label_column: str = "label"
    normalize: bool = True


@dataclass
class PartitionConfig:
    dirichlet_alpha: float = 0.1
    min_train: int = 15
    max_train: int = 100
    test_per_client: int = 100
    validation_fraction: float = 0.2


@dataclass
class ModelConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [32])
    use_batchnorm: bool = True


@dataclass
class RegularizerSection:
    mu1: float = 1.0
    mu2: float = 0.1
    epsilon: float = 1e-8
    step_mode: str = "normalized_scalar"
    eta_w: float = 0.1


@dataclass
class ChannelConfig:
    target_mean_neighbors: float = 5.0
    max_neighbors: int | None = None
    packet_loss: float = 0.0


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    M: int = 10
    model: ModelConfig = field(default_factory=ModelConfig)
    T: int = 2000
    T_ex: int = 5
    local_lr: float = 0.05
    batch_size: int = 32
    probe_batch_size: int = 32
    raw_logits: bool = False
    regularizer: RegularizerSection = field(default_factory=RegularizerSection)
    c_base: float | None = None
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    method: str = "kd_pdfl"
    t_switch: int | None = None
    reptile_beta: float = 0.5
    reptile_inner_steps: int = 10
    broadcast_rule: str = "overwrite"
    staleness_horizon: int | None = 0
    star_selection: str = "uniform"
    force_equal_confidence: bool = False
    n_repeats: int = 3
    master_seed: int = 0
    output_dir: str = "runs/experiment"

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(out, k, v)
        return out

    # pieces handed to the simulator
    def architecture(self, n_features: int, n_classes: int) -> Architecture:
        return Architecture(n_features, self.model.hidden_dims, n_classes, self.model.use_batchnorm)

    def sim_config(self) -> SimConfig:
        t_switch = self.t_switch
        if t_switch is None and self.method == "fedavg_plus":
            t_switch = (3 * self.T) // 4
        return SimConfig(
            T=self.T, T_ex=self.T_ex, local_lr=self.local_lr, batch_size=self.batch_size,
            probe_batch_size=self.probe_batch_size, raw_logits=self.raw_logits, c_base=self.c_base,
            broadcast_rule=self.broadcast_rule, staleness_horizon=self.staleness_horizon,
            star_selection=self.star_selection, packet_loss=self.channel.packet_loss,
            force_equal_confidence=self.force_equal_confidence, t_switch=t_switch,
            reptile_beta=self.reptile_beta, reptile_inner_steps=self.reptile_inner_steps,
        )

    def regularizer_config(self) -> RegularizerConfig:
        return RegularizerConfig(**asdict(self.regularizer))

    def channel_model(self) -> ChannelModel:
        return ChannelModel.calibrated(self.M, self.channel.target_mean_neighbors, self.channel.max_neighbors)


# -- parsing ---------------------------------------------------------------

def _check_type(value, hint, key):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _check_type(value, inner, key)
    if origin is list:
        (inner,) = typing.get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        return [_check_type(v, inner, f"{key}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, key)
    raise ConfigError(f"{key}: unsupported type {hint}")


def _build(cls, raw, prefix=""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + '.' + k if prefix else k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        key = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _check_type(value, hints[name], key)
    return cls(**kwargs)


def _require(cond, key, msg):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    d, p, r, ch = cfg.data, cfg.partition, cfg.regularizer, cfg.channel
    _require(d.source in ("synthetic", "csv"), "data.source", "must be 'synthetic' or 'csv'")
    if d.source == "csv":
        _require(d.csv_path is not None, "data.csv_path", "required when data.source is 'csv'")
    else:
        _require(d.n_classes >= 2, "data.n_classes", "must be >= 2")
        _require(d.n_features >= 1, "data.n_features", "must be >= 1")
        _require(1 <= d.n_clusters <= d.n_classes, "data.n_clusters", "must be in [1, n_classes]")
        _require(d.samples_per_class >= 1, "data.samples_per_class", "must be >= 1")
        _require(d.class_std > 0, "data.class_std", "must be > 0")
        _require(d.center_scale > 0, "data.center_scale", "must be > 0")
        _require(d.modes_per_class >= 1, "data.modes_per_class", "must be >= 1")
    _require(p.dirichlet_alpha > 0, "partition.dirichlet_alpha", "must be > 0")
    _require(1 <= p.min_train <= p.max_train, "partition.min_train", "need 1 <= min_train <= max_train")
    _require(p.test_per_client >= 1, "partition.test_per_client", "must be >= 1")
    _require(0 <= p.validation_fraction < 1, "partition.validation_fraction", "must be in [0, 1)")
    _require(cfg.M >= 2, "M", "must be >= 2")
    _require(all(h >= 1 for h in cfg.model.hidden_dims), "model.hidden_dims", "widths must be >= 1")
    _require(cfg.T >= 1, "T", "must be >= 1")
    _require(cfg.T_ex >= 2, "T_ex", "must be >= 2 (exchange at t%T_ex==0 and broadcast at t%T_ex==1 would collide)")
    _require(cfg.local_lr > 0, "local_lr", "must be > 0")
    _require(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    _require(cfg.probe_batch_size >= 1, "probe_batch_size", "must be >= 1")
    _require(r.mu1 >= 0, "regularizer.mu1", "must be >= 0")
    _require(r.mu2 >= 0, "regularizer.mu2", "must be >= 0")
    _require(r.epsilon > 0, "regularizer.epsilon", "must be > 0")
    _require(r.step_mode in STEP_MODES, "regularizer.step_mode", f"must be one of {STEP_MODES}")
    _require(r.eta_w > 0, "regularizer.eta_w", "must be > 0")
    _require(cfg.c_base is None or cfg.c_base > 0, "c_base", "must be > 0")
    _require(ch.target_mean_neighbors >= 0, "channel.target_mean_neighbors", "must be >= 0")
    _require(ch.max_neighbors is None or ch.max_neighbors >= 0, "channel.max_neighbors", "must be >= 0")
    _require(0 <= ch.packet_loss < 1, "channel.packet_loss", "must be in [0, 1)")
    _require(cfg.method in METHODS, "method", f"must be one of {METHODS}")
    if cfg.t_switch is not None:
        _require(0 <= cfg.t_switch < cfg.T, "t_switch", "must satisfy 0 <= t_switch < T")
    _require(0 < cfg.reptile_beta <= 1, "reptile_beta", "must be in (0, 1]")
    _require(cfg.reptile_inner_steps >= 1, "reptile_inner_steps", "must be >= 1")
    _require(cfg.broadcast_rule in BROADCAST_RULES, "broadcast_rule", f"must be one of {BROADCAST_RULES}")
    _require(cfg.staleness_horizon is None or cfg.staleness_horizon >= 0, "staleness_horizon", "must be >= 0")
    _require(cfg.star_selection in STAR_SELECTION, "star_selection", f"must be one of {STAR_SELECTION}")
    _require(cfg.n_repeats >= 1, "n_repeats", "must be >= 1")
    return cfg


def config_from_dict(raw: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, raw))


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(raw)


# -- artifact writing --------------------------------------------------------

def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def metrics_csv(result: SimResult) -> str:
    return _csv_text(
        ["t", "client_id", "split", "loss", "accuracy"],
        [(r.t, r.client_id, r.split, repr(float(r.loss)), repr(float(r.accuracy))) for r in result.metrics],
    )


def w_csv(W: np.ndarray) -> str:
    M = W.shape[0]
    head = "# row i = connectivity weights of client i; diagonal = client i's confidence at snapshot time\r\n"
    return head + _csv_text([f"w{j}" for j in range(M)], [[repr(float(v)) for v in row] for row in W])


def read_w_csv(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return np.array([[float(v) for v in row] for row in list(csv.reader(lines))[1:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"t": int(r["t"]), "client_id": int(r["client_id"]), "split": r["split"],
             "loss": float(r["loss"]), "accuracy": float(r["accuracy"])}
            for r in csv.DictReader(fh)
        ]


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


# -- running -----------------------------------------------------------------

def _seed(master_seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([master_seed, *path]).generate_state(1)[0])


def build_repeat(cfg: ExperimentConfig, repeat: int):
    """Data pool, client partition and cluster-of-class map for one repeat."""
    d = cfg.data
    cluster_of_class = None
    if d.source == "synthetic":
        pool, cluster_of_class = generate_synthetic(
            d.n_classes, d.n_features, d.n_clusters, d.samples_per_class,
            seed=_seed(cfg.master_seed, 10, repeat), class_std=d.class_std,
            center_scale=d.center_scale, cluster_angle=d.cluster_angle,
            modes_per_class=d.modes_per_class,
        )
    else:
        pool, _ = load_csv(d.csv_path, d.label_column, d.normalize)
    p = cfg.partition
    spec = PartitionSpec(cfg.M, p.dirichlet_alpha, p.min_train, p.max_train, p.test_per_client,
                         p.validation_fraction, seed=_seed(cfg.master_seed, 11, repeat))
    return pool, dirichlet_partition(pool, spec), cluster_of_class


def client_clusters(clients, cluster_of_class) -> np.ndarray:
    """Cluster holding the largest share of each client's training labels."""
    n_clusters = int(cluster_of_class.max()) + 1
    out = []
    for c in clients:
        labels = np.concatenate([c.train.labels, c.validation.labels])
        out.append(int(np.argmax(np.bincount(cluster_of_class[labels], minlength=n_clusters))))
    return np.array(out)


def block_weights(W: np.ndarray, clusters: np.ndarray) -> tuple[float, float]:
    """Mean off-diagonal weight within and across client clusters."""
    same = clusters[:, None] == clusters[None, :]
    off = ~np.eye(W.shape[0], dtype=bool)
    within = W[same & off]
    cross = W[~same]
    return (float(within.mean()) if within.size else float("nan"),
            float(cross.mean()) if cross.size else float("nan"))


def simulate(cfg: ExperimentConfig, repeat: int = 0):
    """Run one repeat in memory; returns ``(SimResult, clients, cluster_of_class)``."""
    pool, clients, cluster_of_class = build_repeat(cfg, repeat)
    arch = cfg.architecture(pool.n_features, pool.n_classes)
    seed = _seed(cfg.master_seed, 12, repeat)
    runtimes = build_clients(clients, arch, seed)
    sim_cfg = cfg.sim_config()
    channel = cfg.channel_model()
    if cfg.method == "kd_pdfl":
        result = run_kd_pdfl(runtimes, sim_cfg, channel, cfg.regularizer_config(), seed)
    else:
        result = run_baseline(runtimes, sim_cfg, channel, cfg.method, seed)
    return result, clients, cluster_of_class


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> Path:
    """Run all repeats and write the artifact directory; returns its path."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    effective = cfg.replace(output_dir=str(out))
    write_atomic(out / "effective_config.json", json.dumps(effective.to_dict(), indent=2) + "\n")

    repeats = []
    for r in range(cfg.n_repeats):
        try:
            result, clients, cluster_of_class = simulate(cfg, r)
        except Exception as exc:
            raise type(exc)(f"repeat {r}: {exc}") from exc
        rdir = out / f"repeat_{r}"
        write_atomic(rdir / "metrics.csv", metrics_csv(result))
        write_atomic(rdir / "partition.json", json.dumps(partition_manifest(clients)) + "\n")
        write_atomic(rdir / "messages.jsonl", _jsonl(result.message_log))
        write_atomic(rdir / "exchanges.jsonl", _jsonl(
            {"t": e.t, "star": e.star, "neighbors": e.neighbors, "received": e.received,
             "distances": {str(k): v for k, v in e.distances.items()}, "confidence": e.confidence,
             "mixing": {str(k): v for k, v in e.mixing.items()}}
            for e in result.schedule_log
        ))
        info = {"repeat": r, "test_accuracy": result.final_accuracy("test").tolist()}
        if result.final_W is not None:
            write_atomic(rdir / "W.csv", w_csv(result.final_W))
            if cluster_of_class is not None:
                clusters = client_clusters(clients, cluster_of_class)
                info["client_clusters"] = clusters.tolist()
                info["within_weight"], info["cross_weight"] = block_weights(result.final_W, clusters)
        repeats.append(info)
        log.info("%s repeat %d: mean test accuracy %.4f", cfg.method, r, np.mean(info["test_accuracy"]))

    emit_summary([{"method": cfg.method, "M": cfg.M, "repeats": repeats}], out)
    return out


# -- summaries ---------------------------------------------------------------

def emit_summary(results: list[dict], out_dir) -> dict:
    """Write ``summary.json`` and ``summary.txt``: mean and population std of
    final per-client test accuracy per (method, M), pooled over clients and repeats."""
    if not results:
        raise ValueError("no completed runs to summarize")
    groups: dict[tuple[str, int], list] = {}
    extras: dict[tuple[str, int], list] = {}
    for res in results:
        key = (res["method"], int(res["M"]))
        for rep in res["repeats"]:
            groups.setdefault(key, []).extend(rep["test_accuracy"])
            extras.setdefault(key, []).append(rep)
    rows = []
    for method, M in sorted(groups, key=lambda k: (k[0], k[1])):
        acc = np.array(groups[(method, M)], dtype=np.float64)
        row = {"method": method, "M": M, "mean": float(acc.mean()), "std": float(acc.std()),
               "n": int(acc.size), "repeats": extras[(method, M)]}
        rows.append(row)
    summary = {"rows": rows}
    out_dir = Path(out_dir)
    write_atomic(out_dir / "summary.json", json.dumps(summary, indent=2) + "\n")
    lines = [f"{'method':<12} {'M':>4}  test accuracy", "-" * 40]
    lines += [f"{r['method']:<12} {r['M']:>4}  {r['mean']:.3f} ± {r['std']:.3f}" for r in rows]
    write_atomic(out_dir / "summary.txt", "\n".join(lines) + "\n")
    return summary


def summarize(directory) -> dict:
    """Rebuild a summary from every run directory below ``directory``."""
    directory = Path(directory)
    results = []
    for cfg_path in sorted(directory.rglob("effective_config.json")):
        cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
        repeats = []
        for mpath in sorted(cfg_path.parent.glob("repeat_*/metrics.csv"), key=lambda p: int(p.parent.name.split("_")[1])):
            rows = [r for r in read_metrics_csv(mpath) if r["split"] == "test"]
            t_last = max(r["t"] for r in rows)
            final = sorted((r["client_id"], r["accuracy"]) for r in rows if r["t"] == t_last)
            repeats.append({"repeat": int(mpath.parent.name.split("_")[1]), "test_accuracy": [a for _, a in final]})
        if repeats:
            results.append({"method": cfg["method"], "M": cfg["M"], "repeats": repeats})
    return emit_summary(results, directory)


# -- sweeps ------------------------------------------------------------------

def _mu_cells(values) -> list[tuple[float, float]]:
    if all(isinstance(v, str) and ":" in v for v in values):
        return [tuple(float(x) for x in v.split(":")) for v in values]
    nums = [float(v) for v in values]
    return [(a, b) for a in nums for b in nums]


def sweep(cfg: ExperimentConfig, axis: str, values, output_dir=None) -> Path:
    """One experiment per grid point, all sharing the base master seed."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(output_dir or cfg.output_dir)
    rows = []
    if axis == "neighbor_cap":
        for v in values:
            k = cfg.M - 1 if v in ("M-1", "max") else int(v)
            cell = cfg.replace(channel=dataclasses.replace(cfg.channel, max_neighbors=k))
            run_dir = run_experiment(cell, out / f"neighbor_cap={k}")
            rows += _sweep_rows(axis, k, run_dir)
    else:
        for mu1, mu2 in _mu_cells(values):
            cell = cfg.replace(regularizer=dataclasses.replace(cfg.regularizer, mu1=mu1, mu2=mu2))
            name = f"mu1={mu1:g}_mu2={mu2:g}"
            run_dir = run_experiment(cell, out / name)
            rows += _sweep_rows(axis, name, run_dir)
            Ws = [read_w_csv(p) for p in sorted(run_dir.glob("repeat_*/W.csv"))]
            if Ws:
                write_atomic(out / "heatmaps" / f"W_{name}.csv", w_csv(np.mean(Ws, axis=0)))
    write_atomic(out / "sweep.csv", _csv_text(
        ["axis", "value", "repeat", "client_id", "test_accuracy"], rows))
    return out


def _sweep_rows(axis, value, run_dir: Path) -> list:
    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    rows = []
    for rep in summary["rows"][0]["repeats"]:
        for cid, acc in enumerate(rep["test_accuracy"]):
            rows.append((axis, value, rep["repeat"], cid, repr(float(acc))))
    return rows
