"""Synthetic pressure scenarios for a water distribution network.

This is a statistical stand-in for a hydraulic simulator. Each node's pressure
head is its static base pressure, minus a demand-driven swing made of a daily
(48-sample) and a weekly (336-sample) sinusoid, plus a slow stochastic term that
is correlated across the network. The swing amplitude of a node grows with the
Hazen-Williams resistance of its cheapest path from the source node (the node
with the highest base pressure), so perturbing pipe diameters, lengths and
roughness changes the amplitudes a little from one scenario to the next.

A leak lowers the pressure from the onset sample on. The drop at node ``k`` is
``magnitude * amplitude(k) * exp(-hops(k, leak_node) / tau)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy.signal import lfilter
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra, shortest_path

logger = logging.getLogger(__name__)

SAMPLE_PERIOD_H = 0.5
DAILY_PERIOD = 48
WEEKLY_PERIOD = 336
SAMPLES_PER_YEAR = 17520
EPOCH = datetime(2024, 1, 1)

Split = Literal["train", "validation", "test"]


class TopologyError(ValueError):
    """Topology file could not be parsed or is not a valid network."""


class SchemaError(TopologyError):
    pass


class DisconnectedGraphError(TopologyError):
    pass


class ConfigError(ValueError):
    """Generation config cannot be honoured."""


class Node(BaseModel):
    id: str
    elevation: float = 0.0
    base_pressure: float


class Pipe(BaseModel):
    id: str
    start: str
    end: str
    length: float = Field(gt=0)
    diameter: float = Field(gt=0, description="millimetres")
    roughness: float = Field(gt=0, description="Hazen-Williams C")


class Network(BaseModel):
    name: str = "network"
    nodes: list[Node]
    pipes: list[Pipe]

    @model_validator(mode="after")
    def _check_references(self) -> "Network":
        ids = [n.id for n in self.nodes]
        if not ids:
            raise ValueError("network has no nodes")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        for p in self.pipes:
            for end in (p.start, p.end):
                if end not in known:
                    raise ValueError(f"pipe {p.id} references missing node {end!r}")
        return self

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def _edges(self) -> tuple[np.ndarray, np.ndarray]:
        index = {nid: i for i, nid in enumerate(self.node_ids)}
        rows = np.array([index[p.start] for p in self.pipes], dtype=int)
        cols = np.array([index[p.end] for p in self.pipes], dtype=int)
        return rows, cols

    def adjacency(self, weights: np.ndarray | None = None):
        rows, cols = self._edges()
        w = np.ones(len(rows)) if weights is None else np.asarray(weights, dtype=float)
        k = self.n_nodes
        a = coo_matrix((w, (rows, cols)), shape=(k, k)).tocsr()
        return a.maximum(a.T)

    def is_connected(self) -> bool:
        n_comp, _ = connected_components(self.adjacency(), directed=False)
        return n_comp == 1

    def hop_distances(self) -> np.ndarray:
        """All-pairs hop counts on the pipe graph, shape (K, K)."""
        return shortest_path(self.adjacency(), unweighted=True, directed=False)

    def source_index(self) -> int:
        return int(np.argmax([n.base_pressure for n in self.nodes]))


def parse_network(data: dict) -> Network:
    try:
        net = Network.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(str(exc)) from exc
    if not net.is_connected():
        raise DisconnectedGraphError(f"pipe graph of {net.name!r} is not connected")
    return net


def load_topology(path: str | Path) -> Network:
    """Read and validate a topology JSON file (``{"name", "nodes", "pipes"}``)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise TopologyError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: top level must be an object")
    return parse_network(data)


def save_topology(network: Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network.model_dump(), indent=2) + "\n")


def synthetic_network(
    n_nodes: int, n_pipes: int, seed: int = 0, name: str | None = None
) -> Network:
    """Random planar-ish network: a nearest-neighbour tree plus short loop pipes."""
    if n_pipes < n_nodes - 1:
        raise ValueError("need at least n_nodes - 1 pipes for a connected graph")
    rng = np.random.default_rng(seed)
    side = 250.0 * math.sqrt(n_nodes)
    xy = rng.uniform(0, side, size=(n_nodes, 2))
    dist = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
    edges: set[tuple[int, int]] = set()
    for i in range(1, n_nodes):
        j = int(np.argmin(dist[i, :i]))
        edges.add((j, i))
    pairs = sorted(
        ((dist[i, j], i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)),
    )
    for _, i, j in pairs:
        if len(edges) >= n_pipes:
            break
        if (i, j) not in edges and (j, i) not in edges:
            edges.add((i, j))
    if len(edges) < n_pipes:
        raise ValueError("too many pipes requested for a simple graph")
    src = 0
    reach = dist[src] / dist[src].max()
    nodes = [
        Node(
            id=f"J{i + 1}",
            elevation=round(float(rng.uniform(20, 60)), 2),
            base_pressure=round(float(55.0 - 20.0 * reach[i] + rng.uniform(-2, 2)), 2),
        )
        for i in range(n_nodes)
    ]
    nodes[src] = nodes[src].model_copy(update={"base_pressure": 60.0})
    diameters = [100.0, 150.0, 200.0, 250.0, 300.0, 400.0]
    pipes = [
        Pipe(
            id=f"P{e + 1}",
            start=f"J{i + 1}",
            end=f"J{j + 1}",
            length=round(max(1.0, float(dist[i, j])), 2),
            diameter=float(rng.choice(diameters)),
            roughness=round(float(rng.uniform(100, 140)), 1),
        )
        for e, (i, j) in enumerate(sorted(edges))
    ]
    return parse_network(
        {"name": name or f"synthetic-{n_nodes}", "nodes": [n.model_dump() for n in nodes],
         "pipes": [p.model_dump() for p in pipes]}
    )


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs of the surrogate signal model (heads in metres)."""

    amp_min: float = 2.0
    amp_max: float = 6.0
    resistance_ref: float = 1.0
    weekly_ratio: float = 0.5
    phase_per_hop: float = 0.1
    common_sigma: float = 0.05
    common_ar: float = 0.98
    local_sigma: float = 0.1
    local_ar: float = 0.9
    tau: float = 3.0


def pipe_resistance(network: Network) -> np.ndarray:
    """Hazen-Williams head-loss coefficient per pipe, scaled to O(1)."""
    length = np.array([p.length for p in network.pipes])
    diameter = np.array([p.diameter for p in network.pipes])
    rough = np.array([p.roughness for p in network.pipes])
    return (length / 1000.0) * (100.0 / rough) ** 1.852 * (300.0 / diameter) ** 4.87


def node_amplitudes(network: Network, params: GeneratorParams = GeneratorParams()) -> np.ndarray:
    """Demand-swing amplitude (metres) of every node."""
    r = dijkstra(network.adjacency(pipe_resistance(network)), directed=False,
                 indices=network.source_index())
    frac = r / (r + params.resistance_ref)
    return params.amp_min + (params.amp_max - params.amp_min) * frac


def _ar1(rng: np.random.Generator, shape: tuple[int, ...], coef: float) -> np.ndarray:
    """Unit-variance stationary AR(1) along the last axis."""
    white = rng.standard_normal(shape) * math.sqrt(1.0 - coef * coef)
    first = rng.standard_normal(shape[:-1])
    out = lfilter([1.0], [1.0, -coef], white, axis=-1)
    # start in the stationary distribution
    out += first[..., None] * coef ** np.arange(1, shape[-1] + 1)
    return out


def generate_baseline(
    network: Network,
    duration_samples: int,
    seed: int,
    params: GeneratorParams = GeneratorParams(),
    min_samples: int = WEEKLY_PERIOD,
) -> np.ndarray:
    """No-leak pressure matrix of shape (K, duration_samples)."""
    if duration_samples < min_samples:
        raise ValueError(f"duration_samples must be at least {min_samples}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    k = network.n_nodes
    base = np.array([n.base_pressure for n in network.nodes])
    amp = node_amplitudes(network, params)
    hops = network.hop_distances()[network.source_index()]
    offset = int(rng.integers(0, WEEKLY_PERIOD))
    t = np.arange(duration_samples) + offset
    daily = np.sin(2 * np.pi * t[None, :] / DAILY_PERIOD + params.phase_per_hop * hops[:, None])
    weekly = np.sin(2 * np.pi * t[None, :] / WEEKLY_PERIOD)
    swing = amp[:, None] * (daily + params.weekly_ratio * weekly)

    common = _ar1(rng, (duration_samples,), params.common_ar)
    local = _ar1(rng, (k, duration_samples), params.local_ar)
    # one averaging step over pipe neighbours couples adjacent nodes
    adj = network.adjacency().toarray() > 0
    mix = (np.eye(k) + adj) / (1.0 + adj.sum(axis=1, keepdims=True))
    local = mix @ local
    local /= local.std(axis=1, keepdims=True).mean()

    return (
        base[:, None]
        - swing
        + params.common_sigma * amp[:, None] * common[None, :]
        + params.local_sigma * local
    )


@dataclass(frozen=True)
class LeakSpec:
    node_index: int
    magnitude: float
    onset_sample: int
    sample_period: float = SAMPLE_PERIOD_H

    def __post_init__(self) -> None:
        if not 0.0 < self.magnitude <= 1.0:
            raise ValueError(f"leak magnitude must be in (0, 1], got {self.magnitude}")
        if self.onset_sample < 0:
            raise ValueError("onset_sample must be nonnegative")

    @property
    def onset_time(self) -> float:
        return self.onset_sample * self.sample_period

    def to_dict(self) -> dict:
        return {
            "node_index": self.node_index,
            "magnitude": self.magnitude,
            "onset_sample": self.onset_sample,
            "onset_time_h": self.onset_time,
        }

    @classmethod
    def from_dict(cls, d: dict, sample_period: float = SAMPLE_PERIOD_H) -> "LeakSpec":
        return cls(int(d["node_index"]), float(d["magnitude"]), int(d["onset_sample"]),
                   sample_period)


def attenuation(hops: np.ndarray | float, tau: float = 3.0) -> np.ndarray:
    return np.exp(-np.asarray(hops, dtype=float) / tau)


def leak_drop(network: Network, node_index: int, magnitude: float,
              params: GeneratorParams = GeneratorParams()) -> np.ndarray:
    """Per-node pressure drop (metres) caused by a leak; magnitude 0 gives zeros."""
    hops = network.hop_distances()[node_index]
    return magnitude * node_amplitudes(network, params) * attenuation(hops, params.tau)


def inject_leak(
    baseline: np.ndarray,
    network: Network,
    leak: LeakSpec,
    params: GeneratorParams = GeneratorParams(),
) -> np.ndarray:
    """Copy of ``baseline`` with the leak's pressure drop applied from the onset on."""
    k, n = baseline.shape
    if k != network.n_nodes:
        raise ValueError(f"baseline has {k} rows, network has {network.n_nodes} nodes")
    if not 0 <= leak.onset_sample < n:
        raise ValueError(f"onset sample {leak.onset_sample} outside [0, {n})")
    if not 0 <= leak.node_index < k:
        raise ValueError(f"leak node index {leak.node_index} outside [0, {k})")
    out = baseline.copy()
    out[:, leak.onset_sample:] -= leak_drop(network, leak.node_index, leak.magnitude, params)[:, None]
    return out


def add_noise(
    series: np.ndarray,
    snr_db: float,
    seed: int,
    reference: Literal["ac", "total"] = "ac",
) -> np.ndarray:
    """Add white Gaussian noise per row at the requested SNR.

    ``snr_db = inf`` means no noise. The signal power of a row is the mean square
    of the row after removing its mean (``reference="ac"``) or of the raw row
    (``reference="total"``).
    """
    if math.isnan(snr_db):
        raise ValueError("snr_db must not be NaN")
    if math.isinf(snr_db) and snr_db > 0:
        return series.copy()
    if reference == "ac":
        centred = series - series.mean(axis=1, keepdims=True)
        power = np.mean(centred**2, axis=1)
    elif reference == "total":
        power = np.mean(series**2, axis=1)
    else:
        raise ValueError(f"unknown SNR reference {reference!r}")
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    return series + sigma[:, None] * rng.standard_normal(series.shape)


def jitter_network(network: Network, rel: float, rng: np.random.Generator) -> Network:
    """Uniform +/- ``rel`` relative perturbation of every pipe's length, diameter, roughness."""
    if rel == 0:
        return network
    m = len(network.pipes)
    f = rng.uniform(1.0 - rel, 1.0 + rel, size=(m, 3))
    pipes = [
        p.model_copy(update={"length": p.length * f[i, 0], "diameter": p.diameter * f[i, 1],
                             "roughness": p.roughness * f[i, 2]})
        for i, p in enumerate(network.pipes)
    ]
    return network.model_copy(update={"pipes": pipes})


@dataclass
class Scenario:
    id: str
    pressures: np.ndarray
    seed: int
    leak: LeakSpec | None = None
    split: str = "test"
    sample_period: float = SAMPLE_PERIOD_H
    node_ids: list[str] = field(default_factory=list)
    network: str = ""

    def __post_init__(self) -> None:
        if self.pressures.ndim != 2:
            raise ValueError("pressures must be a K x N matrix")
        if self.node_ids and len(self.node_ids) != self.pressures.shape[0]:
            raise ValueError("node_ids length does not match pressure rows")
        if not np.all(np.isfinite(self.pressures)):
            raise ValueError(f"scenario {self.id}: non-finite pressure values")

    @property
    def label(self) -> int:
        return int(self.leak is not None)

    @property
    def n_nodes(self) -> int:
        return self.pressures.shape[0]

    @property
    def n_samples(self) -> int:
        return self.pressures.shape[1]

    def metadata(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "label": self.label,
            "seed": self.seed,
            "sample_period_h": self.sample_period,
            "network": self.network,
            "n_nodes": self.n_nodes,
            "n_samples": self.n_samples,
            "leak": self.leak.to_dict() if self.leak else None,
        }


@dataclass
class ScenarioSet:
    scenarios: list[Scenario]

    def __post_init__(self) -> None:
        for s in self.scenarios:
            if s.split == "train" and s.label != 0:
                raise ConfigError(f"train split must contain no-leak scenarios only ({s.id})")

    def split(self, name: str) -> list[Scenario]:
        return [s for s in self.scenarios if s.split == name]

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)


class GenerationConfig(BaseModel):
    """Dataset recipe; everything downstream is a function of this plus the topology."""

    n_train: int = Field(30, ge=0)
    n_validation: int = Field(50, ge=0)
    n_test: int = Field(40, ge=0)
    train_leak_fraction: float = Field(0.0, ge=0, le=1)
    validation_leak_fraction: float = Field(0.0, ge=0, le=1)
    test_leak_fraction: float = Field(0.5, ge=0, le=1)
    duration_samples: int = Field(10 * WEEKLY_PERIOD, gt=0)
    window_length: int = Field(WEEKLY_PERIOD, gt=0)
    leak_magnitude: tuple[float, float] = (0.3, 1.0)
    onset_margin: int = Field(48, ge=0, description="earliest onset is window_length + margin")
    min_post_onset: int = Field(WEEKLY_PERIOD, ge=1)
    pipe_jitter: float = Field(0.1, ge=0, lt=1)
    tau: float = Field(3.0, gt=0)
    master_seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "GenerationConfig":
        lo, hi = self.leak_magnitude
        if not 0 < lo <= hi <= 1:
            raise ValueError("leak_magnitude must satisfy 0 < lo <= hi <= 1")
        return self


def _scenario_seeds(master_seed: int, count: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def make_scenario(
    network: Network,
    config: GenerationConfig,
    seed: int,
    scenario_id: str,
    split: str,
    leak: bool,
    params: GeneratorParams | None = None,
) -> Scenario:
    """One scenario; the leak and no-leak twins of a seed share every pre-onset sample."""
    params = params or GeneratorParams(tau=config.tau)
    jrng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    net = jitter_network(network, config.pipe_jitter, jrng)
    pressures = generate_baseline(net, config.duration_samples, seed, params,
                                  min_samples=config.window_length)
    spec = None
    if leak:
        lrng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        first = config.window_length + config.onset_margin
        last = config.duration_samples - config.min_post_onset
        if last < first:
            raise ConfigError("duration too short to place a leak after the setup window")
        lo, hi = config.leak_magnitude
        spec = LeakSpec(
            node_index=int(lrng.integers(0, network.n_nodes)),
            magnitude=float(lrng.uniform(lo, hi)),
            onset_sample=int(lrng.integers(first, last + 1)),
        )
        pressures = inject_leak(pressures, net, spec, params)
    return Scenario(
        id=scenario_id, pressures=pressures, seed=seed, leak=spec, split=split,
        node_ids=network.node_ids, network=network.name,
    )


def generate_dataset(
    network: Network, config: GenerationConfig, params: GeneratorParams | None = None
) -> ScenarioSet:
    if config.train_leak_fraction > 0:
        raise ConfigError("train split must be leak-free (train_leak_fraction must be 0)")
    plan: list[tuple[str, int, float]] = [
        ("train", config.n_train, 0.0),
        ("validation", config.n_validation, config.validation_leak_fraction),
        ("test", config.n_test, config.test_leak_fraction),
    ]
    total = sum(n for _, n, _ in plan)
    seeds = _scenario_seeds(config.master_seed, total)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, 99]))
    scenarios = []
    cursor = 0
    for split, count, frac in plan:
        n_leak = int(round(frac * count))
        flags = np.zeros(count, dtype=bool)
        flags[:n_leak] = True
        order_rng.shuffle(flags)
        for i in range(count):
            scenarios.append(
                make_scenario(network, config, seeds[cursor], f"{split}-{i:04d}", split,
                              bool(flags[i]), params)
            )
            cursor += 1
    return ScenarioSet(scenarios)


def timestamps(n: int, sample_period: float = SAMPLE_PERIOD_H) -> list[str]:
    step = timedelta(hours=sample_period)
    return [(EPOCH + i * step).isoformat() for i in range(n)]


def write_scenario(scenario: Scenario, directory: str | Path) -> Path:
    """Write ``<id>.csv`` (timestamp + one column per node) and ``<id>.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    node_ids = scenario.node_ids or [f"N{i}" for i in range(scenario.n_nodes)]
    ts = timestamps(scenario.n_samples, scenario.sample_period)
    lines = ["timestamp," + ",".join(node_ids)]
    body = scenario.pressures.T
    for stamp, row in zip(ts, body):
        lines.append(stamp + "," + ",".join(f"{v:.6f}" for v in row))
    csv_path = directory / f"{scenario.id}.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    meta = scenario.metadata() | {"node_ids": node_ids}
    (directory / f"{scenario.id}.json").write_text(json.dumps(meta, indent=2) + "\n")
    return csv_path


def read_scenario(csv_path: str | Path) -> Scenario:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    with csv_path.open() as fh:
        header = fh.readline().strip().split(",")
    values = np.loadtxt(csv_path, delimiter=",", skiprows=1,
                        usecols=range(1, len(header)), ndmin=2)
    period = float(meta.get("sample_period_h", SAMPLE_PERIOD_H))
    leak = LeakSpec.from_dict(meta["leak"], period) if meta.get("leak") else None
    return Scenario(
        id=meta["id"], pressures=values.T.copy(), seed=int(meta["seed"]), leak=leak,
        split=meta.get("split", "test"), sample_period=period, node_ids=header[1:],
        network=meta.get("network", ""),
    )
