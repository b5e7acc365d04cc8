"""Dynamics-instance sampling, sparse observation sets, and dataset files.

A task is one ODE instance: sampled parameters, a topology, initial states,
and the dense ground-truth trajectory.  Observations are (t, node, state)
triples drawn without replacement from the (time grid x nodes) lattice up to
the maximum observed time, always including the full t=0 snapshot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, TextIO

import numpy as np

from . import dynamics
from .dynamics import DynamicsParams, SolverConfig, Trajectory
from .errors import DataFormatError, ParameterError
from .graph import Topology, TopologySpec, generate_topology

DATASET_SCHEMA_VERSION = 1

# Full-scale dataset sizes (N_Tr, N_Te) per scenario.
DATASET_SIZES = {
    "mutualistic": (1500, 100),
    "phototaxis": (300, 20),
    "brain": (300, 20),
    "sis": (1000, 100),
    "sir": (1000, 100),
    "seis": (1000, 100),
}


@dataclass(frozen=True)
class ScenarioSpec:
    """Sampling law for one scenario family.

    param_ranges holds uniform (lo, hi) bounds for the sampled symbols;
    fixed_params holds constants.  Observation times live on the delta_t grid
    up to t_observe; ground truth extends to t_max.
    """

    scenario: str
    param_ranges: dict
    fixed_params: dict = field(default_factory=dict)
    node_range: tuple = (100, 200)
    delta_t: float = 1.0
    t_observe: float = 50.0
    t_max: float = 100.0
    topology_kinds: tuple = ("power_law",)
    topology_params: dict = field(default_factory=dict)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.scenario not in dynamics.SCENARIOS:
            raise ParameterError(f"unknown scenario {self.scenario!r}")
        if self.delta_t <= 0 or self.t_observe <= 0:
            raise ParameterError("delta_t and t_observe must be > 0")
        if self.t_max <= self.t_observe:
            raise ParameterError("t_max must exceed t_observe so extrapolation queries exist")
        if not self.topology_kinds:
            raise ParameterError("at least one topology kind is required")


def scenario_preset(scenario: str, **overrides) -> ScenarioSpec:
    """Built-in sampling spaces for the five scenario families."""
    presets = {
        "mutualistic": dict(
            param_ranges={"b": (0.05, 0.15), "c": (0.5, 1.5), "d": (4.0, 6.0),
                          "e": (0.8, 1.0), "h": (0.05, 0.15), "k": (4.0, 6.0)},
            node_range=(100, 200), delta_t=1.0, t_observe=50.0, t_max=100.0,
            topology_kinds=("grid", "power_law", "random", "small_world", "community"),
        ),
        "phototaxis": dict(
            param_ranges={"I0": (0.01, 1.0), "kernel_beta": (-0.4, -0.1),
                          "zeta_cr": (0.1, 0.5)},
            fixed_params={"lambda1": 100.0, "lambda2": 100.0, "V": (60.0, 0.0)},
            node_range=(20, 50), delta_t=0.01, t_observe=0.5, t_max=1.0,
            topology_kinds=("complete",),
        ),
        "brain": dict(
            param_ranges={"a": (0.2, 0.3), "b": (0.4, 0.6), "c": (-0.06, -0.02),
                          "epsilon": (0.8, 1.2)},
            node_range=(100, 200), delta_t=0.01, t_observe=0.5, t_max=1.0,
            topology_kinds=("power_law",),
        ),
        "sis": dict(
            param_ranges={"b": (0.02, 0.2), "r": (0.1, 0.4)},
            node_range=(100, 200), delta_t=1.0, t_observe=50.0, t_max=100.0,
            topology_kinds=("power_law",),
        ),
        "sir": dict(
            param_ranges={"b": (0.02, 0.2), "r": (0.1, 0.4)},
            node_range=(100, 200), delta_t=1.0, t_observe=50.0, t_max=100.0,
            topology_kinds=("power_law",),
        ),
        "seis": dict(
            param_ranges={"b": (0.3, 2.0), "r": (0.1, 0.4), "c": (0.05, 0.1)},
            node_range=(100, 200), delta_t=1.0, t_observe=50.0, t_max=100.0,
            topology_kinds=("power_law",),
        ),
    }
    if scenario not in presets:
        raise ParameterError(f"no preset for scenario {scenario!r}")
    kwargs = presets[scenario]
    kwargs.update(overrides)
    return ScenarioSpec(scenario=scenario, **kwargs)


@dataclass(frozen=True)
class TrajectoryTask:
    """One dynamics instance with its dense ground truth."""

    id: int
    scenario: str
    params: DynamicsParams
    topology: Topology
    x0: np.ndarray
    truth: Trajectory
    seed: int
    delta_t: float
    t_observe: float
    t_max: float

    def __post_init__(self):
        if self.t_max <= self.t_observe:
            raise ParameterError("t_max must exceed t_observe")
        if abs(self.truth.times[-1] - self.t_max) > 1e-9 * max(1.0, self.t_max):
            raise ParameterError("truth must cover [0, t_max]")

    @property
    def observable_times(self) -> np.ndarray:
        """Grid times eligible for observation (t <= t_observe)."""
        return self.truth.times[self.truth.times <= self.t_observe + 1e-9]


@dataclass(frozen=True)
class Observation:
    t: float
    l: int
    x: np.ndarray

    def key(self) -> tuple:
        return (self.t, self.l)


@dataclass(frozen=True)
class ObservationSet:
    """Unique (t, node) triples with a context/target role."""

    observations: tuple
    role: str = "target"

    def __post_init__(self):
        if self.role not in ("context", "target"):
            raise ParameterError(f"role must be context or target, got {self.role!r}")
        keys = [o.key() for o in self.observations]
        if len(set(keys)) != len(keys):
            raise ParameterError("observations must be unique on (t, l)")

    def __len__(self) -> int:
        return len(self.observations)

    def distinct_times(self) -> np.ndarray:
        return np.unique([o.t for o in self.observations])

    def at_time(self, t: float) -> list:
        return [o for o in self.observations if o.t == t]

    def initial_states(self, n: int) -> np.ndarray:
        """The full t=0 snapshot as an (n, d) matrix; errors if incomplete."""
        at0 = self.at_time(0.0)
        if len(at0) != n:
            raise ParameterError(
                f"initial snapshot incomplete: {len(at0)} of {n} nodes observed at t=0"
            )
        d = at0[0].x.shape[0]
        x0 = np.zeros((n, d))
        for o in at0:
            x0[o.l] = o.x
        return x0


def _sorted_observations(obs: Iterable[Observation]) -> tuple:
    return tuple(sorted(obs, key=lambda o: (o.t, o.l)))


def sample_initial_state(scenario: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Initial-state law per scenario preset."""
    if scenario == "mutualistic":
        return rng.uniform(0.0, 25.0, size=(n, 1))
    if scenario == "phototaxis":
        x0 = np.empty((n, 5))
        x0[:, 0:4] = rng.uniform(0.0, 100.0, size=(n, 4))
        x0[:, 4] = rng.uniform(0.0, 1e-3, size=n)
        return x0
    if scenario == "brain":
        return rng.uniform(-1.0, 1.0, size=(n, 2))
    if scenario == "sis":
        i = rng.uniform(1e-6, 1e-3, size=n)
        return np.stack([1.0 - i, i], axis=1)
    if scenario == "sir":
        i = rng.uniform(1e-6, 1e-3, size=n)
        return np.stack([1.0 - i, i, np.zeros(n)], axis=1)
    if scenario == "seis":
        i = rng.uniform(1e-6, 1e-3, size=n)
        return np.stack([1.0 - i, np.zeros(n), i], axis=1)
    raise ParameterError(f"unknown scenario {scenario!r}")


def sample_params(spec: ScenarioSpec, rng: np.random.Generator) -> DynamicsParams:
    """Uniform draw over the spec's parameter ranges plus fixed constants."""
    values = {}
    for symbol in sorted(spec.param_ranges):
        lo, hi = spec.param_ranges[symbol]
        values[symbol] = float(rng.uniform(lo, hi))
    for symbol, value in spec.fixed_params.items():
        values[symbol] = tuple(value) if isinstance(value, (tuple, list)) else float(value)
    if spec.scenario == "phototaxis":
        values["zeta_cp"] = 2.0 * values["zeta_cr"]
        values["V"] = np.asarray(values["V"], dtype=np.float64)
    return DynamicsParams(scenario=spec.scenario, values=values)


def _sample_topology_spec(spec: ScenarioSpec, rng: np.random.Generator) -> TopologySpec:
    kinds = spec.topology_kinds
    kind = kinds[int(rng.integers(len(kinds)))] if len(kinds) > 1 else kinds[0]
    knobs = dict(spec.topology_params)
    if kind == "grid":
        rows, cols = knobs.get("rows", 0), knobs.get("cols", 0)
        if rows and cols:
            return TopologySpec(kind="grid", rows=rows, cols=cols)
        lo, hi = spec.node_range
        sides = [s for s in range(1, int(np.sqrt(hi)) + 1) if lo <= s * s <= hi]
        if not sides:
            raise ParameterError(f"no square grid fits node_range {spec.node_range}")
        side = sides[int(rng.integers(len(sides)))]
        return TopologySpec(kind="grid", rows=side, cols=side)
    n = knobs.get("n") or int(rng.integers(spec.node_range[0], spec.node_range[1],
                                           endpoint=True))
    fields = {k: v for k, v in knobs.items()
              if k in ("edge_prob", "attach_count", "ring_neighbors",
                       "rewire_prob", "p_in", "p_out")}
    return TopologySpec(kind=kind, n=n, **fields)


def sample_task(spec: ScenarioSpec, seed: int, task_id: int = 0) -> TrajectoryTask:
    """Draw one dynamics instance and integrate its ground truth."""
    rng = np.random.default_rng(seed)
    topo_spec = _sample_topology_spec(spec, rng)
    topology = generate_topology(topo_spec, seed=int(rng.integers(1 << 62)))
    params = sample_params(spec, rng)
    x0 = sample_initial_state(spec.scenario, topology.n, rng)
    try:
        truth = dynamics.integrate(spec.scenario, params, topology, x0,
                                   t_end=spec.t_max, grid_step=spec.delta_t,
                                   solver=spec.solver)
    except Exception as exc:
        raise type(exc)(f"task {task_id}: {exc}") from exc
    return TrajectoryTask(id=task_id, scenario=spec.scenario, params=params,
                          topology=topology, x0=x0, truth=truth, seed=seed,
                          delta_t=spec.delta_t, t_observe=spec.t_observe,
                          t_max=spec.t_max)


def sample_observations(task: TrajectoryTask, count: int, noise_sigma: float,
                        seed: int, noisy_initial: bool = False) -> ObservationSet:
    """Draw count unique (t, node) pairs from the observable lattice.

    The full t=0 snapshot is always included (noiseless unless noisy_initial).
    Noise positions and standard-normal draws depend only on the seed, so
    sweeping noise_sigma with a fixed seed rescales the same disturbances.
    """
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be >= 0")
    times = task.observable_times
    n = task.topology.n
    total = len(times) * n
    if count < n:
        raise ParameterError(f"count {count} cannot cover the {n}-node t=0 snapshot")
    if count > total:
        raise ParameterError(f"count {count} exceeds the {total}-slot observation grid")
    rng = np.random.default_rng(seed)
    later = total - n
    extra = rng.choice(later, size=count - n, replace=False) if count > n else np.array([], dtype=int)
    pairs = [(0, l) for l in range(n)]
    pairs += [(1 + int(idx) // n, int(idx) % n) for idx in sorted(extra.tolist())]
    observations = []
    for t_idx, l in pairs:
        eps = rng.standard_normal(task.truth.state_dim)
        clean = t_idx == 0 and not noisy_initial
        value = task.truth.states[t_idx, l] + (0.0 if clean else noise_sigma) * eps
        observations.append(Observation(t=float(times[t_idx]), l=l, x=value))
    return ObservationSet(observations=_sorted_observations(observations), role="target")


def split_context_target(obs: ObservationSet, context_fraction: float,
                         seed: int) -> tuple[ObservationSet, ObservationSet]:
    """Context = random subset of the target set, always keeping the t=0 snapshot."""
    if len(obs) == 0:
        raise ParameterError("cannot split an empty observation set")
    if not 0.0 < context_fraction <= 1.0:
        raise ParameterError("context_fraction must be in (0, 1]")
    target = ObservationSet(observations=obs.observations, role="target")
    size = max(1, round(context_fraction * len(obs)))
    snapshot = [o for o in obs.observations if o.t == 0.0]
    others = [o for o in obs.observations if o.t != 0.0]
    keep = max(0, size - len(snapshot))
    rng = np.random.default_rng(seed)
    if keep >= len(others):
        chosen = others
    else:
        idx = rng.choice(len(others), size=keep, replace=False)
        chosen = [others[int(i)] for i in sorted(idx.tolist())]
    context = ObservationSet(observations=_sorted_observations(snapshot + chosen),
                             role="context")
    return context, target


@dataclass(frozen=True)
class GraphSnapshot:
    """All observations sharing one timestamp, as zero-filled states plus mask."""

    t: float
    x: np.ndarray        # (n, d), zeros where unobserved
    mask: np.ndarray     # (n, d), row of ones exactly when the node is observed
    topology: Topology


def snapshots(obs: ObservationSet, topology: Topology) -> list:
    """One GraphSnapshot per distinct timestamp, sorted by time."""
    if len(obs) == 0:
        raise ParameterError("cannot build snapshots from an empty observation set")
    d = obs.observations[0].x.shape[0]
    out = []
    for t in obs.distinct_times():
        x = np.zeros((topology.n, d))
        mask = np.zeros((topology.n, d))
        for o in obs.at_time(float(t)):
            x[o.l] = o.x
            mask[o.l] = 1.0
        out.append((float(t), GraphSnapshot(t=float(t), x=x, mask=mask, topology=topology)))
    return out


# ---------------------------------------------------------------------------
# Dataset serialization: line-delimited JSON, full float precision via repr.

def _spec_to_dict(spec: ScenarioSpec) -> dict:
    solver = spec.solver
    return {
        "scenario": spec.scenario,
        "param_ranges": {k: list(v) for k, v in spec.param_ranges.items()},
        "fixed_params": {k: (list(v) if isinstance(v, (tuple, list, np.ndarray)) else v)
                         for k, v in spec.fixed_params.items()},
        "node_range": list(spec.node_range),
        "delta_t": spec.delta_t,
        "t_observe": spec.t_observe,
        "t_max": spec.t_max,
        "topology_kinds": list(spec.topology_kinds),
        "topology_params": dict(spec.topology_params),
        "solver": {"method": solver.method, "step": solver.step,
                   "rtol": solver.rtol, "atol": solver.atol},
    }


def _spec_from_dict(data: dict) -> ScenarioSpec:
    solver = data.get("solver", {})
    return ScenarioSpec(
        scenario=data["scenario"],
        param_ranges={k: tuple(v) for k, v in data["param_ranges"].items()},
        fixed_params={k: (tuple(v) if isinstance(v, list) else v)
                      for k, v in data.get("fixed_params", {}).items()},
        node_range=tuple(data["node_range"]),
        delta_t=data["delta_t"],
        t_observe=data["t_observe"],
        t_max=data["t_max"],
        topology_kinds=tuple(data["topology_kinds"]),
        topology_params=dict(data.get("topology_params", {})),
        solver=SolverConfig(method=solver.get("method", "dopri5_adaptive"),
                            step=solver.get("step"),
                            rtol=solver.get("rtol", 1e-6),
                            atol=solver.get("atol", 1e-6)),
    )


def _params_to_dict(params: DynamicsParams) -> dict:
    return {k: (list(np.asarray(v, dtype=float)) if isinstance(v, (tuple, list, np.ndarray)) else v)
            for k, v in params.values.items()}


def _params_from_dict(scenario: str, data: dict) -> DynamicsParams:
    values = {k: (np.asarray(v, dtype=np.float64) if isinstance(v, list) else v)
              for k, v in data.items()}
    return DynamicsParams(scenario=scenario, values=values)


def _topology_to_dict(topology: Topology) -> dict:
    return {"kind": topology.kind, "n": topology.n, "directed": topology.directed,
            "edges": [[s, t, w] for s, t, w in topology.edge_list()]}


def _topology_from_dict(data: dict) -> Topology:
    n = data["n"]
    adj = np.zeros((n, n))
    for src, dst, weight in data["edges"]:
        adj[dst, src] = weight
        if not data["directed"]:
            adj[src, dst] = weight
    return Topology(n=n, adjacency=adj, directed=data["directed"], kind=data["kind"])


def task_to_record(task: TrajectoryTask, obs: ObservationSet) -> dict:
    return {
        "id": task.id,
        "seed": task.seed,
        "scenario": task.scenario,
        "params": _params_to_dict(task.params),
        "topology": _topology_to_dict(task.topology),
        "x0": task.x0.tolist(),
        "delta_t": task.delta_t,
        "t_observe": task.t_observe,
        "t_max": task.t_max,
        "truth": {"times": task.truth.times.tolist(),
                  "states": task.truth.states.tolist()},
        "observations": {
            "role": obs.role,
            "triples": [{"t": o.t, "l": o.l, "x": o.x.tolist()} for o in obs.observations],
        },
    }


def task_from_record(record: dict) -> tuple[TrajectoryTask, ObservationSet]:
    truth = Trajectory(times=np.asarray(record["truth"]["times"]),
                       states=np.asarray(record["truth"]["states"]))
    task = TrajectoryTask(
        id=record["id"], scenario=record["scenario"],
        params=_params_from_dict(record["scenario"], record["params"]),
        topology=_topology_from_dict(record["topology"]),
        x0=np.asarray(record["x0"], dtype=np.float64),
        truth=truth, seed=record["seed"], delta_t=record["delta_t"],
        t_observe=record["t_observe"], t_max=record["t_max"],
    )
    triples = tuple(Observation(t=o["t"], l=o["l"], x=np.asarray(o["x"], dtype=np.float64))
                    for o in record["observations"]["triples"])
    obs = ObservationSet(observations=triples, role=record["observations"]["role"])
    return task, obs


def write_dataset(sink: TextIO, spec: ScenarioSpec,
                  tasks: Iterable[tuple[TrajectoryTask, ObservationSet]]) -> None:
    """Stream the dataset as one JSON record per line, header first."""
    header = {"schema_version": DATASET_SCHEMA_VERSION, "kind": "ndp4nd-dataset",
              "spec": _spec_to_dict(spec)}
    sink.write(json.dumps(header, sort_keys=True) + "\n")
    for task, obs in tasks:
        sink.write(json.dumps(task_to_record(task, obs), sort_keys=True) + "\n")


def read_dataset(source: TextIO) -> tuple[ScenarioSpec, list]:
    """Inverse of write_dataset; errors name the offending line."""
    header = None
    tasks = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"line {lineno}: invalid JSON record ({exc})")
        if header is None:
            if record.get("kind") != "ndp4nd-dataset":
                raise DataFormatError(f"line {lineno}: missing dataset header")
            if record.get("schema_version") != DATASET_SCHEMA_VERSION:
                raise DataFormatError(
                    f"line {lineno}: schema version {record.get('schema_version')} "
                    f"!= supported {DATASET_SCHEMA_VERSION}"
                )
            header = record
            continue
        try:
            tasks.append(task_from_record(record))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"line {lineno}: malformed task record ({exc})")
    if header is None:
        raise DataFormatError("dataset has no header record")
    return _spec_from_dict(header["spec"]), tasks


def export_observations_csv(tasks: Iterable[tuple[TrajectoryTask, ObservationSet]]) -> str:
    """Observation triples as CSV for external tools."""
    rows = []
    d = None
    for task, obs in tasks:
        for o in obs.observations:
            if d is None:
                d = o.x.shape[0]
                rows.append("task_id,t,node," + ",".join(f"x{i}" for i in range(d)))
            vals = ",".join(repr(float(v)) for v in o.x)
            rows.append(f"{task.id},{o.t!r},{o.l},{vals}")
    return "\n".join(rows) + "\n" if rows else "task_id,t,node\n"
