"""Reproducible experiment harness behind the CLI.

Each command reads an ExperimentConfig, derives all randomness from
(config.seed, purpose keys), and writes versioned artifacts plus the fully
resolved config into its output directory.  Re-running a command with the
same config and seed reproduces every numeric output byte for byte.
"""

from __future__ import annotations

import concurrent.futures
import json
import subprocess
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, metrics, taskgen
from .dynamics import STATE_DIMS
from .errors import ConfigError, DataFormatError, ParameterError
from .metrics import EvalReport, TaskScore
from .model import (
    ModelConfig,
    NDP4NDModel,
    TrainSettings,
    fit,
    graph_tensors,
    load_model,
    predict_grid,
    save_model,
    snapshot_tensors,
)
from .seeding import derive_seed, torch_generator
from .taskgen import ObservationSet, ScenarioSpec, TrajectoryTask, scenario_preset

CONFIG_SCHEMA_VERSION = 1

# (n_train, n_test, epochs) per preset; the _desk variants trade scale for
# laptop-sized runtimes and pin the topology to a small grid where sensible.
_EXPERIMENT_PRESETS = {
    "mutualistic": dict(n_train=1500, n_test=100, epochs=200),
    "phototaxis": dict(n_train=300, n_test=20, epochs=200),
    "brain": dict(n_train=300, n_test=20, epochs=200),
    "sis": dict(n_train=1000, n_test=100, epochs=200),
    "sir": dict(n_train=1000, n_test=100, epochs=200),
    "seis": dict(n_train=1000, n_test=100, epochs=200),
}

_DESK_OVERRIDES = {
    "mutualistic": dict(
        n_train=100, n_test=20, epochs=60,
        scenario_overrides=dict(topology_kinds=["grid"],
                                topology_params={"rows": 6, "cols": 6}),
        # Latent solver at delta_t (not delta_t/2) keeps the 60-epoch run
        # inside a desk budget; observation times stay on the solver grid.
        model_overrides=dict(latent_step=1.0),
    ),
    "phototaxis": dict(n_train=40, n_test=10, epochs=40,
                       scenario_overrides=dict(node_range=[10, 16])),
    "brain": dict(n_train=40, n_test=10, epochs=40,
                  scenario_overrides=dict(node_range=[20, 40])),
    "sis": dict(n_train=60, n_test=20, epochs=40,
                scenario_overrides=dict(node_range=[20, 40])),
    "sir": dict(n_train=60, n_test=20, epochs=40,
                scenario_overrides=dict(node_range=[20, 40])),
    "seis": dict(n_train=60, n_test=20, epochs=40,
                 scenario_overrides=dict(node_range=[20, 40])),
}


@dataclass
class ObservationSettings:
    target_ratio: Optional[float] = 6.0   # percent of the observation lattice
    count: Optional[int] = None           # overrides target_ratio when set
    noise_sigma: float = 0.0
    noisy_initial: bool = False

    def count_for(self, task: TrajectoryTask) -> int:
        slots = len(task.observable_times) * task.topology.n
        if self.count is not None:
            count = self.count
        elif self.target_ratio is not None:
            count = int(round(self.target_ratio / 100.0 * slots))
        else:
            raise ConfigError("observations need either count or target_ratio")
        if not task.topology.n <= count <= slots:
            raise ConfigError(
                f"observation count {count} outside [{task.topology.n}, {slots}] "
                f"for task {task.id}")
        return count


@dataclass
class ExperimentConfig:
    preset: str
    seed: int = 0
    n_train: int = 100
    n_test: int = 20
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 5e-3
    context_fraction: tuple = (0.2, 0.8)
    kl_warmup_fraction: float = 0.2
    lr_decay: bool = True
    checkpoint_every: int = 0
    observations: ObservationSettings = field(default_factory=ObservationSettings)
    model_overrides: dict = field(default_factory=dict)
    eval_mc_samples: int = 20
    eval_t_max: Optional[float] = None
    scenario_overrides: dict = field(default_factory=dict)

    def scenario_name(self) -> str:
        return self.preset[:-5] if self.preset.endswith("_desk") else self.preset

    def scenario_spec(self) -> ScenarioSpec:
        overrides = {}
        for key, value in self.scenario_overrides.items():
            if key in ("topology_kinds", "node_range"):
                overrides[key] = tuple(value)
            else:
                overrides[key] = value
        return scenario_preset(self.scenario_name(), **overrides)

    def model_config(self, spec: ScenarioSpec) -> ModelConfig:
        return ModelConfig.for_scenario(spec, **self.model_overrides)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed,
            context_fraction=tuple(self.context_fraction),
            kl_warmup_fraction=self.kl_warmup_fraction, lr_decay=self.lr_decay)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["schema_version"] = CONFIG_SCHEMA_VERSION
        data["context_fraction"] = list(self.context_fraction)
        return data


def experiment_preset(preset: str, **overrides) -> ExperimentConfig:
    """Named experiment defaults; '<scenario>_desk' variants are laptop-scale."""
    desk = preset.endswith("_desk")
    scenario = preset[:-5] if desk else preset
    if scenario not in _EXPERIMENT_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    kwargs = dict(_EXPERIMENT_PRESETS[scenario])
    if desk:
        kwargs.update(_DESK_OVERRIDES[scenario])
    kwargs.update(overrides)
    return ExperimentConfig(preset=preset, **kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config schema version {version} != supported {CONFIG_SCHEMA_VERSION}")
    preset = data.pop("preset", None)
    if preset is None:
        raise ConfigError("config requires a 'preset' field")
    if "observations" in data and isinstance(data["observations"], dict):
        data["observations"] = ObservationSettings(**data["observations"])
    if "context_fraction" in data:
        data["context_fraction"] = tuple(data["context_fraction"])
    try:
        return experiment_preset(preset, **data)
    except TypeError as exc:
        raise ConfigError(f"invalid config field: {exc}")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(data)


def _git_commit() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_run_stamp(out_dir: Path, config: ExperimentConfig, command: str) -> None:
    """Resolved config plus version stamp, for auditability of every run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.resolved.json", "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    stamp = {"package_version": __version__, "git_commit": _git_commit(),
             "command": command, "seed": config.seed}
    with open(out_dir / "stamp.json", "w", encoding="utf-8") as f:
        json.dump(stamp, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# generate

def _build_task(spec: ScenarioSpec, obs_settings: ObservationSettings,
                master_seed: int, stream: str, task_id: int,
                attempt: int = 0) -> tuple[TrajectoryTask, ObservationSet]:
    task_seed = derive_seed(master_seed, stream, task_id, attempt)
    task = taskgen.sample_task(spec, task_seed, task_id=task_id)
    obs = taskgen.sample_observations(
        task, obs_settings.count_for(task), obs_settings.noise_sigma,
        seed=derive_seed(master_seed, stream + "-obs", task_id),
        noisy_initial=obs_settings.noisy_initial)
    return task, obs


def _param_tuple(task: TrajectoryTask) -> tuple:
    items = []
    for key in sorted(task.params.values):
        value = task.params.values[key]
        if isinstance(value, np.ndarray):
            items.append((key, tuple(value.tolist())))
        else:
            items.append((key, value))
    return tuple(items)


def _generate_worker(args) -> tuple:
    spec_dict, obs_dict, master_seed, stream, task_id = args
    spec = taskgen._spec_from_dict(spec_dict)
    obs_settings = ObservationSettings(**obs_dict)
    task, obs = _build_task(spec, obs_settings, master_seed, stream, task_id)
    return taskgen.task_to_record(task, obs)


def run_generate(config: ExperimentConfig, out_dir, jobs: int = 1) -> dict:
    """Sample disjoint train/test task streams and write both dataset files."""
    out_dir = Path(out_dir)
    write_run_stamp(out_dir, config, "generate")
    spec = config.scenario_spec()
    obs_settings = config.observations

    train: list = []
    seen_params: set = set()
    train_args = [(taskgen._spec_to_dict(spec), asdict(obs_settings), config.seed,
                   "train-task", i) for i in range(config.n_train)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_generate_worker, train_args, chunksize=4))
        train = [taskgen.task_from_record(r) for r in records]
    else:
        train = [_build_task(spec, obs_settings, config.seed, "train-task", i)
                 for i in range(config.n_train)]
    for task, _ in train:
        seen_params.add(_param_tuple(task))

    test: list = []
    for i in range(config.n_test):
        # Test instances must be new ODE instances: reject parameter collisions.
        for attempt in range(100):
            task, obs = _build_task(spec, obs_settings, config.seed, "test-task",
                                    config.n_train + i, attempt)
            if _param_tuple(task) not in seen_params:
                break
        else:
            raise ConfigError("could not sample a non-colliding test task")
        seen_params.add(_param_tuple(task))
        test.append((task, obs))

    summary = {"scenario": spec.scenario}
    for name, group in (("train", train), ("test", test)):
        with open(out_dir / f"{name}.jsonl", "w", encoding="utf-8") as f:
            taskgen.write_dataset(f, spec, group)
        with open(out_dir / f"{name}_observations.csv", "w", encoding="utf-8") as f:
            f.write(taskgen.export_observations_csv(group))
        ratios = [metrics.observed_ratio(len(obs), task.delta_t, 0.0, task.t_observe,
                                         task.topology.n) for task, obs in group]
        summary[name] = {"num_tasks": len(group),
                         "mean_observed_ratio": float(np.mean(ratios)) if ratios else 0.0}
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def read_dataset_file(path) -> tuple[ScenarioSpec, list]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return taskgen.read_dataset(f)
    except FileNotFoundError:
        raise DataFormatError(f"dataset file not found: {path}")


def _load_model_for(spec: ScenarioSpec, checkpoint_path):
    """Load a checkpoint and refuse to score it against a foreign scenario."""
    model, meta = load_model(checkpoint_path)
    scenario = meta.get("scenario")
    if scenario is not None and scenario != spec.scenario:
        raise ConfigError(
            f"checkpoint was trained on {scenario!r} but the dataset holds "
            f"{spec.scenario!r} tasks")
    if model.config.state_dim != STATE_DIMS[spec.scenario]:
        raise ConfigError(
            f"checkpoint state dim {model.config.state_dim} does not match "
            f"scenario {spec.scenario!r}")
    return model


# ---------------------------------------------------------------------------
# train

def run_train(config: ExperimentConfig, dataset_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    write_run_stamp(out_dir, config, "train")
    spec, tasks = read_dataset_file(dataset_path)
    model_config = config.model_config(spec)
    checkpoint_path = out_dir / "checkpoint.ndpk"

    def save_intermediate(model, epoch):
        save_model(out_dir / f"checkpoint_epoch{epoch + 1}.ndpk", model,
                   extra_meta={"scenario": spec.scenario, "epoch": epoch + 1})

    model, history = fit(tasks, model_config, config.train_settings(),
                         checkpoint_every=config.checkpoint_every,
                         checkpoint_fn=save_intermediate)
    save_model(checkpoint_path, model,
               extra_meta={"scenario": spec.scenario, "seed": config.seed})
    with open(out_dir / "loss.csv", "w", encoding="utf-8") as f:
        f.write("epoch,step,loss,learning_rate,beta\n")
        for rec in history:
            f.write(f"{rec.epoch},{rec.step},{rec.loss!r},{rec.learning_rate!r},{rec.beta!r}\n")
    final_loss = history[-1].loss if history else float("nan")
    return {"checkpoint": str(checkpoint_path), "steps": len(history),
            "final_loss": final_loss}


# ---------------------------------------------------------------------------
# evaluate

def evaluate_task(model: NDP4NDModel, task: TrajectoryTask, obs: ObservationSet,
                  mc_samples: int, seed: int, t_max: Optional[float] = None
                  ) -> tuple[TaskScore, np.ndarray, np.ndarray]:
    """Score one task: context = its observation set, queries = the full grid."""
    horizon = task.t_max if t_max is None else min(t_max, task.t_max)
    keep = task.truth.times <= horizon + 1e-9
    times = task.truth.times[keep]
    truth = task.truth.states[keep]
    graph = graph_tensors(task.topology)
    context = snapshot_tensors(obs, task.topology)
    mean, variance = predict_grid(model, graph, context, times.tolist(),
                                  mc_samples=mc_samples,
                                  generator=torch_generator(seed, "eval", task.id))
    interp = times <= task.t_observe + 1e-9
    extrap = ~interp
    score = TaskScore(
        task_id=task.id,
        mae_interp=metrics.mae(mean[interp], truth[interp]),
        mae_extrap=metrics.mae(mean[extrap], truth[extrap]) if extrap.any() else float("nan"),
        dtw_interp=metrics.trajectory_dtw(mean[interp], truth[interp]),
        dtw_extrap=metrics.trajectory_dtw(mean[extrap], truth[extrap]) if extrap.any() else float("nan"),
        observed_ratio=metrics.observed_ratio(len(obs), task.delta_t, 0.0,
                                              task.t_observe, task.topology.n),
    )
    return score, mean, variance


def _evaluate_chunk(args) -> list:
    checkpoint_path, dataset_path, indices, mc_samples, seed, t_max = args
    spec, tasks = read_dataset_file(dataset_path)
    model = _load_model_for(spec, checkpoint_path)
    out = []
    for idx in indices:
        task, obs = tasks[idx]
        score, _, _ = evaluate_task(model, task, obs, mc_samples, seed, t_max)
        out.append((idx, score))
    return out


def run_evaluate(config: ExperimentConfig, checkpoint_path, dataset_path,
                 out_dir, jobs: int = 1) -> EvalReport:
    out_dir = Path(out_dir)
    write_run_stamp(out_dir, config, "evaluate")
    start = time.perf_counter()
    spec, tasks = read_dataset_file(dataset_path)
    indices = list(range(len(tasks)))
    scores: list[Optional[TaskScore]] = [None] * len(tasks)
    if jobs > 1:
        chunks = [indices[i::jobs] for i in range(jobs)]
        args = [(str(checkpoint_path), str(dataset_path), chunk,
                 config.eval_mc_samples, config.seed, config.eval_t_max)
                for chunk in chunks if chunk]
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk_scores in pool.map(_evaluate_chunk, args):
                for idx, score in chunk_scores:
                    scores[idx] = score
    else:
        model = _load_model_for(spec, checkpoint_path)
        for idx in indices:
            task, obs = tasks[idx]
            score, _, _ = evaluate_task(model, task, obs, config.eval_mc_samples,
                                        config.seed, config.eval_t_max)
            scores[idx] = score
    report = EvalReport(scores=[s for s in scores if s is not None],
                        runtime_seconds=round(time.perf_counter() - start, 3))
    with open(out_dir / "report.csv", "w", encoding="utf-8") as f:
        f.write(report.to_csv())
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
    # Wall-clock timing lives outside the reproducible numeric outputs.
    with open(out_dir / "timing.json", "w", encoding="utf-8") as f:
        json.dump({"runtime_seconds": report.runtime_seconds}, f)
        f.write("\n")
    return report


# ---------------------------------------------------------------------------
# adapt: growing context on one task, no retraining

def nested_context_sets(task: TrajectoryTask, ratios: Sequence[float], seed: int,
                        noise_sigma: float = 0.0) -> list[ObservationSet]:
    """Nested observation sets at growing observed ratios (percent).

    Sampled once at the largest ratio; earlier stages are prefixes, so newly
    arrived data only ever extends the context.  Every stage keeps the full
    t=0 snapshot (stage sizes clamp there from below).
    """
    if not ratios or any(r <= 0 or r > 100 for r in ratios):
        raise ParameterError("ratios must be percentages in (0, 100]")
    slots = len(task.observable_times) * task.topology.n
    n = task.topology.n
    sizes = [min(slots, max(n, int(round(r / 100.0 * slots)))) for r in ratios]
    full = taskgen.sample_observations(task, max(sizes), noise_sigma, seed)
    snapshot = [o for o in full.observations if o.t == 0.0]
    rest = [o for o in full.observations if o.t != 0.0]
    order = np.random.default_rng(derive_seed(seed, "stage-order")).permutation(len(rest))
    stages = []
    for size in sizes:
        chosen = [rest[int(i)] for i in sorted(order[: max(0, size - n)].tolist())]
        stages.append(ObservationSet(
            observations=taskgen._sorted_observations(snapshot + chosen), role="context"))
    return stages


def run_adapt(config: ExperimentConfig, checkpoint_path, dataset_path, out_dir,
              task_id: int = 0, ratios: Sequence[float] = (1.0, 5.0, 20.0)) -> list[dict]:
    out_dir = Path(out_dir)
    write_run_stamp(out_dir, config, "adapt")
    spec, tasks = read_dataset_file(dataset_path)
    model = _load_model_for(spec, checkpoint_path)
    by_id = {task.id: (task, obs) for task, obs in tasks}
    if task_id not in by_id:
        raise DataFormatError(f"task id {task_id} not present in dataset")
    task, _ = by_id[task_id]
    stages = nested_context_sets(task, ratios, derive_seed(config.seed, "adapt", task_id),
                                 noise_sigma=config.observations.noise_sigma)
    graph = graph_tensors(task.topology)
    times = task.truth.times
    rows = []
    for k, (ratio, stage_obs) in enumerate(zip(ratios, stages)):
        context = snapshot_tensors(stage_obs, task.topology)
        mean, variance = predict_grid(
            model, graph, context, times.tolist(), mc_samples=config.eval_mc_samples,
            generator=torch_generator(config.seed, "adapt-predict", task_id, k))
        stage_path = out_dir / f"stage_{k}_predictions.csv"
        _write_prediction_csv(stage_path, times, mean, variance)
        rows.append({
            "stage": k,
            "ratio": ratio,
            "context_size": len(stage_obs),
            "mae": metrics.mae(mean, task.truth.states),
            "mean_variance": float(np.mean(variance)),
        })
    with open(out_dir / "adapt_stages.csv", "w", encoding="utf-8") as f:
        f.write("stage,ratio,context_size,mae,mean_variance\n")
        for row in rows:
            f.write(f"{row['stage']},{row['ratio']!r},{row['context_size']},"
                    f"{row['mae']!r},{row['mean_variance']!r}\n")
    return rows


def _write_prediction_csv(path, times, mean, variance) -> None:
    t_count, n, d = mean.shape
    with open(path, "w", encoding="utf-8") as f:
        f.write("t,node,dim,mean,variance\n")
        for ti in range(t_count):
            for l in range(n):
                for k in range(d):
                    f.write(f"{float(times[ti])!r},{l},{k},"
                            f"{mean[ti, l, k]!r},{variance[ti, l, k]!r}\n")


# ---------------------------------------------------------------------------
# sweep: MAE versus observed ratio or noise level

def run_sweep(config: ExperimentConfig, checkpoint_path, dataset_path, out_dir,
              axis: str, grid: Sequence[float]) -> list[dict]:
    if axis not in ("observed_ratio", "noise_sigma"):
        raise ConfigError(f"sweep axis must be observed_ratio or noise_sigma, got {axis!r}")
    if not grid:
        raise ConfigError("sweep grid must be nonempty")
    out_dir = Path(out_dir)
    write_run_stamp(out_dir, config, "sweep")
    spec, tasks = read_dataset_file(dataset_path)
    model = _load_model_for(spec, checkpoint_path)
    detail = []
    summary = []
    for value in grid:
        maes = []
        for task, _ in tasks:
            # One observation stream per task: sweeping noise rescales the same
            # disturbances; sweeping the ratio grows/shrinks the same lattice draw.
            obs_seed = derive_seed(config.seed, "sweep-obs", task.id)
            if axis == "noise_sigma":
                count = config.observations.count_for(task)
                obs = taskgen.sample_observations(task, count, float(value), obs_seed,
                                                  noisy_initial=config.observations.noisy_initial)
            else:
                slots = len(task.observable_times) * task.topology.n
                count = min(slots, max(task.topology.n, int(round(value / 100.0 * slots))))
                obs = taskgen.sample_observations(task, count,
                                                  config.observations.noise_sigma, obs_seed,
                                                  noisy_initial=config.observations.noisy_initial)
            score, mean, _ = evaluate_task(model, task, obs, config.eval_mc_samples,
                                           derive_seed(config.seed, "sweep-eval", task.id))
            maes.append(metrics.mae(mean, task.truth.states))
            detail.append({"axis_value": float(value), "task_id": task.id,
                           "mae_interp": score.mae_interp, "mae_extrap": score.mae_extrap})
        summary.append({"axis_value": float(value),
                        "mae_median": float(np.median(maes)),
                        "mae_mean": float(np.mean(maes)),
                        "mae_std": float(np.std(maes))})
    with open(out_dir / "sweep.csv", "w", encoding="utf-8") as f:
        f.write(f"{axis},mae_median,mae_mean,mae_std\n")
        for row in summary:
            f.write(f"{row['axis_value']!r},{row['mae_median']!r},"
                    f"{row['mae_mean']!r},{row['mae_std']!r}\n")
    with open(out_dir / "sweep_tasks.csv", "w", encoding="utf-8") as f:
        f.write(f"{axis},task_id,mae_interp,mae_extrap\n")
        for row in detail:
            f.write(f"{row['axis_value']!r},{row['task_id']},"
                    f"{row['mae_interp']!r},{row['mae_extrap']!r}\n")
    return summary


# ---------------------------------------------------------------------------
# Baselines used by the acceptance suite (not CLI commands).

def context_mean_prediction(obs: ObservationSet, times: np.ndarray, n: int
                            ) -> np.ndarray:
    """Constant prediction: per-dimension mean of the context observations."""
    values = np.stack([o.x for o in obs.observations])
    mean = values.mean(axis=0)
    return np.broadcast_to(mean, (len(times), n, mean.shape[0])).copy()
