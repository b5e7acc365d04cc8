"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criterion 5 trains three desk-scale models and dominates the runtime
(roughly 25 minutes on a single CPU core); run with `pytest -s` to watch
the per-criterion lines appear.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from ndp4nd import cli, experiment, metrics
from ndp4nd.dynamics import DynamicsParams, SolverConfig, integrate
from ndp4nd.graph import TopologySpec, generate_topology
from ndp4nd.model import NDP4NDModel, task_tensors
from ndp4nd.neural import GatLayer, Mlp, gaussian_kl, gaussian_nll, grad_check, reparameterize
from ndp4nd.seeding import derive_seed, torch_generator
from ndp4nd.taskgen import sample_observations, sample_task, scenario_preset, split_context_target

from conftest import empty_topology, tiny_model_config
from test_model import jitter_parameters

DATA_SEED = 1000
TRAIN_SEEDS = (0, 1, 2)


def report(num, name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\n[acceptance] criterion {num} ({name}): {status} -- {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# --- shared desk-scale fixtures (generated/trained once, reused by 5/6/7) ----

@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_data")
    config = experiment.experiment_preset("mutualistic_desk", seed=DATA_SEED)
    start = time.perf_counter()
    summary = experiment.run_generate(config, out)
    return {"config": config, "dir": out, "summary": summary,
            "seconds": time.perf_counter() - start}


@pytest.fixture(scope="module")
def desk_models(desk_data, tmp_path_factory):
    runs = []
    for seed in TRAIN_SEEDS:
        out = tmp_path_factory.mktemp(f"desk_train_{seed}")
        config = experiment.experiment_preset("mutualistic_desk", seed=seed)
        start = time.perf_counter()
        result = experiment.run_train(config, desk_data["dir"] / "train.jsonl", out)
        runs.append({"seed": seed, "config": config,
                     "checkpoint": Path(result["checkpoint"]),
                     "seconds": time.perf_counter() - start})
    return runs


# --- criterion 1: ground-truth fidelity ---------------------------------------

def test_criterion_1_ground_truth_fidelity():
    start = time.perf_counter()
    top = generate_topology(TopologySpec(kind="power_law", n=60, attach_count=2), seed=3)
    rng = np.random.default_rng(5)
    solver = SolverConfig(method="dopri5_adaptive", rtol=1e-8, atol=1e-8)
    worst_drift = 0.0
    for scenario, params, d in (
            ("sis", DynamicsParams("sis", dict(b=0.12, r=0.25)), 2),
            ("sir", DynamicsParams("sir", dict(b=0.12, r=0.25)), 3),
            ("seis", DynamicsParams("seis", dict(b=1.2, r=0.25, c=0.08)), 3)):
        i0 = rng.uniform(1e-6, 1e-3, size=60)
        x0 = np.zeros((60, d))
        x0[:, 0] = 1.0 - i0
        x0[:, -1 if scenario == "seis" else 1] = i0
        traj = integrate(scenario, params, top, x0, t_end=50.0, grid_step=1.0,
                         solver=solver)
        sums = traj.states.sum(axis=2)
        worst_drift = max(worst_drift, float(np.abs(sums - sums[0]).max()))

    def rk4_err(step):
        cfg = SolverConfig(method="rk4_fixed", step=step)
        traj = integrate("mutualistic",
                         DynamicsParams("mutualistic",
                                        dict(b=0.1, c=1.0, d=5.0, e=0.9, h=0.1, k=5.0)),
                         empty_topology(1), np.array([[1.0]]), t_end=2.0,
                         grid_step=2.0, solver=cfg,
                         rhs_fn=lambda state, t: -state)
        return abs(traj.states[-1, 0, 0] - np.exp(-2.0))

    ratio = rk4_err(0.2) / rk4_err(0.1)
    elapsed = time.perf_counter() - start
    ok = worst_drift < 1e-6 and 12.0 <= ratio <= 20.0 and elapsed < 10.0
    report(1, "ground-truth fidelity", ok,
           f"max compartment drift {worst_drift:.2e} (<1e-6), "
           f"rk4 halving ratio {ratio:.1f} (in [12, 20]), {elapsed:.1f}s (<10s)")


# --- criterion 2: gradient correctness ----------------------------------------

def test_criterion_2_gradient_correctness():
    start = time.perf_counter()
    spec = scenario_preset("mutualistic", node_range=(3, 3), t_observe=5.0,
                           t_max=10.0, topology_kinds=("random",),
                           topology_params={"edge_prob": 0.7})
    task = sample_task(spec, seed=42, task_id=0)
    obs = sample_observations(task, count=8, noise_sigma=0.0, seed=3)
    context, target = split_context_target(obs, 0.6, seed=4)
    bundle = task_tensors(task, context, target)
    model = NDP4NDModel(tiny_model_config(), seed=0)
    jitter_parameters(model)
    elbo_err = grad_check(
        lambda: model.elbo_loss([bundle], beta=1.0,
                                generator=torch_generator(3, "fd")),
        list(model.parameters()), h=1e-5)

    gen = torch_generator(0, "acc2")
    mlp = Mlp([2, 5, 2], gen)
    x = torch.randn(4, 2, generator=gen, dtype=torch.float64)
    y = torch.randn(4, 2, generator=gen, dtype=torch.float64)
    mlp_err = grad_check(
        lambda: gaussian_nll(y, mlp(x), torch.ones_like(y)), list(mlp.parameters()))

    gat = GatLayer(3, heads=2, head_dim=2, generator=gen)
    adj = (np.random.default_rng(1).random((4, 4)) < 0.6).astype(float)
    np.fill_diagonal(adj, 0.0)
    from ndp4nd.neural import attention_edges
    dst, src = attention_edges(adj)
    xg = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    gat_err = grad_check(lambda: (gat(xg, dst, src) ** 2).sum(), list(gat.parameters()))

    mu = torch.randn(3, generator=gen, dtype=torch.float64).requires_grad_(True)
    raw = torch.randn(3, generator=gen, dtype=torch.float64).requires_grad_(True)
    eps = torch.randn(3, generator=gen, dtype=torch.float64)

    def vi_loss():
        sigma = 0.1 + 0.9 * torch.sigmoid(raw)
        sample = reparameterize(mu, sigma, eps)
        return (sample ** 2).sum() + gaussian_kl(mu, sigma, torch.zeros_like(mu),
                                                 torch.ones_like(sigma))

    vi_err = grad_check(vi_loss, [mu, raw])
    elapsed = time.perf_counter() - start
    module_err = max(mlp_err, gat_err, vi_err)
    ok = elbo_err < 1e-3 and module_err < 1e-4 and elapsed < 60.0
    report(2, "gradient correctness", ok,
           f"elbo FD error {elbo_err:.2e} (<1e-3), module FD error "
           f"{module_err:.2e} (<1e-4), {elapsed:.1f}s (<60s)")


# --- criterion 3: stochastic-process laws --------------------------------------

def test_criterion_3_stochastic_process_laws(micro_task, micro_bundle):
    model = NDP4NDModel(tiny_model_config(), seed=1)
    rng = np.random.default_rng(99)
    graph, context = micro_bundle.graph, micro_bundle.context_snaps
    exchange_ok = consistency_ok = 0
    for case in range(100):
        count = int(rng.integers(2, 7))
        queries = [(float(np.round(rng.uniform(0.0, micro_task.t_max), 3)),
                    int(rng.integers(0, 3))) for _ in range(count)]
        gen_key = ("laws", case)
        base = model.predict(graph, context, queries, mc_samples=3,
                             generator=torch_generator(*gen_key))
        perm = rng.permutation(count)
        shuffled = model.predict(graph, context, [queries[i] for i in perm],
                                 mc_samples=3, generator=torch_generator(*gen_key))
        if (np.array_equal(shuffled.mean, base.mean[perm])
                and np.array_equal(shuffled.variance, base.variance[perm])):
            exchange_ok += 1
        keep = sorted(rng.choice(count, size=int(rng.integers(1, count + 1)),
                                 replace=False).tolist())
        marginal = model.predict(graph, context, [queries[i] for i in keep],
                                 mc_samples=3, generator=torch_generator(*gen_key))
        if (np.array_equal(marginal.mean, base.mean[keep])
                and np.array_equal(marginal.variance, base.variance[keep])):
            consistency_ok += 1
    ok = exchange_ok == 100 and consistency_ok == 100
    report(3, "stochastic-process laws", ok,
           f"exchangeability exact on {exchange_ok}/100 query sets, "
           f"consistency exact on {consistency_ok}/100 (bit-identical)")


# --- criterion 4: oracle equivalence --------------------------------------------

def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(7)
    exact_matches = 0
    for _ in range(500):
        la, lb = rng.integers(1, 33, size=2)
        a, b = rng.normal(size=int(la)), rng.normal(size=int(lb))
        radius = int(max(la, lb))
        if metrics.fastdtw(a, b, radius=radius) == metrics.dtw_exact(a, b):
            exact_matches += 1
    ratio = metrics.observed_ratio(351, 1.0, 0.0, 50.0, 225)
    ratio_ok = round(ratio, 2) == 3.06
    ok = exact_matches == 500 and ratio_ok
    report(4, "oracle equivalence", ok,
           f"fastdtw == dtw_exact on {exact_matches}/500 pairs, "
           f"observed ratio {ratio:.4f}% rounds to 3.06%")


# --- criterion 5: desk-scale learning --------------------------------------------

def test_criterion_5_desk_scale_learning(desk_data, desk_models, tmp_path):
    start = time.perf_counter()
    test_path = desk_data["dir"] / "test.jsonl"
    spec, test_tasks = experiment.read_dataset_file(test_path)

    ratio = desk_data["summary"]["test"]["mean_observed_ratio"]
    trained_i, trained_e, untrained_i, untrained_e = [], [], [], []
    for run in desk_models:
        rep = experiment.run_evaluate(run["config"], run["checkpoint"], test_path,
                                      tmp_path / f"eval_{run['seed']}")
        agg = rep.aggregate()
        trained_i.append(agg["mae_interp"]["mean"])
        trained_e.append(agg["mae_extrap"]["mean"])
        untrained = NDP4NDModel(run["config"].model_config(spec), seed=run["seed"])
        scores = [experiment.evaluate_task(untrained, task, obs,
                                           run["config"].eval_mc_samples,
                                           run["seed"])[0]
                  for task, obs in test_tasks]
        untrained_i.append(float(np.mean([s.mae_interp for s in scores])))
        untrained_e.append(float(np.mean([s.mae_extrap for s in scores])))

    cm_i, cm_e = [], []
    for task, obs in test_tasks:
        pred = experiment.context_mean_prediction(obs, task.truth.times,
                                                  task.topology.n)
        interp = task.truth.times <= task.t_observe + 1e-9
        cm_i.append(metrics.mae(pred[interp], task.truth.states[interp]))
        cm_e.append(metrics.mae(pred[~interp], task.truth.states[~interp]))
    cmean_i, cmean_e = float(np.mean(cm_i)), float(np.mean(cm_e))

    med_ti, med_te = np.median(trained_i), np.median(trained_e)
    med_ui, med_ue = np.median(untrained_i), np.median(untrained_e)
    total = (desk_data["seconds"] + sum(r["seconds"] for r in desk_models)
             + (time.perf_counter() - start))
    margins = (med_ui / med_ti, med_ue / med_te, cmean_i / med_ti, cmean_e / med_te)
    ok = (abs(ratio - 6.0) < 0.5 and all(m >= 2.0 for m in margins)
          and total < 1800.0)
    report(5, "desk-scale learning", ok,
           f"test ratio {ratio:.2f}%, median trained MAE interp/extrap "
           f"{med_ti:.3f}/{med_te:.3f} vs untrained {med_ui:.3f}/{med_ue:.3f} "
           f"and context-mean {cmean_i:.3f}/{cmean_e:.3f} "
           f"(margins {', '.join(f'{m:.1f}x' for m in margins)}, need >= 2x); "
           f"runtime {total:.0f}s (<1800s)")


# --- criterion 6: data adaptability -----------------------------------------------

def test_criterion_6_data_adaptability(desk_data, desk_models, tmp_path):
    run = desk_models[0]
    config = experiment.experiment_preset("mutualistic_desk", seed=run["seed"],
                                          eval_mc_samples=40)
    _, test_tasks = experiment.read_dataset_file(desk_data["dir"] / "test.jsonl")
    held_out = test_tasks[0][0].id
    rows = experiment.run_adapt(config, run["checkpoint"],
                                desk_data["dir"] / "test.jsonl",
                                tmp_path / "adapt", task_id=held_out,
                                ratios=(1.0, 5.0, 20.0))
    maes = [r["mae"] for r in rows]
    z2 = [r["mean_variance"] for r in rows]
    mae_monotone = all(maes[k + 1] <= maes[k] * 1.05 for k in range(2))
    mae_final = maes[-1] <= 0.8 * maes[0]
    z2_monotone = all(z2[k + 1] <= 1.05 * z2[k] for k in range(2))
    ok = mae_monotone and mae_final and z2_monotone
    report(6, "data adaptability", ok,
           f"context 1%->5%->20% on task {held_out} without retraining: MAE "
           f"{' -> '.join(f'{m:.3f}' for m in maes)} (final/initial "
           f"{maes[-1] / maes[0]:.2f} <= 0.8), mean Z2 "
           f"{' -> '.join(f'{v:.4f}' for v in z2)} (non-increasing within 5%)")


# --- criterion 7: noise robustness ---------------------------------------------------

def test_criterion_7_noise_robustness(desk_data, desk_models, tmp_path):
    run = desk_models[0]
    rows = experiment.run_sweep(run["config"], run["checkpoint"],
                                desk_data["dir"] / "test.jsonl", tmp_path / "sweep",
                                axis="noise_sigma", grid=(0.0, 0.5, 1.0, 2.0))
    medians = [r["mae_median"] for r in rows]
    ok = all(medians[k + 1] >= medians[k] for k in range(3))
    report(7, "noise robustness", ok,
           "median MAE over 20 test tasks at sigma 0/0.5/1/2: "
           + " -> ".join(f"{m:.3f}" for m in medians) + " (non-decreasing)")


# --- criterion 8: determinism ----------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "preset": "mutualistic_desk", "seed": 11, "n_train": 3, "n_test": 2,
        "epochs": 1, "batch_size": 2,
        "scenario_overrides": {"topology_kinds": ["grid"],
                               "topology_params": {"rows": 3, "cols": 3},
                               "t_observe": 10.0, "t_max": 20.0},
        "observations": {"target_ratio": 12.0, "noise_sigma": 0.5,
                         "noisy_initial": False, "count": None},
        "eval_mc_samples": 2,
    }))

    compared = []

    def run_twice(command, files, extra):
        dirs = []
        for attempt in ("a", "b"):
            out = tmp_path / f"{command}_{attempt}"
            args = [command, "--config", str(config_path), "--out", str(out)] + extra(tmp_path / f"{command}_a")
            assert cli.main(args) == 0
            dirs.append(out)
        for fname in files:
            left = (dirs[0] / fname).read_bytes()
            right = (dirs[1] / fname).read_bytes()
            compared.append((f"{command}/{fname}", left == right))

    run_twice("generate", ("train.jsonl", "test.jsonl", "summary.json"), lambda _: [])
    data = tmp_path / "generate_a"
    run_twice("train", ("checkpoint.ndpk", "loss.csv"),
              lambda _: ["--dataset", str(data / "train.jsonl")])
    ckpt = tmp_path / "train_a" / "checkpoint.ndpk"
    run_twice("evaluate", ("report.csv", "report.json"),
              lambda _: ["--checkpoint", str(ckpt), "--dataset", str(data / "test.jsonl")])
    run_twice("adapt", ("adapt_stages.csv", "stage_0_predictions.csv",
                        "stage_2_predictions.csv"),
              lambda _: ["--checkpoint", str(ckpt), "--dataset", str(data / "test.jsonl"),
                         "--ratios", "2", "10", "25"])
    run_twice("sweep", ("sweep.csv", "sweep_tasks.csv"),
              lambda _: ["--checkpoint", str(ckpt), "--dataset", str(data / "test.jsonl"),
                         "--axis", "noise_sigma", "--grid", "0", "1"])
    bad = [name for name, same in compared if not same]
    ok = not bad
    report(8, "determinism", ok,
           f"{len(compared)} numeric artifacts byte-identical across re-runs"
           + (f"; mismatches: {bad}" if bad else ""))
