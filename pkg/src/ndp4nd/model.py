"""The NDP4ND model: encode sparse graph observations into a global latent
vector and latent initial states, propagate them through a neural network
ODE built from self- and interaction-dynamics nets, and decode per-query
Gaussians.

Conventions fixed here:
  * Times entering the time encoder, the decoder, and the latent ODE clock
    are normalized by t_scale (the scenario's maximum observed time), so
    every scenario trains on the same [0, ~2] horizon.
  * The latent ODE uses fixed-step RK4 on the uniform normalized grid.
    Off-grid query times are reached by a single probe step that branches
    off the main integration line, so the value at one query never depends
    on which other queries are requested.
  * predict decodes queries one at a time; identical inputs therefore take
    identical kernel paths and results are reproducible bit-for-bit under
    query permutation or query-set nesting.
  * Disjoint node sets (batch tasks, Monte-Carlo samples) are evolved as one
    block-diagonal system, which amortizes per-op overhead without coupling
    the blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import taskgen
from .errors import ConfigError, NumericalError, ParameterError
from .graph import Topology
from .neural import (
    DTYPE,
    LEAKY_SLOPE,
    AdamState,
    GatLayer,
    Mlp,
    attention_edges,
    gaussian_kl,
    gaussian_nll,
    load_named_tensors,
    optimizer_step,
    reparameterize,
    save_named_tensors,
)
from .seeding import derive_seed, numpy_rng, torch_generator
from .taskgen import ObservationSet, TrajectoryTask

_ON_GRID_TOL = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and inference knobs for one per-scenario model."""

    state_dim: int
    dim_l: int = 20            # latent state per node
    dim_z: int = 16            # global latent vector
    dim_r: int = 32            # deterministic context path
    hidden: int = 20           # MLP hidden width
    time_dim: int = 20         # time-embedding width
    gat_heads: int = 8
    gat_head_dim: int = 16
    gat_layers: int = 2
    beta: float = 1.0          # KL weight
    mc_samples: int = 20       # J, prediction-time samples
    t_scale: float = 1.0       # time normalization constant (scenario T_o)
    latent_step: float = 0.5   # latent RK4 step in raw time units (delta_t / 2)

    def __post_init__(self):
        dims = (self.state_dim, self.dim_l, self.dim_z, self.dim_r, self.hidden,
                self.time_dim, self.gat_heads, self.gat_head_dim, self.gat_layers)
        if any(d < 1 for d in dims):
            raise ConfigError(f"all model dimensions must be >= 1, got {self}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.t_scale <= 0 or self.latent_step <= 0:
            raise ConfigError("t_scale and latent_step must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    @classmethod
    def for_scenario(cls, spec: taskgen.ScenarioSpec, **overrides) -> "ModelConfig":
        from .dynamics import STATE_DIMS
        base = dict(state_dim=STATE_DIMS[spec.scenario], t_scale=spec.t_observe,
                    latent_step=spec.delta_t / 2.0)
        base.update(overrides)
        return cls(**base)


@dataclass
class GraphTensors:
    """Topology in the index forms the model consumes.

    gat_dst/gat_src include self-loops (attention neighborhoods); edge_dst/
    edge_src/edge_weight are the bare weighted edges driving the latent ODE
    interaction term, with edge (l <- j) meaning A[l, j] > 0.
    """

    n: int
    gat_dst: torch.Tensor
    gat_src: torch.Tensor
    edge_dst: torch.Tensor
    edge_src: torch.Tensor
    edge_weight: torch.Tensor


def graph_tensors(topology: Topology) -> GraphTensors:
    adj = topology.adjacency
    gat_dst, gat_src = attention_edges(adj)
    dst, src = np.nonzero(adj > 0)
    return GraphTensors(
        n=topology.n,
        gat_dst=gat_dst,
        gat_src=gat_src,
        edge_dst=torch.as_tensor(dst, dtype=torch.long),
        edge_src=torch.as_tensor(src, dtype=torch.long),
        edge_weight=torch.as_tensor(adj[dst, src], dtype=DTYPE),
    )


def merge_graphs(graphs: Sequence[GraphTensors]) -> tuple[GraphTensors, torch.Tensor]:
    """Block-diagonal union of disjoint graphs.

    Returns the merged graph plus a (total_nodes,) block index mapping each
    node to its source graph.
    """
    edge_dst, edge_src, edge_w, blocks = [], [], [], []
    offset = 0
    for b, g in enumerate(graphs):
        edge_dst.append(g.edge_dst + offset)
        edge_src.append(g.edge_src + offset)
        edge_w.append(g.edge_weight)
        blocks.append(torch.full((g.n,), b, dtype=torch.long))
        offset += g.n
    merged = GraphTensors(
        n=offset,
        gat_dst=torch.empty(0, dtype=torch.long),   # attention is never batched this way
        gat_src=torch.empty(0, dtype=torch.long),
        edge_dst=torch.cat(edge_dst),
        edge_src=torch.cat(edge_src),
        edge_weight=torch.cat(edge_w),
    )
    return merged, torch.cat(blocks)


@dataclass
class SnapshotTensors:
    """An observation set grouped by timestamp, ready for the encoder."""

    times: torch.Tensor       # (K,) raw times
    features: torch.Tensor    # (K, n, 2d): zero-filled states, then masks
    x0: torch.Tensor          # (n, d) observed initial snapshot


def snapshot_tensors(obs: ObservationSet, topology: Topology) -> SnapshotTensors:
    snaps = taskgen.snapshots(obs, topology)
    times = torch.tensor([t for t, _ in snaps], dtype=DTYPE)
    feats = torch.stack([
        torch.cat([torch.as_tensor(s.x, dtype=DTYPE),
                   torch.as_tensor(s.mask, dtype=DTYPE)], dim=-1)
        for _, s in snaps
    ])
    x0 = torch.as_tensor(obs.initial_states(topology.n), dtype=DTYPE)
    return SnapshotTensors(times=times, features=feats, x0=x0)


class _OdeEngine:
    """Latent-ODE right-hand side specialized for one evolve call.

    The conditioning vector enters only the first layers of the self and
    interaction nets, so its contribution is precomputed once per evolve
    instead of being concatenated at every solver stage.
    """

    def __init__(self, model: "NDP4NDModel", z_rows: torch.Tensor,
                 node_block: torch.Tensor, graph: GraphTensors):
        c = model.config
        self.graph = graph
        self.hidden = c.hidden
        s_w0 = model.self_net.weights[0]
        i_w0 = model.inter_net.weights[0]
        self.w_latent = torch.cat([s_w0[:, : c.dim_l],
                                   i_w0[:, : c.dim_l],
                                   i_w0[:, c.dim_l: 2 * c.dim_l]])
        z_node = z_rows.index_select(0, node_block)
        self.s_bias = torch.nn.functional.linear(
            z_node, s_w0[:, c.dim_l:], model.self_net.biases[0])
        self.s_rest = list(zip(model.self_net.weights[1:], model.self_net.biases[1:]))
        if graph.edge_dst.numel() > 0:
            z_edge = z_rows.index_select(0, node_block.index_select(0, graph.edge_dst))
            self.i_bias = torch.nn.functional.linear(
                z_edge, i_w0[:, 2 * c.dim_l:], model.inter_net.biases[0])
            self.i_rest = list(zip(model.inter_net.weights[1:], model.inter_net.biases[1:]))

    def rhs(self, latent: torch.Tensor) -> torch.Tensor:
        hid = self.hidden
        proj = latent @ self.w_latent.T            # self | inter-dst | inter-src
        h = proj[:, :hid] + self.s_bias
        for w, b in self.s_rest:
            h = torch.nn.functional.linear(
                torch.nn.functional.leaky_relu(h, LEAKY_SLOPE), w, b)
        out = h
        graph = self.graph
        if graph.edge_dst.numel() > 0:
            h = (proj[:, hid: 2 * hid].index_select(0, graph.edge_dst)
                 + proj[:, 2 * hid:].index_select(0, graph.edge_src) + self.i_bias)
            for w, b in self.i_rest:
                h = torch.nn.functional.linear(
                    torch.nn.functional.leaky_relu(h, LEAKY_SLOPE), w, b)
            out = out.index_add(0, graph.edge_dst, h * graph.edge_weight.unsqueeze(-1))
        return out

    def rk4_step(self, latent: torch.Tensor, h: float) -> torch.Tensor:
        k1 = self.rhs(latent)
        k2 = self.rhs(torch.add(latent, k1, alpha=0.5 * h))
        k3 = self.rhs(torch.add(latent, k2, alpha=0.5 * h))
        k4 = self.rhs(torch.add(latent, k3, alpha=h))
        combo = torch.add(torch.add(k1, k4), torch.add(k2, k3), alpha=2.0)
        return torch.add(latent, combo, alpha=h / 6.0)


_MARCH_CHUNK = 8
_EMBED_CHUNK = 64
_CHECKPOINT_BYTES = 400 * 1024 * 1024


def _march(engine: _OdeEngine, latent0: torch.Tensor, last_index: int,
           needed: set, h: float) -> dict:
    """Fixed-step march to last_index, returning the states listed in needed.

    Small systems keep the full autograd graph.  When the estimated graph
    would not stay cache/RAM friendly, the march runs in checkpointed
    chunks: only requested states stay live and chunk interiors are
    recomputed during backward.  Gradients are exact either way because the
    recomputation replays identical operations.
    """
    out = {0: latent0}
    state = latent0
    rows = max(latent0.shape[0], engine.graph.edge_dst.numel())
    graph_bytes = last_index * 4 * 8 * 8 * rows * latent0.shape[-1]
    if (not torch.is_grad_enabled() or not latent0.requires_grad
            or graph_bytes <= _CHECKPOINT_BYTES):
        for k in range(1, last_index + 1):
            state = engine.rk4_step(state, h)
            if k in needed:
                out[k] = state
        return out
    k = 0
    while k < last_index:
        end = min(k + _MARCH_CHUNK, last_index)
        keep = tuple(i for i in range(k + 1, end + 1) if i in needed or i == end)

        def chunk(s, start=k, stop=end, keep=keep):
            cur = s
            outs = []
            for i in range(start + 1, stop + 1):
                cur = engine.rk4_step(cur, h)
                if i in keep:
                    outs.append(cur)
            return tuple(outs)

        results = torch.utils.checkpoint.checkpoint(chunk, state, use_reentrant=False)
        for i, tensor in zip(keep, results):
            if i in needed:
                out[i] = tensor
        state = results[-1]
        k = end
    return out


class NDP4NDModel(nn.Module):
    """All learnable components; submodule names follow their function."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch_generator(seed, "model-init")
        c = config
        d, hid = c.state_dim, c.hidden
        gat_out = c.gat_heads * c.gat_head_dim
        z_tilde_dim = c.dim_z + c.dim_r
        self.enc_t = Mlp([1, hid, c.time_dim], gen)
        self.enc_x = Mlp([2 * d, hid, hid], gen)
        layers = [GatLayer(hid, c.gat_heads, c.gat_head_dim, gen)]
        for _ in range(c.gat_layers - 1):
            layers.append(GatLayer(gat_out, c.gat_heads, c.gat_head_dim, gen))
        self.enc_g = nn.ModuleList(layers)
        self.enc_r = Mlp([c.time_dim + gat_out, hid, hid, c.dim_r], gen)
        self.enc_z = Mlp([c.dim_r, hid, hid], gen)
        self.enc_mu_z = Mlp([hid, hid, c.dim_z], gen)
        self.enc_sigma_z = Mlp([hid, hid, c.dim_z], gen)
        self.enc_l0 = Mlp([d, hid, hid], gen)
        self.enc_mu_l0 = Mlp([hid, hid, c.dim_l], gen)
        self.enc_sigma_l0 = Mlp([hid, hid, c.dim_l], gen)
        self.self_net = Mlp([c.dim_l + z_tilde_dim, hid, hid, c.dim_l], gen)
        self.inter_net = Mlp([2 * c.dim_l + z_tilde_dim, hid, hid, c.dim_l], gen)
        self.dec_l = Mlp([c.dim_l + 1 + z_tilde_dim, hid, hid, hid], gen)
        self.dec_mu_x = Mlp([hid, hid, d], gen)
        self.dec_sigma_x = Mlp([hid, hid, d], gen)

    # -- encoders -----------------------------------------------------------

    def _embed_groups(self, groups: Sequence[tuple[GraphTensors, SnapshotTensors]]
                      ) -> torch.Tensor:
        """Aggregated representation r per (graph, snapshots) group, shape (G, dim_r).

        Snapshots run through the GAT stack in fixed-size chunks so the big
        per-edge message tensors stay cache-resident; chunk boundaries depend
        only on snapshot counts, so results are reproducible.
        """
        pooled, times, group_of_snap = [], [], []
        for g, (graph, snaps) in enumerate(groups):
            k_count = snaps.times.shape[0]
            times.append(snaps.times)
            group_of_snap.append(torch.full((k_count,), g, dtype=torch.long))
            for k0 in range(0, k_count, _EMBED_CHUNK):
                h = self.enc_x(snaps.features[k0: k0 + _EMBED_CHUNK])
                for i, layer in enumerate(self.enc_g):
                    if i > 0:
                        h = torch.nn.functional.leaky_relu(h, LEAKY_SLOPE)
                    h = layer(h, graph.gat_dst, graph.gat_src)
                pooled.append(h.mean(dim=-2))
        group_of_snap = torch.cat(group_of_snap)
        tau = (torch.cat(times) / self.config.t_scale).unsqueeze(-1)
        r_k = self.enc_r(torch.cat([self.enc_t(tau), torch.cat(pooled)], dim=-1))
        out = torch.zeros((len(groups), r_k.shape[-1]), dtype=DTYPE)
        counts = torch.zeros(len(groups), dtype=DTYPE).index_add(
            0, group_of_snap, torch.ones(group_of_snap.shape[0], dtype=DTYPE))
        return out.index_add(0, group_of_snap, r_k) / counts.unsqueeze(-1)

    def _latent_heads(self, r: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h_z = self.enc_z(r)
        mu_z = self.enc_mu_z(h_z)
        sigma_z = 0.1 + 0.9 * torch.sigmoid(self.enc_sigma_z(h_z))
        return mu_z, sigma_z

    def encode_context(self, graph: GraphTensors, snaps: SnapshotTensors
                       ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Aggregate snapshots into (r, mu_z, sigma_z).

        Per snapshot: time embedding plus node-mean of the GAT stack; the
        snapshot representations are mean-pooled, which makes the result
        invariant to observation and snapshot ordering.
        """
        if snaps.times.numel() == 0:
            raise ParameterError("encode_context requires at least one snapshot")
        r = self._embed_groups([(graph, snaps)])[0]
        mu_z, sigma_z = self._latent_heads(r)
        return r, mu_z, sigma_z

    def encode_initial(self, x0: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-node factorized Gaussian over latent initial states."""
        h = self.enc_l0(x0)
        mu = self.enc_mu_l0(h)
        sigma = 0.1 + 0.9 * torch.sigmoid(self.enc_sigma_l0(h))
        return mu, sigma

    # -- latent dynamics ----------------------------------------------------

    def latent_rhs(self, latent: torch.Tensor, z_tilde: torch.Tensor,
                   graph: GraphTensors) -> torch.Tensor:
        """dL_l = self(L_l, z) + sum_j A[l,j] * interaction(L_l, L_j, z).

        Reference formulation; the solver uses the algebraically equal
        _OdeEngine with the z-dependent terms hoisted out of the step loop.
        """
        n = latent.shape[0]
        zt = z_tilde.unsqueeze(0).expand(n, -1)
        out = self.self_net(torch.cat([latent, zt], dim=-1))
        if graph.edge_dst.numel() > 0:
            zt_e = z_tilde.unsqueeze(0).expand(graph.edge_dst.shape[0], -1)
            pair = torch.cat([latent[graph.edge_dst], latent[graph.edge_src], zt_e], dim=-1)
            msgs = self.inter_net(pair) * graph.edge_weight.unsqueeze(-1)
            out = out.index_add(0, graph.edge_dst, msgs)
        return out

    def _time_plans(self, query_times: Sequence[float]) -> tuple[list, int]:
        """Map raw times to (grid index, leftover probe step) in normalized units."""
        c = self.config
        h = c.latent_step / c.t_scale
        plans = []
        last_index = 0
        for t in query_times:
            tau = float(t) / c.t_scale
            if tau < 0:
                raise ParameterError("query times must be >= 0")
            k = int(round(tau / h))
            if abs(k * h - tau) <= _ON_GRID_TOL * max(1.0, abs(tau)):
                plans.append((k, 0.0))
            else:
                k = int(np.floor(tau / h))
                plans.append((k, tau - k * h))
            last_index = max(last_index, k)
        return plans, last_index

    def _evolve_rows(self, engine: _OdeEngine, latent0: torch.Tensor,
                     query_times: Sequence[float]) -> torch.Tensor:
        """Latent states (Q, N, dim_l) at each query time.

        One march over the uniform grid serves every on-grid query; off-grid
        queries take a single probe step from the preceding grid point, so
        each row is independent of the rest of the query set.
        """
        h = self.config.latent_step / self.config.t_scale
        plans, last_index = self._time_plans(query_times)
        needed = {k for k, _ in plans}
        states = _march(engine, latent0, last_index, needed, h)
        rows = []
        for k, rem in plans:
            if rem == 0.0:
                rows.append(states[k])
            else:
                rows.append(engine.rk4_step(states[k], rem))
        return torch.stack(rows)

    def evolve_latent(self, latent0: torch.Tensor, z_tilde: torch.Tensor,
                      graph: GraphTensors, query_times: Sequence[float]
                      ) -> torch.Tensor:
        """Latent states at each raw query time for a single system."""
        engine = _OdeEngine(self, z_tilde.unsqueeze(0),
                            torch.zeros(graph.n, dtype=torch.long), graph)
        return self._evolve_rows(engine, latent0, query_times)

    # -- decoder ------------------------------------------------------------

    def decode(self, latent: torch.Tensor, t: torch.Tensor,
               z_tilde: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Observation-space Gaussian at (t, l); z_tilde rides along as a skip path.

        z_tilde may be a single vector (broadcast over latent's leading dims)
        or already row-aligned with latent.
        """
        tau = (t / self.config.t_scale).unsqueeze(-1)
        if z_tilde.dim() == 1:
            z_tilde = z_tilde.expand(*latent.shape[:-1], z_tilde.shape[-1])
        h = self.dec_l(torch.cat([latent, tau, z_tilde], dim=-1))
        mu = self.dec_mu_x(h)
        sigma = 0.01 + 0.99 * torch.nn.functional.softplus(self.dec_sigma_x(h))
        return mu, sigma

    # -- training loss ------------------------------------------------------

    def elbo_loss(self, batch: Sequence["TaskTensors"], beta: float,
                  generator: torch.Generator) -> torch.Tensor:
        """Mean over tasks of (target NLL + beta * KL(q(z|D_T) || q(z|D_C))).

        z is sampled from the target posterior and L(0) from the initial-state
        encoder by reparameterization; the deterministic path r comes from the
        context set, matching what prediction conditions on.  All tasks evolve
        as one block-diagonal latent system.
        """
        if not batch:
            raise ParameterError("elbo_loss requires a nonempty batch")
        r_t = self._embed_groups([(item.graph, item.target_snaps) for item in batch])
        r_c = self._embed_groups([(item.graph, item.context_snaps) for item in batch])
        mu_t, sigma_t = self._latent_heads(r_t)            # (B, dim_z) each
        mu_c, sigma_c = self._latent_heads(r_c)
        x0_all = torch.cat([item.target_snaps.x0 for item in batch])
        mu_l0, sigma_l0 = self.encode_initial(x0_all)      # (sum n, dim_l)
        eps_z = torch.randn(mu_t.shape, generator=generator, dtype=DTYPE)
        eps_l0 = torch.randn(mu_l0.shape, generator=generator, dtype=DTYPE)
        z_rows = torch.cat([reparameterize(mu_t, sigma_t, eps_z), r_c], dim=-1)
        latent0 = reparameterize(mu_l0, sigma_l0, eps_l0)
        merged, node_block = merge_graphs([item.graph for item in batch])
        engine = _OdeEngine(self, z_rows, node_block, merged)

        all_times, row_of, triple_rows, node_global, z_of_triple = [], {}, [], [], []
        offset = 0
        for b, item in enumerate(batch):
            for t in item.unique_times.tolist():
                if t not in row_of:
                    row_of[t] = len(all_times)
                    all_times.append(t)
            triple_rows.extend(row_of[t] for t in item.triple_times.tolist())
            node_global.append(item.node_index + offset)
            z_of_triple.append(torch.full((item.node_index.shape[0],), b,
                                          dtype=torch.long))
            offset += item.graph.n
        evolved = self._evolve_rows(engine, latent0, all_times)
        latent_sel = evolved[torch.tensor(triple_rows, dtype=torch.long),
                             torch.cat(node_global)]
        z_tilde_rows = z_rows.index_select(0, torch.cat(z_of_triple))
        target_times = torch.cat([item.triple_times_tensor for item in batch])
        target_values = torch.cat([item.target_values for item in batch])
        mu_x, sigma_x = self.decode(latent_sel, target_times, z_tilde_rows)
        nll = gaussian_nll(target_values, mu_x, sigma_x)
        kl = gaussian_kl(mu_t, sigma_t, mu_c, sigma_c)
        return (nll + beta * kl) / len(batch)

    # -- prediction ---------------------------------------------------------

    def predict(self, graph: GraphTensors, context: SnapshotTensors,
                queries: Sequence[tuple[float, int]], mc_samples: Optional[int] = None,
                generator: Optional[torch.Generator] = None
                ) -> "PredictiveDistribution":
        """Monte-Carlo predictive Gaussian (Z1, Z2) per query.

        All J latent draws happen up front and the J systems evolve together;
        every query is then decoded individually, which keeps per-query
        results independent of the query set (exchangeability and
        consistency hold exactly).
        """
        j_samples = mc_samples if mc_samples is not None else self.config.mc_samples
        if j_samples < 1:
            raise ParameterError("mc_samples must be >= 1")
        gen = generator if generator is not None else torch_generator(0, "predict")
        with torch.no_grad():
            z_rows, latent0 = self._sample_conditioning(graph, context, j_samples, gen)
            merged, node_block = merge_graphs([graph] * j_samples)
            engine = _OdeEngine(self, z_rows, node_block, merged)
            unique_times = sorted({float(t) for t, _ in queries})
            time_row = {t: i for i, t in enumerate(unique_times)}
            evolved = self._evolve_rows(engine, latent0, unique_times)
            mus = torch.empty((j_samples, len(queries), self.config.state_dim),
                              dtype=DTYPE)
            sigmas = torch.empty_like(mus)
            for j in range(j_samples):
                for q, (t, l) in enumerate(queries):
                    latent_sel = evolved[time_row[float(t)], j * graph.n + int(l)]
                    mu, sigma = self.decode(latent_sel,
                                            torch.tensor(float(t), dtype=DTYPE),
                                            z_rows[j])
                    mus[j, q] = mu
                    sigmas[j, q] = sigma
        z1, z2 = moment_match(mus, sigmas)
        return PredictiveDistribution(queries=tuple((float(t), int(l)) for t, l in queries),
                                      mean=z1.numpy(), variance=z2.numpy())

    def _sample_conditioning(self, graph: GraphTensors, context: SnapshotTensors,
                             j_samples: int, gen: torch.Generator
                             ) -> tuple[torch.Tensor, torch.Tensor]:
        """Draw J (z_tilde, L(0)) samples from the context-conditioned posteriors."""
        r_c, mu_z, sigma_z = self.encode_context(graph, context)
        mu_l0, sigma_l0 = self.encode_initial(context.x0)
        eps_z = torch.randn((j_samples,) + mu_z.shape, generator=gen, dtype=DTYPE)
        eps_l0 = torch.randn((j_samples,) + mu_l0.shape, generator=gen, dtype=DTYPE)
        z = reparameterize(mu_z.unsqueeze(0), sigma_z.unsqueeze(0), eps_z)
        latent0 = reparameterize(mu_l0.unsqueeze(0), sigma_l0.unsqueeze(0), eps_l0)
        z_rows = torch.cat([z, r_c.unsqueeze(0).expand(j_samples, -1)], dim=-1)
        return z_rows, latent0.reshape(j_samples * graph.n, self.config.dim_l)


def moment_match(mus: torch.Tensor, sigmas: torch.Tensor
                 ) -> tuple[torch.Tensor, torch.Tensor]:
    """Collapse J Gaussians to one: Z1 = mean mu, Z2 = mean(sigma^2 + mu^2) - Z1^2."""
    z1 = mus.mean(dim=0)
    z2 = (sigmas ** 2 + mus ** 2).mean(dim=0) - z1 ** 2
    return z1, z2


def predict_grid(model: NDP4NDModel, graph: GraphTensors, context: SnapshotTensors,
                 times: Sequence[float], mc_samples: Optional[int] = None,
                 generator: Optional[torch.Generator] = None
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Moment-matched predictions for every (time, node) lattice point.

    Batch counterpart of NDP4NDModel.predict for whole-trajectory scoring;
    returns mean and variance arrays of shape (T, n, d).
    """
    j_samples = mc_samples if mc_samples is not None else model.config.mc_samples
    gen = generator if generator is not None else torch_generator(0, "predict")
    times = [float(t) for t in times]
    with torch.no_grad():
        z_rows, latent0 = model._sample_conditioning(graph, context, j_samples, gen)
        merged, node_block = merge_graphs([graph] * j_samples)
        engine = _OdeEngine(model, z_rows, node_block, merged)
        evolved = model._evolve_rows(engine, latent0, times)    # (T, J*n, dim_l)
        t_grid = torch.tensor(times, dtype=DTYPE).unsqueeze(-1).expand(len(times), graph.n)
        mus = torch.empty((j_samples, len(times), graph.n, model.config.state_dim),
                          dtype=DTYPE)
        sigmas = torch.empty_like(mus)
        for j in range(j_samples):
            block = evolved[:, j * graph.n:(j + 1) * graph.n]
            mu, sigma = model.decode(block, t_grid, z_rows[j])
            mus[j] = mu
            sigmas[j] = sigma
    z1, z2 = moment_match(mus, sigmas)
    return z1.numpy(), z2.numpy()


@dataclass(frozen=True)
class PredictiveDistribution:
    """Per-query Gaussian moments; variance is componentwise and positive."""

    queries: tuple
    mean: np.ndarray       # (Q, d)
    variance: np.ndarray   # (Q, d)


@dataclass
class TaskTensors:
    """One task prepared for elbo_loss."""

    graph: GraphTensors
    context_snaps: SnapshotTensors
    target_snaps: SnapshotTensors
    unique_times: np.ndarray
    triple_times: np.ndarray       # (M,) raw times per target triple
    triple_times_tensor: torch.Tensor
    node_index: torch.Tensor       # (M,) long
    target_values: torch.Tensor    # (M, d)


def task_tensors(task: TrajectoryTask, context: ObservationSet,
                 target: ObservationSet,
                 graph: Optional[GraphTensors] = None,
                 target_snaps: Optional[SnapshotTensors] = None) -> TaskTensors:
    graph = graph if graph is not None else graph_tensors(task.topology)
    if target_snaps is None:
        target_snaps = snapshot_tensors(target, task.topology)
    context_snaps = snapshot_tensors(context, task.topology)
    times = np.array([o.t for o in target.observations])
    return TaskTensors(
        graph=graph,
        context_snaps=context_snaps,
        target_snaps=target_snaps,
        unique_times=np.unique(times),
        triple_times=times,
        triple_times_tensor=torch.tensor(times, dtype=DTYPE),
        node_index=torch.tensor([o.l for o in target.observations], dtype=torch.long),
        target_values=torch.stack([torch.as_tensor(o.x, dtype=DTYPE)
                                   for o in target.observations]),
    )


# ---------------------------------------------------------------------------
# Training loop.

@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 5e-3
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    context_fraction: tuple = (0.2, 0.8)   # per-task uniform draw each epoch
    kl_warmup_fraction: float = 0.2        # beta ramps 0 -> beta over this share of steps
    lr_decay: bool = True                  # 10x total decay over all steps

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("need learning_rate > 0, batch_size >= 1, epochs >= 0")
        lo, hi = self.context_fraction
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError("context_fraction bounds must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.kl_warmup_fraction <= 1.0:
            raise ConfigError("kl_warmup_fraction must be in [0, 1]")


@dataclass
class TrainRecord:
    epoch: int
    step: int
    loss: float
    learning_rate: float
    beta: float


def fit(tasks: Sequence[tuple[TrajectoryTask, ObservationSet]],
        config: ModelConfig, settings: TrainSettings,
        checkpoint_every: int = 0, checkpoint_fn=None
        ) -> tuple[NDP4NDModel, list[TrainRecord]]:
    """Mini-batch ELBO training with fresh context/target splits per epoch.

    Deterministic per settings.seed: task order, split fractions, and latent
    draws are all keyed by (seed, epoch, batch/task).  Raises NumericalError
    with the offending epoch and task ids if the loss goes non-finite.
    """
    if not tasks:
        raise ParameterError("fit requires at least one task")
    scenarios = {task.scenario for task, _ in tasks}
    if len(scenarios) > 1:
        raise ParameterError(f"tasks must share one scenario, got {sorted(scenarios)}")
    model = NDP4NDModel(config, seed=settings.seed)
    params = list(model.parameters())
    batches_per_epoch = int(np.ceil(len(tasks) / settings.batch_size))
    total_steps = max(1, settings.epochs * batches_per_epoch)
    adam = AdamState(lr=settings.learning_rate,
                     decay_steps=total_steps if settings.lr_decay else None)
    graphs = {task.id: graph_tensors(task.topology) for task, _ in tasks}
    target_snaps = {task.id: snapshot_tensors(obs, task.topology) for task, obs in tasks}
    history: list[TrainRecord] = []
    step = 0
    warmup_steps = int(settings.kl_warmup_fraction * total_steps)
    for epoch in range(settings.epochs):
        order = numpy_rng(settings.seed, "epoch-order", epoch).permutation(len(tasks))
        for b in range(batches_per_epoch):
            members = order[b * settings.batch_size:(b + 1) * settings.batch_size]
            if members.size == 0:
                continue
            batch = []
            ids = []
            for idx in members.tolist():
                task, obs = tasks[idx]
                ids.append(task.id)
                frac_rng = numpy_rng(settings.seed, "context-fraction", epoch, task.id)
                lo, hi = settings.context_fraction
                fraction = float(frac_rng.uniform(lo, hi))
                context, target = taskgen.split_context_target(
                    obs, fraction, derive_seed(settings.seed, "split", epoch, task.id))
                batch.append(task_tensors(task, context, target, graphs[task.id],
                                          target_snaps[task.id]))
            if warmup_steps > 0 and step < warmup_steps:
                beta = config.beta * step / warmup_steps
            else:
                beta = config.beta
            gen = torch_generator(settings.seed, "latent-draws", epoch, b)
            loss = model.elbo_loss(batch, beta, gen)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, step {step}, tasks {ids}")
            grads = torch.autograd.grad(loss, params)
            lr_now = adam.current_lr()
            optimizer_step(adam, params, grads)
            history.append(TrainRecord(epoch=epoch, step=step, loss=loss.item(),
                                       learning_rate=lr_now, beta=beta))
            step += 1
        if checkpoint_every and checkpoint_fn and (epoch + 1) % checkpoint_every == 0:
            checkpoint_fn(model, epoch)
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints.

def save_model(path, model: NDP4NDModel, extra_meta: Optional[dict] = None) -> None:
    meta = {"model_config": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    tensors = {name: tensor for name, tensor in model.state_dict().items()}
    save_named_tensors(path, tensors, meta)


def load_model(path, expected_config: Optional[ModelConfig] = None
               ) -> tuple[NDP4NDModel, dict]:
    tensors, meta = load_named_tensors(path)
    config = ModelConfig.from_dict(meta["model_config"])
    if expected_config is not None and expected_config != config:
        raise ConfigError(
            f"checkpoint config {config} does not match expected {expected_config}")
    model = NDP4NDModel(config, seed=0)
    model.load_state_dict(tensors)
    return model, meta
