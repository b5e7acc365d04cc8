"""Differentiable building blocks on torch (CPU, float64 throughout).

Reverse-mode gradients come from torch autograd; grad_check provides the
independent central-finite-difference oracle against them.  The optimizer is
an explicit adaptive-moment (Adam) update so its schedule and state are fully
inspectable and checkpoint-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DataFormatError, ParameterError

DTYPE = torch.float64
LEAKY_SLOPE = 0.01

CHECKPOINT_MAGIC = b"NDP4ND-CKPT\x01"
CHECKPOINT_VERSION = 1


def glorot_uniform_(tensor: torch.Tensor, generator: torch.Generator) -> None:
    fan_in, fan_out = tensor.shape[-1], tensor.shape[-2] if tensor.ndim > 1 else 1
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class Mlp(nn.Module):
    """Affine -> LeakyReLU chain with an affine (activation-free) final layer."""

    def __init__(self, dims: Sequence[int], generator: torch.Generator):
        super().__init__()
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ParameterError(f"mlp needs >= 2 positive dims, got {dims}")
        self.dims = tuple(dims)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = torch.empty(fan_out, fan_in, dtype=DTYPE)
            glorot_uniform_(w, generator)
            weights.append(nn.Parameter(w))
            biases.append(nn.Parameter(torch.zeros(fan_out, dtype=DTYPE)))
        self.weights = nn.ParameterList(weights)
        self.biases = nn.ParameterList(biases)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dims[0]:
            raise ParameterError(f"mlp input dim {x.shape[-1]} != {self.dims[0]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.nn.functional.linear(x, w, b)
            if i < last:
                x = torch.nn.functional.leaky_relu(x, LEAKY_SLOPE)
        return x


class GatLayer(nn.Module):
    """Single multi-head graph-attention layer, heads concatenated.

    Attention runs over {in-neighbors union self} of each node: per-head
    linear transform, additive logits through LeakyReLU, softmax per
    neighborhood, weighted message sum.  Neighborhoods arrive as an edge
    list (dst, src) that must already contain the self-loops, which keeps
    the computation sparse and lets disjoint graphs batch as one block.
    """

    def __init__(self, in_dim: int, heads: int, head_dim: int,
                 generator: torch.Generator):
        super().__init__()
        if min(in_dim, heads, head_dim) < 1:
            raise ParameterError("in_dim, heads, head_dim must be >= 1")
        self.in_dim, self.heads, self.head_dim = in_dim, heads, head_dim
        w = torch.empty(heads * head_dim, in_dim, dtype=DTYPE)
        glorot_uniform_(w, generator)
        self.weight = nn.Parameter(w)
        att = torch.empty(2, heads, head_dim, dtype=DTYPE)
        glorot_uniform_(att, generator)
        self.att_dst = nn.Parameter(att[0].clone())
        self.att_src = nn.Parameter(att[1].clone())

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim

    def attention(self, x: torch.Tensor, edge_dst: torch.Tensor,
                  edge_src: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (attn, transformed): attn[..., e, h] weights edge e per head."""
        if x.shape[-1] != self.in_dim:
            raise ParameterError(f"gat input dim {x.shape[-1]} != {self.in_dim}")
        n = x.shape[-2]
        trans = torch.nn.functional.linear(x, self.weight)
        trans = trans.reshape(*x.shape[:-1], self.heads, self.head_dim)
        logit_dst = (trans * self.att_dst).sum(-1)          # (..., n, H)
        logit_src = (trans * self.att_src).sum(-1)
        logits = logit_dst.index_select(-2, edge_dst) + logit_src.index_select(-2, edge_src)
        logits = torch.nn.functional.leaky_relu(logits, LEAKY_SLOPE)
        group_shape = logits.shape[:-2] + (n, self.heads)
        dst_expanded = edge_dst.unsqueeze(-1).expand_as(logits)
        maxes = torch.full(group_shape, float("-inf"), dtype=logits.dtype)
        maxes = maxes.scatter_reduce(-2, dst_expanded, logits, "amax", include_self=True)
        exp = torch.exp(logits - maxes.index_select(-2, edge_dst))
        denom = torch.zeros(group_shape, dtype=logits.dtype).index_add(-2, edge_dst, exp)
        attn = exp / denom.index_select(-2, edge_dst)
        return attn, trans

    def forward(self, x: torch.Tensor, edge_dst: torch.Tensor,
                edge_src: torch.Tensor) -> torch.Tensor:
        attn, trans = self.attention(x, edge_dst, edge_src)
        n = x.shape[-2]
        if n * n <= edge_dst.numel() * self.head_dim:
            # Dense per-head matmul touches fewer bytes than gathering
            # (edges, heads, head_dim) messages; both paths compute the
            # same weighted sums.
            flat = (edge_dst * n + edge_src).expand(*attn.shape[:-2], self.heads, -1)
            dense = torch.zeros(attn.shape[:-2] + (self.heads, n * n), dtype=x.dtype)
            dense = dense.scatter_add(-1, flat, attn.transpose(-1, -2))
            out = dense.reshape(*attn.shape[:-2], self.heads, n, n) @ trans.transpose(-3, -2)
            out = out.transpose(-3, -2)
        else:
            messages = trans.index_select(-3, edge_src) * attn.unsqueeze(-1)
            out_shape = x.shape[:-1] + (self.heads, self.head_dim)
            out = torch.zeros(out_shape, dtype=x.dtype).index_add(-3, edge_dst, messages)
        return out.reshape(*x.shape[:-1], self.out_dim)


def attention_edges(adjacency: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """(dst, src) edge arrays over {in-neighbors union self}, row-major order."""
    pattern = (adjacency > 0) | np.eye(adjacency.shape[0], dtype=bool)
    dst, src = np.nonzero(pattern)
    return (torch.as_tensor(dst, dtype=torch.long),
            torch.as_tensor(src, dtype=torch.long))


def gaussian_kl(mu_q: torch.Tensor, sigma_q: torch.Tensor,
                mu_p: torch.Tensor, sigma_p: torch.Tensor) -> torch.Tensor:
    """KL(N(mu_q, diag sigma_q^2) || N(mu_p, diag sigma_p^2)), summed over dims."""
    _require_positive(sigma_q, "sigma_q")
    _require_positive(sigma_p, "sigma_p")
    var_ratio = (sigma_q / sigma_p) ** 2
    term = ((mu_q - mu_p) / sigma_p) ** 2
    return 0.5 * torch.sum(var_ratio + term - 1.0 - torch.log(var_ratio))


def gaussian_nll(x: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Negative log density of a diagonal Gaussian, summed over components."""
    _require_positive(sigma, "sigma")
    z = (x - mu) / sigma
    return torch.sum(0.5 * z * z + torch.log(sigma) + 0.5 * float(np.log(2.0 * np.pi)))


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor,
                   epsilon: torch.Tensor) -> torch.Tensor:
    """mu + sigma * epsilon; gradients flow to mu and sigma."""
    _require_positive(sigma, "sigma")
    return mu + sigma * epsilon


def _require_positive(sigma: torch.Tensor, name: str) -> None:
    if not torch.all(sigma > 0):
        raise ParameterError(f"{name} must be componentwise positive")


@dataclass
class AdamState:
    """Adaptive-moment optimizer state with an exponential lr decay schedule.

    With decay_steps set, lr(step) = lr * 10^(-step / decay_steps): a total
    10x decay over decay_steps updates.
    """

    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_steps: Optional[int] = None
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def current_lr(self) -> float:
        if self.decay_steps is None:
            return self.lr
        return self.lr * 10.0 ** (-self.step / self.decay_steps)


def optimizer_step(state: AdamState, params: Sequence[torch.Tensor],
                   grads: Sequence[torch.Tensor]) -> AdamState:
    """One bias-corrected adaptive-moment update; params are updated in place."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ParameterError("params and grads must have equal length")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    lr = state.current_lr()
    state.step += 1
    t = state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ParameterError(f"grad shape {tuple(g.shape)} != param {tuple(p.shape)}")
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return state


def grad_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               h: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    fn must be a zero-argument closure returning a scalar built from params.
    """
    value = fn()
    if value.numel() != 1:
        raise ParameterError("grad_check requires a scalar-valued function")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    max_rel = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat_p = p.reshape(-1)
            flat_g = analytic.reshape(-1)
            for idx in range(flat_p.numel()):
                orig = flat_p[idx].item()
                flat_p[idx] = orig + h
                up = float(fn())
                flat_p[idx] = orig - h
                down = float(fn())
                flat_p[idx] = orig
                fd = (up - down) / (2.0 * h)
                a = flat_g[idx].item()
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                max_rel = max(max_rel, rel)
    return max_rel


def save_named_tensors(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Versioned binary checkpoint: JSON manifest + raw float64 payload."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for v in tensors.values():
            arr = np.ascontiguousarray(v.detach().cpu().numpy(), dtype=np.float64)
            f.write(arr.tobytes())


def load_named_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Inverse of save_named_tensors; fails loudly on format mismatch."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: not an NDP4ND checkpoint")
        header_len = int.from_bytes(f.read(8), "little")
        manifest = json.loads(f.read(header_len).decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise DataFormatError(
                f"{path}: unsupported checkpoint version {manifest.get('format_version')}"
            )
        tensors: dict[str, torch.Tensor] = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise DataFormatError(f"{path}: truncated tensor {entry['name']!r}")
            arr = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
            tensors[entry["name"]] = torch.from_numpy(arr)
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after payload")
    return tensors, manifest["meta"]
