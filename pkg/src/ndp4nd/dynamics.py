"""Ground-truth network dynamics: per-scenario right-hand sides and integrators.

Every family fits the skeleton  dX_l/dt = self(X_l) + sum_j A[l,j] *
interaction(X_l, X_j),  except phototaxis, which couples all node pairs with
a 1/n-scaled alignment kernel on a complete graph.  All families are
autonomous; the time argument exists only for interface uniformity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, ParameterError
from .graph import Topology, in_degrees

SCENARIOS = ("mutualistic", "phototaxis", "brain", "sis", "sir", "seis")

STATE_DIMS = {
    "mutualistic": 1,
    "phototaxis": 5,
    "brain": 2,
    "sis": 2,
    "sir": 3,
    "seis": 3,
}

REQUIRED_PARAMS = {
    "mutualistic": ("b", "c", "d", "e", "h", "k"),
    "phototaxis": ("lambda1", "lambda2", "V", "I0", "kernel_beta", "zeta_cr", "zeta_cp"),
    "brain": ("a", "b", "c", "epsilon"),
    "sis": ("b", "r"),
    "sir": ("b", "r"),
    "seis": ("b", "r", "c"),
}


@dataclass(frozen=True)
class DynamicsParams:
    """One sampled parameter assignment for a scenario's ODE template."""

    scenario: str
    values: dict

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ParameterError(f"unknown scenario {self.scenario!r}")
        missing = [s for s in REQUIRED_PARAMS[self.scenario] if s not in self.values]
        if missing:
            raise ParameterError(f"{self.scenario} params missing {missing}")
        if self.scenario == "phototaxis":
            zcr, zcp = self.values["zeta_cr"], self.values["zeta_cp"]
            if not np.isclose(zcp, 2.0 * zcr):
                raise ParameterError(f"phototaxis requires zeta_cp = 2*zeta_cr, got {zcp} vs {zcr}")
            v = np.asarray(self.values["V"], dtype=float)
            if v.shape != (2,):
                raise ParameterError("phototaxis V must be a 2-vector")

    def __getitem__(self, key: str) -> float:
        return self.values[key]


@dataclass(frozen=True)
class Trajectory:
    """Dense states on a uniform time grid starting at t=0."""

    times: np.ndarray          # (T,)
    states: np.ndarray         # (T, n, d)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.float64)
        if times.ndim != 1 or states.ndim != 3 or len(times) != len(states):
            raise ParameterError("trajectory needs times (T,) matching states (T, n, d)")
        if len(times) == 0 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ParameterError("times must start at 0 and be strictly increasing")
        for arr in (times, states):
            arr.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    def at(self, t: float) -> np.ndarray:
        """State matrix at a grid time (exact match required)."""
        idx = np.flatnonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-9))
        if idx.size == 0:
            raise ParameterError(f"t={t} is not on the trajectory grid")
        return self.states[int(idx[0])]


@dataclass(frozen=True)
class SolverConfig:
    """Integrator selection: fixed-step classic RK4 or adaptive Dormand-Prince."""

    method: str = "dopri5_adaptive"
    step: Optional[float] = None     # rk4_fixed internal step; defaults to grid/5
    rtol: float = 1e-6
    atol: float = 1e-6

    def __post_init__(self):
        if self.method not in ("rk4_fixed", "dopri5_adaptive"):
            raise ParameterError(f"unknown solver method {self.method!r}")
        if self.step is not None and self.step <= 0:
            raise ParameterError("step must be > 0")
        if self.rtol <= 0 or self.atol <= 0:
            raise ParameterError("rtol and atol must be > 0")


def smooth_cutoff(zeta: np.ndarray, zeta_c: float) -> np.ndarray:
    """Phototaxis cutoff: 1 below zeta_c, cosine ramp on [zeta_c, 2*zeta_c), 0 above."""
    z = np.asarray(zeta, dtype=np.float64)
    ramp = 0.5 * (np.cos(np.pi / zeta_c * (z - zeta_c)) + 1.0)
    out = np.where(z < zeta_c, 1.0, np.where(z < 2.0 * zeta_c, ramp, 0.0))
    return out


def rhs(scenario: str, params: DynamicsParams, topology: Topology,
        state: np.ndarray, t: float = 0.0) -> np.ndarray:
    """Time derivative of the full state matrix, shape (n, d)."""
    if scenario not in SCENARIOS:
        raise ParameterError(f"unknown scenario {scenario!r}")
    if params.scenario != scenario:
        raise ParameterError(f"params are for {params.scenario!r}, not {scenario!r}")
    x = np.asarray(state, dtype=np.float64)
    d = STATE_DIMS[scenario]
    if x.shape != (topology.n, d):
        raise ParameterError(f"state shape {x.shape} != ({topology.n}, {d})")
    adj = topology.adjacency
    if scenario == "mutualistic":
        return _rhs_mutualistic(params, adj, x)
    if scenario == "phototaxis":
        return _rhs_phototaxis(params, topology.n, x)
    if scenario == "brain":
        return _rhs_brain(params, topology, x)
    return _rhs_compartment(scenario, params, adj, x)


def _rhs_mutualistic(p: DynamicsParams, adj: np.ndarray, x: np.ndarray) -> np.ndarray:
    xi = x[:, 0]
    b, c, d, e, h, k = (p[s] for s in ("b", "c", "d", "e", "h", "k"))
    self_term = b + xi * (1.0 - xi / k) * (xi / c - 1.0)
    col = xi[:, None]
    row = xi[None, :]
    response = (row - col) * col * row / (d + e * col + h * row)
    interaction = np.sum(adj * response, axis=1)
    return (self_term + interaction)[:, None]


def _rhs_phototaxis(p: DynamicsParams, n: int, x: np.ndarray) -> np.ndarray:
    pos, vel, zeta = x[:, 0:2], x[:, 2:4], x[:, 4]
    lam1, lam2, i0 = p["lambda1"], p["lambda2"], p["I0"]
    beta = p["kernel_beta"]
    v_target = np.asarray(p["V"], dtype=np.float64)
    diff = pos[None, :, :] - pos[:, None, :]            # [i, j] = pos_j - pos_i
    kernel = np.power(1.0 + np.sum(diff * diff, axis=2), -beta)
    dvel = (lam1 / n) * np.einsum("ij,ijk->ik", kernel, vel[None, :, :] - vel[:, None, :])
    dvel += i0 * (v_target[None, :] - vel) * (1.0 - smooth_cutoff(zeta, p["zeta_cr"]))[:, None]
    dzeta = (lam2 / n) * np.sum(kernel * (zeta[None, :] - zeta[:, None]), axis=1)
    dzeta += i0 * smooth_cutoff(zeta, p["zeta_cp"])
    out = np.empty_like(x)
    out[:, 0:2] = vel
    out[:, 2:4] = dvel
    out[:, 4] = dzeta
    return out


def _rhs_brain(p: DynamicsParams, topology: Topology, x: np.ndarray) -> np.ndarray:
    v, w = x[:, 0], x[:, 1]
    deg = in_degrees(topology).astype(np.float64)
    coupling = topology.adjacency @ v - deg * v
    # Isolated nodes have zero coupling instead of a 0/0 division.
    scaled = np.divide(coupling, deg, out=np.zeros_like(coupling), where=deg > 0)
    dv = v - v**3 - w - p["epsilon"] * scaled
    dw = p["a"] + p["b"] * v + p["c"] * w
    return np.stack([dv, dw], axis=1)


def _rhs_compartment(scenario: str, p: DynamicsParams, adj: np.ndarray,
                     x: np.ndarray) -> np.ndarray:
    b, r = p["b"], p["r"]
    out = np.empty_like(x)
    if scenario == "sis":
        s, i = x[:, 0], x[:, 1]
        force = b * s * (adj @ i)
        out[:, 0] = -force + r * i
        out[:, 1] = force - r * i
    elif scenario == "sir":
        s, i = x[:, 0], x[:, 1]
        force = b * s * (adj @ i)
        out[:, 0] = -force
        out[:, 1] = force - r * i
        out[:, 2] = r * i
    else:  # seis: infection is driven by the infectious compartment (column 2)
        s, e, i = x[:, 0], x[:, 1], x[:, 2]
        c = p["c"]
        force = b * s * (adj @ i)
        out[:, 0] = -force + r * i
        out[:, 1] = force - c * e
        out[:, 2] = c * e - r * i
    return out


RhsFn = Callable[[np.ndarray, float], np.ndarray]


def integrate(scenario: str, params: DynamicsParams, topology: Topology,
              x0: np.ndarray, t_end: float, grid_step: float,
              solver: SolverConfig = SolverConfig(),
              rhs_fn: Optional[RhsFn] = None) -> Trajectory:
    """Solve the initial-value problem, sampling at 0, grid_step, ..., t_end.

    rhs_fn overrides the scenario right-hand side (unit-test hook); its
    signature is (state, t) -> derivative.
    """
    if t_end <= 0:
        raise ParameterError("t_end must be > 0")
    if grid_step <= 0:
        raise ParameterError("grid_step must be > 0")
    steps = int(round(t_end / grid_step))
    if steps < 1 or abs(steps * grid_step - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise ParameterError(f"t_end={t_end} is not a multiple of grid_step={grid_step}")
    times = grid_step * np.arange(steps + 1)
    x0 = np.asarray(x0, dtype=np.float64)
    if rhs_fn is None:
        fn: RhsFn = lambda state, t: rhs(scenario, params, topology, state, t)
        d = STATE_DIMS[scenario]
        if x0.shape != (topology.n, d):
            raise ParameterError(f"x0 shape {x0.shape} != ({topology.n}, {d})")
    else:
        fn = rhs_fn
    if solver.method == "rk4_fixed":
        states = _rk4_solve(fn, x0, times, solver.step or grid_step / 5.0)
    else:
        states = _dopri5_solve(fn, x0, times, solver.rtol, solver.atol)
    return Trajectory(times=times, states=states)


def rk4_step(fn: RhsFn, x: np.ndarray, t: float, h: float) -> np.ndarray:
    k1 = fn(x, t)
    k2 = fn(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = fn(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = fn(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_solve(fn: RhsFn, x0: np.ndarray, times: np.ndarray, step: float) -> np.ndarray:
    grid_step = float(times[1] - times[0])
    substeps = max(1, int(round(grid_step / step)))
    h = grid_step / substeps
    states = np.empty((len(times),) + x0.shape)
    states[0] = x0
    x = x0
    for k in range(1, len(times)):
        t = times[k - 1]
        for s in range(substeps):
            x = rk4_step(fn, x, t + s * h, h)
        states[k] = x
    return states


def _dopri5_solve(fn: RhsFn, x0: np.ndarray, times: np.ndarray,
                  rtol: float, atol: float) -> np.ndarray:
    shape = x0.shape
    flat = lambda t, y: fn(y.reshape(shape), t).ravel()
    sol = solve_ivp(flat, (times[0], times[-1]), x0.ravel(), method="RK45",
                    t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        last = float(sol.t[-1]) if sol.t.size else float(times[0])
        raise IntegrationError(f"adaptive solve failed: {sol.message}", last)
    return sol.y.T.reshape((len(times),) + shape)
