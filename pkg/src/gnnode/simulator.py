"""Lumped-parameter plant simulator and sweep/scenario generators.

Each plant node is a well-mixed thermal volume:

    C_i dT_i/dt = mdot_loop*c_p*(T_up - T_i)          (streamwise advection)
                + sum_j UA_ij(mdot)*(T_j - T_i)        (transverse coupling)
                + Q_i                                  (heater injection)
                - U_i*(T_i - T_amb)                    (parasitic loss)

with C_i = rho*c_p*V_i*kappa_i. Transverse conductances follow a
Dittus-Boelter-style flow dependence UA = UA0 * hmean(s_a, s_b) with
s = (mdot_side/mdot_ref)**0.8 evaluated per side, so exchanger coupling
weakens when either side's flow drops. Integration is fixed-step RK4 on a
grid that includes every control breakpoint and every record time, so
recorded rows are exact states, not interpolants.

Runs consist of a settle period at the initial controls followed by an
active window; only the active window is recorded. Control programs are
piecewise-linear (steps are ramps of zero width). Applied heater power is
clamped to a flow-derated cap at every instant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TEMP_CHANNELS, Trajectory
from .errors import ConfigError

PERTURBATION_CHANNELS = ("power", "flow1", "flow2", "flow3")


@dataclass(frozen=True)
class PhysicsConfig:
    rho_kg_m3: float = 998.0
    cp_j_kgk: float = 4186.0
    mdot_ref: float = 0.1
    flow_exponent: float = 0.8
    # transverse UA0 (W/K at reference flow on both sides), keyed "A|B"
    ua0: dict = field(default_factory=lambda: {
        "T_Havg|T_ch": 520.0,
        "HX1_L1|HX1_L2": 480.0,
        "HX2_L2|HX2_L3": 480.0,
    })
    # parasitic loss U*A per component kind (W/K)
    loss_ua: dict = field(default_factory=lambda: {
        "heater": 6.0, "chamber": 8.0, "pipe": 2.5, "hx_shell": 5.0,
    })
    nonlinear_loss: float = 0.0     # extra loss fraction per 100 K over ambient
    kappa_scale: dict = field(default_factory=dict)  # component -> multiplier
    power_cap_w: float = 16000.0
    derate_flow_ref: float = 0.05
    derate_floor: float = 0.25
    internal_dt_s: float = 0.05
    settle_s: float = 200.0


@dataclass(frozen=True)
class Design:
    """Operating point for one run."""
    power_w: float
    flows: tuple            # (loop1, loop2, loop3) kg/s
    initial_temp_k: float
    inlet_temp_k: float

    def as_dict(self):
        return {"power_w": self.power_w, "flows": list(self.flows),
                "initial_temp_k": self.initial_temp_k,
                "inlet_temp_k": self.inlet_temp_k}


@dataclass(frozen=True)
class Event:
    channel: str            # power | flow1 | flow2 | flow3
    t_start_s: float
    ramp_s: float
    value: float

    def as_dict(self):
        return {"channel": self.channel, "t_start_s": self.t_start_s,
                "ramp_s": self.ramp_s, "value": self.value}


def derated_power_cap(flows, physics):
    """Facility power limit under the current minimum loop flow."""
    frac = min(flows) / physics.derate_flow_ref
    frac = min(max(frac, physics.derate_floor), 1.0)
    return physics.power_cap_w * frac


class ControlProgram:
    """Piecewise-linear control signals built from a design plus events."""

    def __init__(self, design, events=()):
        self.design = design
        self.events = sorted(events, key=lambda e: (e.t_start_s, e.channel))
        base = {"power": design.power_w,
                "flow1": design.flows[0],
                "flow2": design.flows[1],
                "flow3": design.flows[2]}
        self._xp = {}
        self._fp = {}
        for ch, v0 in base.items():
            xp, fp = [-1e12], [v0]
            cur = v0
            for ev in self.events:
                if ev.channel != ch:
                    continue
                ramp = max(ev.ramp_s, 1e-9)
                xp.extend([ev.t_start_s, ev.t_start_s + ramp])
                fp.extend([cur, ev.value])
                cur = ev.value
            xp.append(1e12)
            fp.append(cur)
            self._xp[ch] = np.array(xp)
            self._fp[ch] = np.array(fp)

    def breakpoints(self):
        pts = []
        for ev in self.events:
            pts.append(ev.t_start_s)
            pts.append(ev.t_start_s + max(ev.ramp_s, 1e-9))
        return pts

    def value(self, channel, t):
        return float(np.interp(t, self._xp[channel], self._fp[channel]))

    def at(self, t):
        """(power, flows[3]) at time t (scalar)."""
        return (self.value("power", t),
                np.array([self.value("flow1", t), self.value("flow2", t),
                          self.value("flow3", t)]))


class _Rhs:
    """Vectorized right-hand side over the 17 plant temperatures."""

    def __init__(self, graph, physics):
        self.graph = graph
        self.physics = physics
        p = physics
        kap = np.array([n.kappa * p.kappa_scale.get(n.component, 1.0)
                        for n in graph.plant])
        vol = np.array([n.volume_m3 for n in graph.plant])
        self.C = p.rho_kg_m3 * p.cp_j_kgk * vol * kap

        g2p = {n.index: i for i, n in enumerate(graph.plant)}
        adv_src, adv_dst, adv_loop = [], [], []
        self.inlet_dst = []
        self.inlet_loop = []
        for e in graph.edges_by_relation("streamwise"):
            src = graph.nodes[e.src]
            if src.kind == "plant":
                adv_src.append(g2p[e.src])
                adv_dst.append(g2p[e.dst])
                adv_loop.append(e.loop_id - 1)
            else:  # prescribed inlet temperature feeds this node
                self.inlet_dst.append(g2p[e.dst])
                self.inlet_loop.append(e.loop_id - 1)
        self.adv_src = np.array(adv_src, dtype=np.intp)
        self.adv_dst = np.array(adv_dst, dtype=np.intp)
        self.adv_loop = np.array(adv_loop, dtype=np.intp)

        pairs = {}
        for e in graph.edges_by_relation("transverse"):
            key = tuple(sorted((e.src, e.dst)))
            pairs.setdefault(key, e)
        self.pair_a, self.pair_b = [], []
        self.pair_ua0, self.pair_la, self.pair_lb = [], [], []
        for (a, b), e in sorted(pairs.items()):
            na, nb = graph.nodes[a].name, graph.nodes[b].name
            key = f"{na}|{nb}" if f"{na}|{nb}" in p.ua0 else f"{nb}|{na}"
            if key not in p.ua0:
                raise ConfigError(f"no UA0 configured for pair {na}|{nb}")
            ea, eb = (e.src, e.dst) if e.src == a else (e.dst, e.src)
            self.pair_a.append(g2p[ea])
            self.pair_b.append(g2p[eb])
            self.pair_ua0.append(p.ua0[key])
            la = e.src_loop if e.src == ea else e.dst_loop
            lb = e.dst_loop if e.dst == eb else e.src_loop
            self.pair_la.append(la - 1)
            self.pair_lb.append(lb - 1)
        self.pair_a = np.array(self.pair_a, dtype=np.intp)
        self.pair_b = np.array(self.pair_b, dtype=np.intp)
        self.pair_ua0 = np.array(self.pair_ua0)
        self.pair_la = np.array(self.pair_la, dtype=np.intp)
        self.pair_lb = np.array(self.pair_lb, dtype=np.intp)

        self.loss_u = np.array([p.loss_ua.get(n.component, 2.5)
                                for n in graph.plant])
        self.heater = graph.heater_plant_index
        self.t_amb = graph.ambient_temperature_k
        self.cp = p.cp_j_kgk
        self.nl = p.nonlinear_loss

    def ua_pairs(self, flows):
        """Effective transverse conductances at the given loop flows."""
        s = (flows / self.physics.mdot_ref) ** self.physics.flow_exponent
        sa, sb = s[self.pair_la], s[self.pair_lb]
        return self.pair_ua0 * (2.0 * sa * sb / (sa + sb + 1e-300))

    def loss(self, T):
        dT = T - self.t_amb
        u = self.loss_u
        if self.nl:
            u = u * (1.0 + self.nl * dT / 100.0)
        return u * dT

    def __call__(self, T, power, flows, inlet):
        # streamwise in-degree <= 1 and transverse pairing is unique per
        # node, so plain fancy-index updates are exact (no collisions)
        q = np.zeros_like(T)
        mcp = flows * self.cp
        q[self.adv_dst] += mcp[self.adv_loop] * (T[self.adv_src]
                                                 - T[self.adv_dst])
        for k, dst in enumerate(self.inlet_dst):
            q[dst] += mcp[self.inlet_loop[k]] * (inlet - T[dst])
        ex = self.ua_pairs(flows) * (T[self.pair_b] - T[self.pair_a])
        q[self.pair_a] += ex
        q[self.pair_b] -= ex
        q[self.heater] += power
        q -= self.loss(T)
        return q / self.C


def _rk4_step(rhs, T, h, P3, F3, inlet):
    """One RK4 step given controls at (start, midpoint, end)."""
    k1 = rhs(T, P3[0], F3[0], inlet)
    k2 = rhs(T + 0.5 * h * k1, P3[1], F3[1], inlet)
    k3 = rhs(T + 0.5 * h * k2, P3[1], F3[1], inlet)
    k4 = rhs(T + h * k3, P3[2], F3[2], inlet)
    return T + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class _AffineStepper:
    """Exact RK4 step for spans where the RHS is affine in T.

    With controls frozen over a step the RHS is T' = M(T-T_amb) + c (c
    evaluated at the all-ambient state, so c is exactly zero for zero power
    and ambient inlet, preserving the ambient fixed point bitwise). The RK4
    update collapses to one matvec: T+ = T_amb + Phi(T-T_amb) + psi with
    Phi = I + A M, psi = A c, A = h(I + h/2 M + h^2/6 M^2 + h^3/24 M^3),
    which is algebraically identical to the four-stage form.
    """

    def __init__(self, rhs, inlet, t_amb, n):
        self.rhs = rhs
        self.inlet = inlet
        self.t_amb = t_amb
        self.n = n
        self.base = np.full(n, t_amb, dtype=np.float64)
        self._cache = {}

    def usable(self):
        return self.rhs.nl == 0.0

    def tables(self, h, power, flows):
        key = (h, power, flows[0], flows[1], flows[2])
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        f = np.asarray(flows)
        c = self.rhs(self.base, power, f, self.inlet)
        M = np.empty((self.n, self.n))
        for j in range(self.n):
            e = self.base.copy()
            e[j] += 1.0
            M[:, j] = self.rhs(e, power, f, self.inlet) - c
        eye = np.eye(self.n)
        A = h * (eye + (h / 2.0) * M @ (eye + (h / 3.0) * M
                                        @ (eye + (h / 4.0) * M)))
        tables = (eye + A @ M, A @ c)
        self._cache[key] = tables
        return tables

    def step(self, T, h, power, flows):
        phi, psi = self.tables(h, power, flows)
        return self.t_amb + phi @ (T - self.t_amb) + psi


def _controls_on_grid(program, grid, physics):
    """Derated power and flows at all grid points and midpoints.

    Returns arrays of length 2*len(grid)-1: even entries are grid points,
    odd entries are interval midpoints (what the RK4 stages sample).
    """
    tt = np.empty(2 * len(grid) - 1)
    tt[0::2] = grid
    tt[1::2] = 0.5 * (grid[:-1] + grid[1:])
    flows = np.column_stack([
        np.interp(tt, program._xp[ch], program._fp[ch])
        for ch in ("flow1", "flow2", "flow3")])
    power = np.interp(tt, program._xp["power"], program._fp["power"])
    frac = np.clip(flows.min(axis=1) / physics.derate_flow_ref,
                   physics.derate_floor, 1.0)
    power = np.minimum(power, physics.power_cap_w * frac)
    return power, flows


def _integration_grid(physics, program, record_times):
    t0 = -physics.settle_s
    t1 = float(record_times[-1])
    base = np.arange(t0, t1 + 0.5 * physics.internal_dt_s,
                     physics.internal_dt_s)
    extra = [b for b in program.breakpoints() if t0 < b < t1]
    grid = np.union1d(np.union1d(base, np.asarray(record_times)),
                      np.asarray(extra))
    return grid[(grid >= t0) & (grid <= t1 + 1e-12)]


def simulate(graph, physics, design, events=(), horizon_s=300.0,
             record_times=None, internal_dt=None):
    """Run one trajectory; returns only the active window as a Trajectory."""
    if internal_dt is not None:
        physics = replace(physics, internal_dt_s=internal_dt)
    if record_times is None:
        record_times = np.arange(0.0, horizon_s + 1e-9, 1.0)
    record_times = np.asarray(record_times, dtype=np.float64)
    program = ControlProgram(design, events)
    rhs = _Rhs(graph, physics)
    grid = _integration_grid(physics, program, record_times)
    power_g, flows_g = _controls_on_grid(program, grid, physics)

    T = np.full(len(graph.plant), design.initial_temp_k, dtype=np.float64)
    inlet = design.inlet_temp_k
    rec_idx = np.searchsorted(grid, record_times)
    if not np.allclose(grid[rec_idx], record_times, rtol=0, atol=1e-9):
        raise ConfigError("record times missing from integration grid")
    rec_set = dict(zip(rec_idx.tolist(), range(len(record_times))))

    temps = np.zeros((len(record_times), len(TEMP_CHANNELS)))
    power_rec = np.zeros(len(record_times))
    flow_rec = np.zeros((len(record_times), 3))
    plant_cols = [TEMP_CHANNELS.index(n.name) for n in graph.plant]
    inlet_col = TEMP_CHANNELS.index(graph.inlet_actuator.name)

    def record(i_grid, Ti):
        k = rec_set.get(i_grid)
        if k is None:
            return
        temps[k, plant_cols] = Ti
        temps[k, inlet_col] = inlet
        power_rec[k] = power_g[2 * i_grid]
        flow_rec[k] = flows_g[2 * i_grid]

    affine = _AffineStepper(rhs, inlet, graph.ambient_temperature_k, len(T))
    record(0, T)
    for i in range(len(grid) - 1):
        h = grid[i + 1] - grid[i]
        j = 2 * i
        P3, F3 = power_g[j:j + 3], flows_g[j:j + 3]
        if affine.usable() and P3[0] == P3[1] == P3[2] \
                and (F3[0] == F3[1]).all() and (F3[1] == F3[2]).all():
            T = affine.step(T, h, P3[0], (F3[0, 0], F3[0, 1], F3[0, 2]))
        else:
            T = _rk4_step(rhs, T, h, P3, F3, inlet)
        record(i + 1, T)

    meta = {"design": design.as_dict(),
            "events": [e.as_dict() for e in events]}
    return Trajectory(t=record_times, temps=temps, power=power_rec,
                      flows=flow_rec, meta=meta)


def steady_state(graph, physics, design, tol=1e-10, max_time_s=20000.0):
    """Integrate at constant controls until the state stops moving."""
    rhs = _Rhs(graph, physics)
    flows = np.asarray(design.flows, dtype=np.float64)
    power = min(design.power_w, derated_power_cap(design.flows, physics))
    P3 = np.full(3, power)
    F3 = np.broadcast_to(flows, (3, 3))
    T = np.full(len(graph.plant), design.initial_temp_k, dtype=np.float64)
    h, t = 0.5, 0.0
    while t < max_time_s:
        T = _rk4_step(rhs, T, h, P3, F3, design.inlet_temp_k)
        t += h
        if np.max(np.abs(rhs(T, power, flows, design.inlet_temp_k))) < tol:
            break
    return T


def energy_residual(graph, physics, design, T):
    """P_applied - (parasitic losses + loop-3 enthalpy removal) at state T.

    Zero at steady state; the relative residual is the energy-closure check.
    """
    rhs = _Rhs(graph, physics)
    flows = np.asarray(design.flows)
    power = min(design.power_w, derated_power_cap(design.flows, physics))
    losses = float(np.sum(rhs.loss(T)))
    g2p = {n.index: i for i, n in enumerate(graph.plant)}
    out_t = T[g2p[graph.name_to_index["TF32"]]]
    removal = flows[2] * physics.cp_j_kgk * (out_t - design.inlet_temp_k)
    return power - (losses + removal)


# -- sweep and scenario generation ---------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    n_designs: int = 60
    n_edge_cases: int = 10
    horizon_s: float = 300.0
    n_events: int = 2
    event_window: tuple = (50.0, 200.0)
    event_ramp_s: float = 10.0
    event_min_gap_s: float = 20.0
    nonuniform_every: int = 5       # every k-th run uses a jittered grid
    nonuniform_range: tuple = (0.4, 1.6)
    flow_range: tuple = (0.01, 0.15)
    power_range: tuple = (500.0, 16000.0)
    initial_temp_range: tuple = (293.15, 330.0)
    inlet_temp_range: tuple = (283.0, 298.0)


def latin_hypercube(n, dims, rng):
    """Stratified [0,1) samples: one point per row-stratum per dimension."""
    u = rng.random((n, dims))
    out = np.empty((n, dims))
    for d in range(dims):
        perm = rng.permutation(n)
        out[:, d] = (perm + u[:, d]) / n
    return out


def _scale(u, lo, hi):
    return lo + u * (hi - lo)


def sample_designs(cfg, rng):
    u = latin_hypercube(cfg.n_designs, 6, rng)
    designs = []
    for row in u:
        flows = tuple(_scale(row[i], *cfg.flow_range) for i in range(3))
        designs.append(Design(
            power_w=_scale(row[3], *cfg.power_range), flows=flows,
            initial_temp_k=_scale(row[4], *cfg.initial_temp_range),
            inlet_temp_k=_scale(row[5], *cfg.inlet_temp_range)))
    return designs


def edge_case_designs(cfg):
    """Deterministic corner designs exercising limiter and range extremes."""
    lo_f, hi_f = cfg.flow_range
    lo_p, hi_p = cfg.power_range
    mid_f = 0.5 * (lo_f + hi_f)
    cases = [
        Design(hi_p, (lo_f, lo_f, lo_f), 293.15, 288.0),   # derated hard
        Design(hi_p, (hi_f, hi_f, hi_f), 293.15, 288.0),
        Design(0.0, (mid_f, mid_f, mid_f), 293.15, 293.15),
        Design(0.0, (lo_f, lo_f, lo_f), 293.15, 283.0),
        Design(1000.0, (0.14, 0.14, 0.14), 330.0, 2.98e2),
        Design(8000.0, (hi_f, lo_f, hi_f), 300.0, 290.0),
        Design(8000.0, (lo_f, hi_f, 0.07), 300.0, 290.0),
        Design(4000.0, (0.14, 0.1, 0.07), 293.15, 288.0),
        Design(hi_p, (0.14, 0.1, 0.07), 293.15, 288.0),
        Design(7500.0, (0.14, 0.1, hi_f), 300.0, 288.0),
    ]
    plans = {
        7: [Event("power", 50.0, cfg.event_ramp_s, 12000.0)],
        8: [Event("power", 80.0, cfg.event_ramp_s, 2000.0),
            Event("power", 160.0, cfg.event_ramp_s, hi_p)],
        9: [Event("flow3", 100.0, cfg.event_ramp_s, lo_f)],
    }
    return cases[:cfg.n_edge_cases], plans


def sample_events(cfg, design, rng):
    """Two ramped perturbations, starts >= min gap apart, values in range."""
    for _ in range(200):
        starts = np.sort(rng.uniform(*cfg.event_window, size=cfg.n_events))
        if np.all(np.diff(starts) >= cfg.event_min_gap_s):
            break
    else:
        starts = np.array([cfg.event_window[0] + i * cfg.event_min_gap_s
                           for i in range(cfg.n_events)])
    events = []
    for t0 in starts:
        ch = PERTURBATION_CHANNELS[rng.integers(len(PERTURBATION_CHANNELS))]
        if ch == "power":
            val = rng.uniform(*cfg.power_range)
        else:
            val = rng.uniform(*cfg.flow_range)
        events.append(Event(ch, float(t0), cfg.event_ramp_s, float(val)))
    return events


def _record_grid(cfg, run_idx, rng):
    if cfg.nonuniform_every and (run_idx + 1) % cfg.nonuniform_every == 0:
        lo, hi = cfg.nonuniform_range
        steps = []
        total = 0.0
        while total < cfg.horizon_s - 1e-9:
            d = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            d = min(d, cfg.horizon_s - total)
            if d < 0.05:
                break
            steps.append(d)
            total += d
        return np.concatenate([[0.0], np.cumsum(steps)])
    return np.arange(0.0, cfg.horizon_s + 1e-9, 1.0)


def run_sweep(graph, physics, cfg, rng):
    """Design sweep + deterministic edge cases; returns trajectories."""
    trajs = []
    designs = sample_designs(cfg, rng)
    for i, design in enumerate(designs):
        events = sample_events(cfg, design, rng)
        rec = _record_grid(cfg, i, rng)
        traj = simulate(graph, physics, design, events, record_times=rec)
        traj.meta["kind"] = "sweep"
        trajs.append(traj)
    edges, plans = edge_case_designs(cfg)
    for i, design in enumerate(edges):
        events = plans.get(i, [])
        traj = simulate(graph, physics, design, events,
                        horizon_s=cfg.horizon_s)
        traj.meta["kind"] = "edge_case"
        trajs.append(traj)
    return trajs


SCENARIO_NAMES = ("stepwise_ramp", "power_drop_recovery",
                  "coupled_power_flow", "cascaded_flow")


def scenario(name, graph, physics, horizon_s=302.0, inlet_temp_k=290.0):
    """Named held-out transient programs used for evaluation."""
    if name == "stepwise_ramp":
        design = Design(1000.0, (0.14, 0.14, 0.14), 293.15, inlet_temp_k)
        events = [Event("power", 60.0 * k, 0.0, 1000.0 * (k + 1))
                  for k in range(1, 5)]
    elif name == "power_drop_recovery":
        design = Design(10000.0, (0.14, 0.14, 0.14), 293.15, inlet_temp_k)
        events = [Event("power", 100.0, 0.0, 5000.0),
                  Event("power", 150.0, 0.0, 10000.0)]
    elif name == "coupled_power_flow":
        design = Design(2000.0, (0.14, 0.1, 0.07), 293.15, inlet_temp_k)
        events = [Event("power", 100.0, 0.0, 4000.0),
                  Event("flow2", 100.0, 0.0, 0.05)]
    elif name == "cascaded_flow":
        design = Design(7500.0, (0.14, 0.1, 0.07), 293.15, inlet_temp_k)
        events = [Event("flow1", 30.0, 0.0, 0.10),
                  Event("flow2", 40.0, 0.0, 0.12),
                  Event("flow3", 50.0, 0.0, 0.14)]
    else:
        raise ConfigError(f"unknown scenario {name!r}; "
                          f"expected one of {SCENARIO_NAMES}")
    traj = simulate(graph, physics, design, events, horizon_s=horizon_s)
    traj.meta["kind"] = "scenario"
    traj.meta["scenario"] = name
    return traj


def perturb_physics(physics, severity):
    """Deterministic off-nominal physics family; severity 0 is the identity.

    Raises parasitic losses (with a temperature-dependent nonlinear term),
    slows heater/chamber thermal response, and degrades exchanger coupling.
    """
    s = float(severity)
    if s == 0.0:
        return physics
    loss = {k: v * (1.0 + 1.5 * s) for k, v in physics.loss_ua.items()}
    ua0 = {k: v * (1.0 - 0.25 * s) for k, v in physics.ua0.items()}
    kap = dict(physics.kappa_scale)
    for comp in ("heater", "chamber"):
        kap[comp] = kap.get(comp, 1.0) * (1.0 + 0.4 * s)
    return replace(physics, loss_ua=loss, ua0=ua0, kappa_scale=kap,
                   nonlinear_loss=physics.nonlinear_loss + 0.5 * s)


@dataclass(frozen=True)
class NoiseModel:
    """Instrument-grade measurement noise (uniform within stated bounds)."""
    temp_abs_k: float = 1.0
    flow_frac: float = 0.05
    power_frac: float = 0.05

    def apply(self, traj, rng):
        out = traj.copy()
        out.temps = out.temps + rng.uniform(
            -self.temp_abs_k, self.temp_abs_k, size=out.temps.shape)
        out.flows = out.flows * (1.0 + rng.uniform(
            -self.flow_frac, self.flow_frac, size=out.flows.shape))
        out.power = out.power * (1.0 + rng.uniform(
            -self.power_frac, self.power_frac, size=out.power.shape))
        out.meta["noisy"] = True
        return out


def generate_pseudo_experimental(graph, physics, n_runs, severity, rng,
                                 noise=NoiseModel(), horizon_s=302.0):
    """Off-nominal noisy runs standing in for facility recordings."""
    altered = perturb_physics(physics, severity)
    cfg = SweepConfig(n_designs=n_runs, n_edge_cases=0, horizon_s=horizon_s,
                      nonuniform_every=0)
    trajs = []
    for i, design in enumerate(sample_designs(cfg, rng)):
        events = sample_events(cfg, design, rng)
        traj = simulate(graph, altered, design, events, horizon_s=horizon_s)
        noisy = noise.apply(traj, rng) if noise else traj
        noisy.meta.update(traj.meta)
        noisy.meta["kind"] = "pseudo_experimental"
        noisy.meta["severity"] = severity
        trajs.append(noisy)
    return trajs
