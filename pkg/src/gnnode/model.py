"""Graph neural-ODE surrogate: encoders, message passing, latent dynamics.

One prediction step runs: typed node encoders -> L physics-scaled message
passing layers -> linear bottleneck to a latent half-width state -> RK4
integration of a control-gated vector field over the sampling interval ->
node-wise decoder emitting a normalized temperature rate, rescaled by the
per-node rate scale and the step length to a temperature increment.

Message types follow the plant relations:

* streamwise: two-layer GELU MLP on [h_src, h_dst], scaled by the source
  loop's normalized flow and the destination capacity normalization;
* transverse: positive conductance from a softplus MLP on
  [h_src, h_dst, edge context], multiplied by a harmonic mean of per-side
  flow factors (phi+eps)**alpha with a trainable exponent per component
  class per layer, applied to a linear transform of (h_src - h_dst);
* boundary: a linear projection of the power-actuator embedding injected at
  the heater node, and a per-node softplus loss conductance applied to a
  linear transform of (h_ambient - h_node).

Batching stacks B windows row-wise (plant row = window*n_plant + node) and
replicates edge index arrays with row offsets, so the recorded op count per
step is independent of B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelHyper:
    hidden: int = 64          # H; latent width is H//2
    layers: int = 4           # message-passing depth
    substeps: int = 4         # RK4 substeps per sampling interval
    eps_flow: float = 1e-6    # epsilon inside (phi+eps)**alpha
    dropout: float = 0.0      # post-update dropout probability
    alpha_init: float = 0.8
    alpha_scalar_init: float = 0.1
    alpha_clip: tuple = (1e-3, 2.0)

    @property
    def latent(self):
        return self.hidden // 2

    def as_dict(self):
        return {"hidden": self.hidden, "layers": self.layers,
                "substeps": self.substeps, "eps_flow": self.eps_flow,
                "dropout": self.dropout, "alpha_init": self.alpha_init,
                "alpha_scalar_init": self.alpha_scalar_init,
                "alpha_clip": list(self.alpha_clip)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["alpha_clip"] = tuple(d.get("alpha_clip", (1e-3, 2.0)))
        return cls(**d)


GROUP_GNN = "gnn"
GROUP_ACTUATOR = "actuator"
GROUP_HEAD = "head"


def _group_of(name):
    if name.startswith("enc_act"):
        return GROUP_ACTUATOR
    if name.startswith(("field_", "gate_", "ctrl_", "dec_", "alpha_scalar")):
        return GROUP_HEAD
    return GROUP_GNN


class ModelParams:
    """Ordered named parameter store with LLRD group mapping."""

    def __init__(self, hyper, n_plant):
        self.hyper = hyper
        self.n_plant = n_plant
        self._tensors = {}

    def _new(self, name, shape, rng, fan_in=None):
        if fan_in is None:
            fan_in = shape[0] if len(shape) > 0 else 1
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        t = ad.Tensor(rng.uniform(-bound, bound, size=shape))
        self._tensors[name] = t
        return t

    def _const(self, name, value, shape=()):
        t = ad.Tensor(np.full(shape, value, dtype=np.float64))
        self._tensors[name] = t
        return t

    @classmethod
    def init(cls, graph, hyper, rng):
        p = cls(hyper, graph.n_plant)
        h, dz, n = hyper.hidden, hyper.latent, graph.n_plant

        def mlp(prefix, d_in, d_hid, d_out):
            p._new(f"{prefix}_w1", (d_in, d_hid), rng)
            p._new(f"{prefix}_b1", (d_hid,), rng, fan_in=d_in)
            p._new(f"{prefix}_w2", (d_hid, d_out), rng)
            p._new(f"{prefix}_b2", (d_out,), rng, fan_in=d_hid)

        mlp("enc_plant", 3, h, h)
        mlp("enc_act", 2, h, h)
        mlp("enc_amb", 1, h, h)
        for l in range(hyper.layers):
            mlp(f"mp{l}_stream", 2 * h, h, h)
            mlp(f"mp{l}_ua", 2 * h + 4, h, 1)
            p._new(f"mp{l}_dt_w", (h, h), rng)
            p._const(f"mp{l}_alpha_hx", hyper.alpha_init)
            p._const(f"mp{l}_alpha_hc", hyper.alpha_init)
            p._const(f"mp{l}_uloss", -2.0, (n,))
            p._new(f"mp{l}_amb_w", (h, h), rng)
            p._new(f"mp{l}_pow_w", (h, h), rng)
            p._new(f"mp{l}_pow_b", (h,), rng, fan_in=h)
            p._const(f"mp{l}_ln_g", 1.0, (h,))
            p._const(f"mp{l}_ln_b", 0.0, (h,))
        p._new("bottleneck_w", (h, dz), rng)
        p._new("bottleneck_b", (dz,), rng, fan_in=h)

        p._const("field_ln0_g", 1.0, (dz,))
        p._const("field_ln0_b", 0.0, (dz,))
        p._new("field_w1", (dz, h), rng)
        p._new("field_b1", (h,), rng, fan_in=dz)
        p._const("field_ln1_g", 1.0, (h,))
        p._const("field_ln1_b", 0.0, (h,))
        p._new("field_w2", (h, h), rng)
        p._new("field_b2", (h,), rng, fan_in=h)
        p._const("field_ln2_g", 1.0, (h,))
        p._const("field_ln2_b", 0.0, (h,))
        p._new("field_w3", (h, dz), rng)
        p._new("field_b3", (dz,), rng, fan_in=h)
        p._new("gate_w", (dz, dz), rng)
        p._const("gate_b", 0.0, (dz,))
        p._new("ctrl_w", (5, dz), rng)
        p._new("ctrl_b", (dz,), rng, fan_in=5)
        p._const("alpha_scalar", hyper.alpha_scalar_init)

        mlp_dec = [("dec_w1", (dz, h), dz), ("dec_b1", (h,), dz),
                   ("dec_w2", (h, dz), h), ("dec_b2", (dz,), h),
                   ("dec_w3", (dz, 1), dz), ("dec_b3", (1,), dz)]
        for name, shape, fan in mlp_dec:
            p._new(name, shape, rng, fan_in=fan)
        return p

    def __getitem__(self, name):
        return self._tensors[name]

    def names(self):
        return list(self._tensors.keys())

    def tensors(self):
        return list(self._tensors.values())

    def groups(self):
        """name -> list of tensors, in LLRD group order."""
        out = {GROUP_GNN: [], GROUP_ACTUATOR: [], GROUP_HEAD: []}
        for name, t in self._tensors.items():
            out[_group_of(name)].append(t)
        return out

    def group_of(self, name):
        return _group_of(name)

    def watch(self, tape):
        for t in self._tensors.values():
            tape.watch(t)

    def apply_constraints(self):
        """Clamp flow exponents to their admissible interval."""
        lo, hi = self.hyper.alpha_clip
        for name, t in self._tensors.items():
            if "_alpha_h" in name:
                t.data = np.clip(t.data, lo, hi)

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state(self, arrays):
        for name, t in self._tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != "
                                 f"{t.data.shape}")
            t.data = arr.copy()

    def copy(self):
        dup = ModelParams(self.hyper, self.n_plant)
        for name, t in self._tensors.items():
            nt = ad.Tensor(t.data.copy())
            dup._tensors[name] = nt
        return dup


class GraphIndex:
    """Static per-graph edge index arrays in model layout."""

    def __init__(self, graph):
        self.graph = graph
        n = graph.n_plant
        g2p = {node.index: i for i, node in enumerate(graph.plant)}
        g2a = {node.index: i for i, node in enumerate(graph.actuators)}

        s_src, s_act, s_dst, s_loop, s_rate = [], [], [], [], []
        for e in graph.edges_by_relation("streamwise"):
            src = graph.nodes[e.src]
            s_act.append(src.kind == "actuator")
            s_src.append(g2a[e.src] if src.kind == "actuator" else g2p[e.src])
            s_dst.append(g2p[e.dst])
            s_loop.append(e.loop_id - 1)
            s_rate.append(e.rate_scale)
        self.s_src = np.array(s_src, dtype=np.intp)
        self.s_act = np.array(s_act, dtype=bool)
        self.s_dst = np.array(s_dst, dtype=np.intp)
        self.s_loop = np.array(s_loop, dtype=np.intp)
        self.s_rate = np.array(s_rate)

        # transverse edges sorted heater-chamber first, then heat exchangers
        trans = sorted(graph.edges_by_relation("transverse"),
                       key=lambda e: (e.component != "heater_chamber",
                                      e.src, e.dst))
        self.t_src = np.array([g2p[e.src] for e in trans], dtype=np.intp)
        self.t_dst = np.array([g2p[e.dst] for e in trans], dtype=np.intp)
        self.t_srcloop = np.array([e.src_loop - 1 for e in trans],
                                  dtype=np.intp)
        self.t_dstloop = np.array([e.dst_loop - 1 for e in trans],
                                  dtype=np.intp)
        self.t_is_hx = np.array([e.component == "heat_exchanger"
                                 for e in trans], dtype=bool)
        self.t_rate = np.array([e.rate_scale for e in trans])
        self.n_hc = int(np.sum(~self.t_is_hx))
        self.n_hx = int(np.sum(self.t_is_hx))

        self.heater = graph.heater_plant_index
        self.power_act = g2a[graph.power_actuator.index]
        for e in graph.edges:
            if e.relation == "boundary" and e.component == "power":
                self.pow_rate = e.rate_scale
        amb_rate = np.zeros(n)
        for e in graph.edges:
            if e.relation == "boundary" and e.component == "ambient_loss":
                amb_rate[g2p[e.dst]] = e.rate_scale
        self.amb_rate = amb_rate
        self.n_plant = n
        self.n_act = len(graph.actuators)
        self._batches = {}

    def batch(self, b):
        cached = self._batches.get(b)
        if cached is not None:
            return cached
        n, na = self.n_plant, self.n_act
        offs_p = np.arange(b) * n

        def plant_rows(idx):
            # edge-major: rows [e*b + w]
            return (idx[:, None] + offs_p[None, :]).reshape(-1)

        s_src_rows = np.where(
            self.s_act[:, None],
            b * n + self.s_src[:, None] + np.arange(b)[None, :] * na,
            self.s_src[:, None] + offs_p[None, :]).reshape(-1)
        bidx = {
            "s_src_rows": s_src_rows,
            "s_dst_rows": plant_rows(self.s_dst),
            "t_src_rows": plant_rows(self.t_src),
            "t_dst_rows": plant_rows(self.t_dst),
            "pow_src_rows": self.power_act + np.arange(b) * na,
            "pow_dst_rows": self.heater + offs_p,
            "amb_of_row": np.repeat(np.arange(b), n),
            "node_of_row": np.tile(np.arange(n), b),
            "win_of_row": np.repeat(np.arange(b), n),
            "s_rate_col": np.repeat(self.s_rate, b)[:, None],
            "t_rate_col": np.repeat(self.t_rate, b)[:, None],
            "t_ctx_flags": np.repeat(
                np.column_stack([self.t_is_hx.astype(np.float64),
                                 (~self.t_is_hx).astype(np.float64)]),
                b, axis=0),
            "amb_rate_col": np.tile(self.amb_rate, b)[:, None],
        }
        self._batches[b] = bidx
        return bidx

    def step_constants(self, feats):
        """Per-step constant arrays derived from the frame's flows."""
        b = feats.batch
        bidx = self.batch(b)
        phi = feats.flows_norm                       # (B, 3)
        phi_pos = np.maximum(phi, 0.0)               # scaling floor at zero
        s_coeff = (phi_pos[:, self.s_loop].T.reshape(-1, 1)
                   * bidx["s_rate_col"])
        phi_src = phi_pos[:, self.t_srcloop].T.reshape(-1, 1)
        phi_dst = phi_pos[:, self.t_dstloop].T.reshape(-1, 1)
        ctx = np.concatenate([bidx["t_ctx_flags"], phi_src, phi_dst], axis=1)
        return {"bidx": bidx, "stream_coeff": s_coeff, "phi_src": phi_src,
                "phi_dst": phi_dst, "trans_ctx": ctx,
                "controls": feats.controls}


def _mlp2(params, prefix, x, act=ad.gelu):
    h = ad.add(ad.matmul(x, params[f"{prefix}_w1"]), params[f"{prefix}_b1"])
    h = act(h)
    return ad.add(ad.matmul(h, params[f"{prefix}_w2"]), params[f"{prefix}_b2"])


def encode(params, feats):
    """Typed encoders -> (H_plant, H_act, H_amb) embeddings."""
    hp = _mlp2(params, "enc_plant", feats.plant)
    ha = _mlp2(params, "enc_act", ad.constant(feats.actuator))
    hm = _mlp2(params, "enc_amb", ad.constant(feats.ambient))
    return hp, ha, hm


def _power_pair(params, layer, which, consts, eps):
    """(phi+eps)**alpha per class (hc rows then hx rows), concatenated."""
    n_hc_rows = consts["n_hc_rows"]
    out = []
    for cls, sl in (("hc", slice(0, n_hc_rows)),
                    ("hx", slice(n_hc_rows, None))):
        base = consts[which][sl] + eps
        if base.size:
            out.append(ad.power(ad.constant(base),
                                params[f"mp{layer}_alpha_{cls}"]))
    return ad.concat(out, axis=0) if len(out) > 1 else out[0]


def message_pass(params, gidx, consts, layer, hp, ha, hm, rng=None,
                 training=False):
    """One residual update of the plant embeddings (others pass through)."""
    bidx = consts["bidx"]
    b = consts["batch"]
    n_rows = b * gidx.n_plant

    hp_all = ad.concat([hp, ha], axis=0)
    src = ad.take_rows(hp_all, bidx["s_src_rows"])
    dst = ad.take_rows(hp, bidx["s_dst_rows"])
    msg = _mlp2(params, f"mp{layer}_stream", ad.concat([src, dst], axis=1))
    msg = ad.mul(msg, consts["stream_coeff"])
    agg = ad.scatter_rows(msg, bidx["s_dst_rows"], n_rows)

    tsrc = ad.take_rows(hp, bidx["t_src_rows"])
    tdst = ad.take_rows(hp, bidx["t_dst_rows"])
    tx = ad.concat([tsrc, tdst, ad.constant(consts["trans_ctx"])], axis=1)
    ua = ad.softplus(_mlp2(params, f"mp{layer}_ua", tx))
    eps = params.hyper.eps_flow
    s_src = _power_pair(params, layer, "phi_src", consts, eps)
    s_dst = _power_pair(params, layer, "phi_dst", consts, eps)
    hmean = ad.div(ad.mul(ad.mul(s_src, s_dst), 2.0), ad.add(s_src, s_dst))
    weight = ad.mul(ad.mul(ua, hmean), bidx["t_rate_col"])
    diff = ad.matmul(ad.sub(tsrc, tdst), params[f"mp{layer}_dt_w"])
    agg = ad.add(agg, ad.scatter_rows(ad.mul(diff, weight),
                                      bidx["t_dst_rows"], n_rows))

    hpow = ad.take_rows(ha, bidx["pow_src_rows"])
    inj = ad.add(ad.matmul(hpow, params[f"mp{layer}_pow_w"]),
                 params[f"mp{layer}_pow_b"])
    inj = ad.mul(inj, gidx.pow_rate)
    agg = ad.add(agg, ad.scatter_rows(inj, bidx["pow_dst_rows"], n_rows))

    amb_rows = ad.take_rows(hm, bidx["amb_of_row"])
    adiff = ad.matmul(ad.sub(amb_rows, hp), params[f"mp{layer}_amb_w"])
    ucol = ad.take_rows(
        ad.reshape(ad.softplus(params[f"mp{layer}_uloss"]),
                   (gidx.n_plant, 1)),
        bidx["node_of_row"])
    agg = ad.add(agg, ad.mul(adiff, ad.mul(ucol, bidx["amb_rate_col"])))

    out = ad.gelu(ad.layer_norm(ad.add(hp, agg), params[f"mp{layer}_ln_g"],
                                params[f"mp{layer}_ln_b"]))
    p_drop = params.hyper.dropout
    if training and p_drop > 0.0:
        if rng is None:
            raise ConfigError("dropout requires an rng in training mode")
        keep = (rng.random(out.shape) >= p_drop) / (1.0 - p_drop)
        out = ad.mul(out, keep)
    return out


def to_latent(params, hp):
    return ad.add(ad.matmul(hp, params["bottleneck_w"]),
                  params["bottleneck_b"])


def control_rows(params, consts):
    """Control embedding c(u) expanded to one row per plant node."""
    u = ad.constant(consts["controls"])
    c = ad.add(ad.matmul(u, params["ctrl_w"]), params["ctrl_b"])
    return ad.take_rows(c, consts["bidx"]["win_of_row"])


def vector_field(params, z, c_rows):
    """dz/dt = alpha * (f(z~) + sigmoid(z~ W_g + b_g) * c(u))."""
    zt = ad.layer_norm(z, params["field_ln0_g"], params["field_ln0_b"])
    f = ad.add(ad.matmul(zt, params["field_w1"]), params["field_b1"])
    f = ad.silu(ad.layer_norm(f, params["field_ln1_g"], params["field_ln1_b"]))
    f = ad.add(ad.matmul(f, params["field_w2"]), params["field_b2"])
    f = ad.silu(ad.layer_norm(f, params["field_ln2_g"], params["field_ln2_b"]))
    f = ad.add(ad.matmul(f, params["field_w3"]), params["field_b3"])
    gate = ad.sigmoid(ad.add(ad.matmul(zt, params["gate_w"]),
                             params["gate_b"]))
    return ad.mul(ad.add(f, ad.mul(gate, c_rows)), params["alpha_scalar"])


def integrate_rk4(field_fn, z, delta, substeps):
    """Classical fixed-step RK4 over ``substeps`` equal steps of ``delta``.

    ``field_fn(z) -> dz/dt`` and ``delta`` broadcasts against z (column per
    row for per-window steps, scalar otherwise). Works on tensors and plain
    arrays alike.
    """
    half = 0.5 * delta
    sixth = delta / 6.0
    for _ in range(substeps):
        k1 = field_fn(z)
        k2 = field_fn(ad.add(z, ad.mul(k1, half)))
        k3 = field_fn(ad.add(z, ad.mul(k2, half)))
        k4 = field_fn(ad.add(z, ad.mul(k3, delta)))
        incr = ad.add(ad.add(k1, k4), ad.mul(ad.add(k2, k3), 2.0))
        z = ad.add(z, ad.mul(incr, sixth))
    return z


def rk4_integrate(params, z, c_rows, dt, substeps, n_plant):
    """Latent update with zero-order-held controls; dt may vary per window."""
    dt = np.asarray(dt, dtype=np.float64).reshape(-1)
    delta = np.repeat(dt / substeps, n_plant)[:, None]
    return integrate_rk4(lambda s: vector_field(params, s, c_rows), z,
                         delta, substeps)


def decode(params, z):
    """Latent state -> normalized per-node temperature rate (rows, 1)."""
    h = ad.gelu(ad.add(ad.matmul(z, params["dec_w1"]), params["dec_b1"]))
    h = ad.gelu(ad.add(ad.matmul(h, params["dec_w2"]), params["dec_b2"]))
    return ad.add(ad.matmul(h, params["dec_w3"]), params["dec_b3"])


def predict_step(params, gidx, stats, feats, T_now, dt, rng=None,
                 training=False):
    """One forward step for B windows.

    Returns (T_next, rate_hat): raw next temperatures (B, n_plant) and the
    normalized rate r_hat (B, n_plant). The temperature increment is
    r_hat * sigma_i * dt per node.
    """
    b, n = feats.batch, gidx.n_plant
    consts = gidx.step_constants(feats)
    consts["batch"] = b
    consts["n_hc_rows"] = gidx.n_hc * b
    hp, ha, hm = encode(params, feats)
    for layer in range(params.hyper.layers):
        hp = message_pass(params, gidx, consts, layer, hp, ha, hm,
                          rng=rng, training=training)
    z = to_latent(params, hp)
    c_rows = control_rows(params, consts)
    z = rk4_integrate(params, z, c_rows, dt, params.hyper.substeps, n)
    rate = ad.reshape(decode(params, z), (b, n))
    dt_col = np.asarray(dt, dtype=np.float64).reshape(b, 1)
    d_temp = ad.mul(rate, stats.rate_std[None, :] * dt_col)
    T_next = ad.add(ad.as_tensor(T_now), d_temp)
    return T_next, rate
