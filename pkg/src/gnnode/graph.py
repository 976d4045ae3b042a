"""Heterogeneous directed plant graph.

Node kinds: ``plant`` (thermal state, instrumented or not), ``actuator``
(heater power, loop-3 inlet temperature), ``ambient`` (fixed boundary
temperature). Relations: ``streamwise`` (advection along a loop, tagged with
the loop id), ``transverse`` (conductive coupling inside heat exchangers and
the heater/chamber assembly, present in both directions), ``boundary``
(heater power injection, per-node ambient loss).

The canonical facility layout ships as ``configs/facility.json``: three
coupled loops, 17 plant nodes of which 5 are uninstrumented, two actuators,
one ambient node. Indices are assigned in config order: plant nodes first,
then actuators, then the ambient node; everything downstream (imputation,
model layout, checkpoints) keys off that order, which is why the graph hash
goes into the checkpoint manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, GraphValidationError

STREAMWISE = "streamwise"
TRANSVERSE = "transverse"
BOUNDARY = "boundary"

RELATIONS = (STREAMWISE, TRANSVERSE, BOUNDARY)
TRANSVERSE_COMPONENTS = ("heater_chamber", "heat_exchanger")


@dataclass(frozen=True)
class NodeSpec:
    index: int
    name: str
    kind: str                      # plant | actuator | ambient
    instrumented: bool = False
    volume_m3: float = 0.0
    kappa: float = 1.0             # lumped heat-capacity multiplier >= 1
    component: str = ""            # heater / chamber / pipe / hx_shell / ...
    actuator_kind: str = ""        # power | inlet_temperature (actuators)

    @property
    def capacity_scale(self):
        """Volume * kappa; relative thermal capacity used for rate scaling."""
        return self.volume_m3 * self.kappa


@dataclass(frozen=True)
class EdgeSpec:
    src: int
    dst: int
    relation: str
    loop_id: int = 0               # streamwise loop tag; 0 for non-streamwise
    component: str = ""            # transverse/boundary class tag
    src_loop: int = 0              # flow side feeding the src end (transverse)
    dst_loop: int = 0
    rate_scale: float = 1.0        # destination-capacity normalization


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    coverage: dict = field(default_factory=dict)  # uninstr name -> sources

    @property
    def ok(self):
        return not self.violations


class PlantGraph:
    """Immutable-by-convention container; build through :func:`build_graph`."""

    def __init__(self, config, nodes, edges, loops, ambient_temperature_k):
        self.config = config
        self.nodes = nodes
        self.edges = edges
        self.loops = loops                       # loop_id -> list of names
        self.ambient_temperature_k = float(ambient_temperature_k)
        self.name_to_index = {n.name: n.index for n in nodes}
        self.plant = [n for n in nodes if n.kind == "plant"]
        self.actuators = [n for n in nodes if n.kind == "actuator"]
        self.ambient = [n for n in nodes if n.kind == "ambient"]
        self.n_plant = len(self.plant)
        self.n_loops = len(loops)
        self.plant_names = [n.name for n in self.plant]
        self.mask = np.array([1.0 if n.instrumented else 0.0
                              for n in self.plant])
        self.capacity = np.array([n.capacity_scale for n in self.plant])
        self.instrumented_idx = np.flatnonzero(self.mask > 0)
        self.uninstrumented_idx = np.flatnonzero(self.mask == 0)
        self._in = {}
        self._und = {}
        for e in edges:
            self._in.setdefault(e.dst, []).append(e)
            if e.relation in (STREAMWISE, TRANSVERSE):
                self._und.setdefault(e.dst, set()).add(e.src)
                self._und.setdefault(e.src, set()).add(e.dst)

    # -- lookups ----------------------------------------------------------

    def node(self, key):
        if isinstance(key, str):
            try:
                return self.nodes[self.name_to_index[key]]
            except KeyError:
                raise ConfigError(f"unknown node name: {key!r}") from None
        return self.nodes[key]

    @property
    def heater_plant_index(self):
        for i, n in enumerate(self.plant):
            if n.component == "heater":
                return i
        raise ConfigError("graph has no heater component node")

    @property
    def power_actuator(self):
        for n in self.actuators:
            if n.actuator_kind == "power":
                return n
        raise ConfigError("graph has no power actuator")

    @property
    def inlet_actuator(self):
        for n in self.actuators:
            if n.actuator_kind == "inlet_temperature":
                return n
        raise ConfigError("graph has no inlet-temperature actuator")

    def in_neighbors(self, key, relation=None):
        """Global indices of in-neighbors, ascending."""
        idx = self.node(key).index
        out = [e.src for e in self._in.get(idx, ())
               if relation is None or e.relation == relation]
        return sorted(set(out))

    def undirected_neighbors(self, key):
        """1-hop neighborhood over streamwise+transverse edges, ascending."""
        idx = self.node(key).index
        return sorted(self._und.get(idx, ()))

    def instrumented_neighbors(self, key):
        """Measured temperature sources 1 hop away: instrumented plant nodes
        plus inlet-temperature actuators."""
        out = []
        for j in self.undirected_neighbors(key):
            n = self.nodes[j]
            if n.kind == "plant" and n.instrumented:
                out.append(j)
            elif n.kind == "actuator" and n.actuator_kind == "inlet_temperature":
                out.append(j)
        return out

    def edges_by_relation(self, relation):
        return [e for e in self.edges if e.relation == relation]

    def graph_hash(self):
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_config(self):
        return json.loads(json.dumps(self.config))


def _rate_scales(plant_nodes):
    caps = np.array([n.capacity_scale for n in plant_nodes])
    if np.any(caps <= 0):
        return {n.index: 1.0 for n in plant_nodes}
    ref = float(np.median(caps))
    return {n.index: ref / n.capacity_scale for n in plant_nodes}


def build_graph(config):
    """Construct a :class:`PlantGraph` from a config dict (see facility.json)."""
    try:
        node_cfgs = config["nodes"]
        loop_cfgs = config["loops"]
        trans_cfgs = config.get("transverse", [])
        act_cfgs = config.get("actuators", [])
        ambient_t = config.get("ambient_temperature_k", 293.15)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"graph config missing section: {exc}") from exc

    nodes = []
    for cfg in node_cfgs:
        nodes.append(NodeSpec(
            index=len(nodes), name=cfg["name"], kind="plant",
            instrumented=bool(cfg.get("instrumented", True)),
            volume_m3=float(cfg.get("volume_m3", 1e-3)),
            kappa=float(cfg.get("kappa", 1.0)),
            component=cfg.get("component", "pipe")))
    for cfg in act_cfgs:
        nodes.append(NodeSpec(
            index=len(nodes), name=cfg["name"], kind="actuator",
            actuator_kind=cfg.get("kind", "power"),
            component=cfg.get("kind", "")))
    nodes.append(NodeSpec(index=len(nodes), name="AMB", kind="ambient",
                          component="ambient"))

    by_name = {}
    for n in nodes:
        if n.name in by_name:
            raise ConfigError(f"duplicate node name {n.name!r}")
        by_name[n.name] = n

    def need(name):
        try:
            return by_name[name]
        except KeyError:
            raise ConfigError(f"edge references unknown node {name!r}") from None

    plant_nodes = [n for n in nodes if n.kind == "plant"]
    scale = _rate_scales(plant_nodes)
    edges = []
    loops = {}

    for lc in loop_cfgs:
        lid = int(lc["loop_id"])
        chain = list(lc["chain"])
        loops[lid] = chain
        refs = [need(nm) for nm in chain]
        pairs = list(zip(refs[:-1], refs[1:]))
        if lc.get("closed", False):
            pairs.append((refs[-1], refs[0]))
        for src, dst in pairs:
            edges.append(EdgeSpec(
                src=src.index, dst=dst.index, relation=STREAMWISE,
                loop_id=lid, src_loop=lid, dst_loop=lid,
                rate_scale=scale.get(dst.index, 1.0)))

    for tc in trans_cfgs:
        a, b = need(tc["a"]), need(tc["b"])
        comp = tc.get("component", "heat_exchanger")
        la, lb = int(tc.get("loop_a", 0)), int(tc.get("loop_b", 0))
        for src, dst, ls, ld in ((a, b, la, lb), (b, a, lb, la)):
            edges.append(EdgeSpec(
                src=src.index, dst=dst.index, relation=TRANSVERSE,
                component=comp, src_loop=ls, dst_loop=ld,
                rate_scale=scale.get(dst.index, 1.0)))

    ambient = nodes[-1]
    for cfg in act_cfgs:
        if cfg.get("kind") == "power":
            tgt = need(cfg["target"])
            edges.append(EdgeSpec(
                src=by_name[cfg["name"]].index, dst=tgt.index,
                relation=BOUNDARY, component="power",
                rate_scale=scale.get(tgt.index, 1.0)))
    for n in plant_nodes:
        edges.append(EdgeSpec(
            src=ambient.index, dst=n.index, relation=BOUNDARY,
            component="ambient_loss", rate_scale=scale.get(n.index, 1.0)))

    return PlantGraph(config=json.loads(json.dumps(config)), nodes=nodes,
                      edges=edges, loops=loops,
                      ambient_temperature_k=ambient_t)


def load_graph(path):
    with open(path, "r", encoding="utf-8") as fh:
        return build_graph(json.load(fh))


def canonical_graph():
    """The facility layout shipped with the package."""
    cfg = resources.files("gnnode.configs").joinpath("facility.json")
    return build_graph(json.loads(cfg.read_text(encoding="utf-8")))


def validate(graph):
    """Structural invariants; returns a :class:`ValidationReport`."""
    rep = ValidationReport()
    add = rep.violations.append

    if len(graph.ambient) != 1:
        add(f"expected exactly one ambient node, found {len(graph.ambient)}")
    powers = [n for n in graph.actuators if n.actuator_kind == "power"]
    if len(powers) != 1:
        add(f"expected exactly one power actuator, found {len(powers)}")
    for n in graph.actuators:
        if n.actuator_kind not in ("power", "inlet_temperature"):
            add(f"actuator {n.name!r} has unknown kind {n.actuator_kind!r}")

    for n in graph.plant:
        if n.volume_m3 <= 0:
            add(f"plant node {n.name!r} has non-positive volume")
        if n.kappa < 1.0:
            add(f"plant node {n.name!r} has kappa < 1")

    if len(graph.instrumented_idx) == 0:
        add("no instrumented plant nodes")

    plant_idx = {n.index for n in graph.plant}
    for e in graph.edges:
        if e.relation not in RELATIONS:
            add(f"edge ({e.src},{e.dst}) has unknown relation {e.relation!r}")
        if e.src == e.dst:
            add(f"self-edge at node {graph.nodes[e.src].name!r}")
        if e.dst not in plant_idx:
            add(f"edge into non-plant node {graph.nodes[e.dst].name!r}")
        if e.rate_scale <= 0:
            add(f"edge ({e.src},{e.dst}) has non-positive rate scale")

    # streamwise edges must form a simple chain/cycle per loop
    for lid, chain in graph.loops.items():
        es = [e for e in graph.edges
              if e.relation == STREAMWISE and e.loop_id == lid]
        outs = {}
        ins = {}
        for e in es:
            outs[e.src] = outs.get(e.src, 0) + 1
            ins[e.dst] = ins.get(e.dst, 0) + 1
        if any(c > 1 for c in outs.values()) or any(c > 1 for c in ins.values()):
            add(f"loop {lid} streamwise edges branch")
        member_names = set(chain)
        for e in es:
            for end in (e.src, e.dst):
                if graph.nodes[end].kind == "plant" \
                        and graph.nodes[end].name not in member_names:
                    add(f"loop {lid} edge touches non-member "
                        f"{graph.nodes[end].name!r}")

    # transverse edges come in symmetric pairs
    trans = {(e.src, e.dst) for e in graph.edges_by_relation(TRANSVERSE)}
    for s, d in trans:
        if (d, s) not in trans:
            add(f"transverse edge {graph.nodes[s].name}->"
                f"{graph.nodes[d].name} lacks its reverse")
    for e in graph.edges_by_relation(TRANSVERSE):
        if e.component not in TRANSVERSE_COMPONENTS:
            add(f"transverse edge ({e.src},{e.dst}) has unknown component "
                f"{e.component!r}")

    # boundary wiring: one ambient-loss edge per plant node, power -> heater
    amb_idx = graph.ambient[0].index if graph.ambient else -1
    loss_dsts = [e.dst for e in graph.edges
                 if e.relation == BOUNDARY and e.component == "ambient_loss"]
    for e in graph.edges:
        if e.relation == BOUNDARY and e.component == "ambient_loss" \
                and e.src != amb_idx:
            add("ambient-loss edge does not originate at the ambient node")
    if sorted(loss_dsts) != sorted(plant_idx):
        add("ambient-loss edges do not cover each plant node exactly once")
    for e in graph.edges:
        if e.relation == BOUNDARY and e.component == "power":
            if graph.nodes[e.src].actuator_kind != "power":
                add("power edge does not originate at the power actuator")
            if graph.nodes[e.dst].component != "heater":
                add("power edge does not target the heater node")

    # every plant node participates in the physical (non-boundary) topology
    touched = set()
    for e in graph.edges:
        if e.relation in (STREAMWISE, TRANSVERSE):
            touched.add(e.src)
            touched.add(e.dst)
    for n in graph.plant:
        if n.index not in touched:
            add(f"plant node {n.name!r} has no streamwise/transverse edge")

    # imputation is only well-posed with measured 1-hop sources
    for i in graph.uninstrumented_idx:
        name = graph.plant[int(i)].name
        srcs = [graph.nodes[j].name
                for j in graph.instrumented_neighbors(name)]
        rep.coverage[name] = srcs
        if not srcs:
            add(f"uninstrumented node {name!r} has no instrumented "
                f"1-hop neighbor")

    return rep


def ensure_valid(graph):
    rep = validate(graph)
    if not rep.ok:
        raise GraphValidationError(rep.violations)
    return rep
