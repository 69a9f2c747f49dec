"""Unitary TTN and MERA topologies with ancillas and dephasing insertion.

A topology is a DAG of unitary nodes over integer wire ids. Wires keep
their identity through a node: the node consumes its input wires, keeps
some of them as outputs and traces the rest. The kept-wire convention is
fixed once: a tree node keeps the first half of its wires (in input
order) and traces the second half; any other convention is equivalent up
to relabeling of the learned unitary. Entanglers keep everything.

Layers are numbered with the data layer as 0 and every unitary layer
(entangler layers included, for the MERA) counting up from 1. Dephasing
acts at layer boundaries: boundary i sits after layer i, and a wire
produced at layer a and consumed at layer b is damped once for every
enabled boundary in [a, b). Boundary 0 (after the data layer) is enabled
by the ``dephase_data_layer`` flag; internal boundaries by membership in
``dephase_points`` (default: all of them).

Ancilla schemes:

* per-data-qubit: k ancillas in |0> attach to every data qubit, so leaf
  groups and bonds are 1 + k wires wide and every tree node halves its
  2(1 + k) wires.
* per-node: bonds stay one wire wide; k fresh |0> ancillas enter at each
  tree node, which keeps one wire and traces 1 + k.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import unpack_hermitian

PER_QUBIT = "per-qubit"
PER_NODE = "per-node"

CHECKPOINT_MAGIC = b"DTNCKPT1"

DEFAULT_WIDTH_CAP = 12


class WidthCapExceededError(Exception):
    """The contraction needs a register wider than the configured cap,
    i.e. the configuration is beyond desk scale."""


@dataclass(frozen=True)
class UnitaryNode:
    """One unitary of the network, with its wiring metadata."""

    node_id: int
    kind: str  # "tree" | "entangler"
    layer: int
    input_wires: tuple
    kept_wires: tuple
    traced_wires: tuple
    ancilla_wires: tuple = ()

    def __post_init__(self):
        if set(self.kept_wires) | set(self.traced_wires) != set(self.input_wires):
            raise ValueError(f"node {self.node_id}: outputs do not partition inputs")

    @property
    def n_wires(self) -> int:
        return len(self.input_wires)

    @property
    def dim(self) -> int:
        return 2 ** self.n_wires

    @property
    def n_inputs(self) -> int:
        """Non-ancilla input qubits (n_i)."""
        return len(self.input_wires) - len(self.ancilla_wires)

    @property
    def n_ancillas(self) -> int:
        return len(self.ancilla_wires)

    @property
    def n_outputs(self) -> int:
        """Kept output qubits (n_o)."""
        return len(self.kept_wires)

    @property
    def is_root(self) -> bool:
        return False  # overridden via NetworkTopology.root_id


@dataclass
class NetworkTopology:
    """The node DAG of a TTN or MERA plus dephasing configuration."""

    kind: str  # "ttn" | "mera"
    m: int
    k: int
    scheme: str
    nodes: list
    n_layers: int  # unitary layers, data layer excluded
    p: float = 0.0
    dephase_data_layer: bool = True
    dephase_points: frozenset = None
    leaf_ancillas: int = 0  # ancillas per data qubit attached at the leaves

    def __post_init__(self):
        if self.dephase_points is None:
            self.dephase_points = frozenset(range(1, self.n_layers))

    @property
    def root(self) -> UnitaryNode:
        return self.nodes[-1]

    @property
    def readout_wire(self) -> int:
        return self.root.kept_wires[0]

    @property
    def tree_nodes(self):
        return [n for n in self.nodes if n.kind == "tree"]

    @property
    def entanglers(self):
        return [n for n in self.nodes if n.kind == "entangler"]

    def node_dims(self):
        return [n.dim for n in self.nodes]

    def parameter_count(self) -> int:
        """Total real trainable degrees of freedom (d^2 per node)."""
        return sum(d * d for d in self.node_dims())

    def ancilla_counting(self):
        """Per-node (n_i, n_a, n_o) with the Stinespring bound n_a <= 2 n_o;
        every row of this table satisfies the bound, so each node realizes
        a proper subset of all CPTP maps."""
        return [
            {"node": n.node_id, "kind": n.kind, "layer": n.layer,
             "n_i": n.n_inputs, "n_a": n.n_ancillas, "n_o": n.n_outputs,
             "stinespring_ok": n.n_ancillas <= 2 * n.n_outputs}
            for n in self.nodes
        ]

    def boundary_enabled(self, boundary: int) -> bool:
        if boundary == 0:
            return self.dephase_data_layer
        return boundary in self.dephase_points

    def crossing_count(self, produced_layer: int, consumed_layer: int) -> int:
        """Number of enabled dephasing boundaries a wire crosses between
        its producer and its consumer."""
        return sum(1 for b in range(produced_layer, consumed_layer)
                   if self.boundary_enabled(b))


def _require_power_of_two(m: int, minimum: int):
    if m < minimum or (m & (m - 1)) != 0:
        raise ValueError(f"feature count m={m} must be a power of two >= {minimum}")


def build_ttn(m: int, k: int = 0, scheme: str = PER_QUBIT,
              p: float = 0.0, dephase_data_layer: bool = True) -> NetworkTopology:
    """Binary unitary TTN on m features with k ancillas (per data qubit or
    per node). Produces m - 1 tree nodes over log2(m) layers."""
    _require_power_of_two(m, 4)
    if k < 0:
        raise ValueError("ancilla count must be non-negative")
    if scheme not in (PER_QUBIT, PER_NODE):
        raise ValueError(f"unknown ancilla scheme '{scheme}'")

    next_wire = m
    nodes = []
    if scheme == PER_QUBIT:
        bonds = []
        for q in range(m):
            anc = tuple(range(next_wire, next_wire + k))
            next_wire += k
            bonds.append((q,) + anc)
    else:
        bonds = [(q,) for q in range(m)]

    n_layers = m.bit_length() - 1
    for layer in range(1, n_layers + 1):
        new_bonds = []
        for j in range(0, len(bonds), 2):
            if scheme == PER_QUBIT:
                inputs = bonds[j] + bonds[j + 1]
                half = len(inputs) // 2
                kept, traced = inputs[:half], inputs[half:]
                anc = (bonds[j][1:] + bonds[j + 1][1:]) if layer == 1 else ()
            else:
                anc = tuple(range(next_wire, next_wire + k))
                next_wire += k
                inputs = bonds[j] + bonds[j + 1] + anc
                kept, traced = inputs[:1], inputs[1:]
            nodes.append(UnitaryNode(
                node_id=len(nodes), kind="tree", layer=layer,
                input_wires=inputs, kept_wires=kept, traced_wires=traced,
                ancilla_wires=anc))
            new_bonds.append(kept)
        bonds = new_bonds

    return NetworkTopology(kind="ttn", m=m, k=k, scheme=scheme, nodes=nodes,
                           n_layers=n_layers, p=p,
                           dephase_data_layer=dephase_data_layer,
                           leaf_ancillas=k if scheme == PER_QUBIT else 0)


def build_mera(m: int, k: int = 0, p: float = 0.0,
               dephase_data_layer: bool = True) -> NetworkTopology:
    """MERA: a unitary TTN with entangler layers inserted before every
    tree layer except the root layer. Entanglers straddle neighboring
    subtree boundaries; at the data level they act on data-qubit pairs
    before ancilla attachment, internally on full bond pairs."""
    _require_power_of_two(m, 8)
    if k not in (0, 1):
        raise ValueError("MERA supports k in {0, 1} ancillas per data qubit")

    next_wire = m
    leaf_anc = []
    for q in range(m):
        anc = tuple(range(next_wire, next_wire + k))
        next_wire += k
        leaf_anc.append(anc)

    nodes = []
    layer = 0
    n_tree_layers = m.bit_length() - 1
    bonds = None
    for t in range(1, n_tree_layers + 1):
        if t == 1:
            ent_bonds = [(q,) for q in range(m)]  # data wires, pre-ancilla
        else:
            ent_bonds = bonds
        if t < n_tree_layers:
            layer += 1
            for j in range(1, len(ent_bonds) - 1, 2):
                inputs = ent_bonds[j] + ent_bonds[j + 1]
                nodes.append(UnitaryNode(
                    node_id=len(nodes), kind="entangler", layer=layer,
                    input_wires=inputs, kept_wires=inputs, traced_wires=()))
        if t == 1:
            bonds = [(q,) + leaf_anc[q] for q in range(m)]
        layer += 1
        new_bonds = []
        for j in range(0, len(bonds), 2):
            inputs = bonds[j] + bonds[j + 1]
            half = len(inputs) // 2
            kept, traced = inputs[:half], inputs[half:]
            anc = (bonds[j][1:] + bonds[j + 1][1:]) if t == 1 else ()
            nodes.append(UnitaryNode(
                node_id=len(nodes), kind="tree", layer=layer,
                input_wires=inputs, kept_wires=kept, traced_wires=traced,
                ancilla_wires=anc))
            new_bonds.append(kept)
        bonds = new_bonds

    return NetworkTopology(kind="mera", m=m, k=k, scheme=PER_QUBIT,
                           nodes=nodes, n_layers=layer, p=p,
                           dephase_data_layer=dephase_data_layer,
                           leaf_ancillas=k)


@dataclass
class SchedulePlan:
    """Evaluation order with live-register width accounting."""

    node_order: list
    max_live_width: int
    widths: dict  # node_id -> merged register width at contraction time
    width_cap: int


def live_wire_schedule(net: NetworkTopology,
                       width_cap: int = DEFAULT_WIDTH_CAP) -> SchedulePlan:
    """Greedy contraction order: repeatedly contract the ready node whose
    merged register is narrowest (ties broken by node id), tracing
    immediately. Raises WidthCapExceededError when no ready node fits
    under the cap."""
    deps = wire_producers(net)

    # register state: wire -> frozenset of wires sharing its register
    reg_of = {}
    for node in net.nodes:
        for w in node.ancilla_wires:
            reg_of[w] = frozenset([w])
    for reg in _leaf_registers(net):
        for w in reg:
            reg_of[w] = frozenset(reg)

    done = set()
    pending = {n.node_id: n for n in net.nodes}
    order, widths = [], {}
    max_width = 0
    while pending:
        ready = [nid for nid in pending if set(deps[nid].values()) - {None} <= done]
        best, best_width = None, None
        for nid in sorted(ready):
            node = pending[nid]
            regs = {reg_of[w] for w in node.input_wires}
            width = len(frozenset().union(*regs))
            if best_width is None or width < best_width:
                best, best_width = nid, width
        if best is None:
            raise WidthCapExceededError("no contractible node; topology is cyclic?")
        if best_width > width_cap:
            raise WidthCapExceededError(
                f"node {best} needs a {best_width}-qubit register, cap is {width_cap}")
        node = pending.pop(best)
        done.add(best)
        order.append(best)
        widths[best] = best_width
        max_width = max(max_width, best_width)
        merged = frozenset().union(*(reg_of[w] for w in node.input_wires))
        survivors = merged - set(node.traced_wires)
        for w in survivors:
            reg_of[w] = survivors
    return SchedulePlan(node_order=order, max_live_width=max_width,
                        widths=widths, width_cap=width_cap)


def wire_producers(net: NetworkTopology):
    """For each node, map input wire -> producing node id (None when the
    wire comes straight from the data layer or enters as a fresh ancilla).
    A wire's producer is the latest earlier node that keeps it."""
    last_keeper = {}
    deps = {}
    for node in net.nodes:
        deps[node.node_id] = {w: last_keeper.get(w) for w in node.input_wires}
        for w in node.kept_wires:
            last_keeper[w] = node.node_id
    return deps


def _leaf_registers(net: NetworkTopology):
    """Initial registers: each data qubit with its leaf ancillas."""
    k = net.leaf_ancillas
    if k == 0:
        return [(q,) for q in range(net.m)]
    # leaf ancilla wires were allocated as m + q*k .. m + q*k + k - 1
    return [(q,) + tuple(range(net.m + q * k, net.m + (q + 1) * k))
            for q in range(net.m)]


def leaf_registers(net: NetworkTopology):
    return _leaf_registers(net)


def init_params(net: NetworkTopology, std: float, seed: int):
    """Draw every independent real degree of freedom of every node's
    Hermitian parameter matrix from N(0, std^2), deterministically."""
    if std <= 0:
        raise ValueError("initialization std must be positive")
    rng = np.random.default_rng(seed)
    return [rng.normal(0.0, std, size=d * d) for d in net.node_dims()]


def params_to_hermitians(net: NetworkTopology, params):
    return [unpack_hermitian(vec, d) for vec, d in zip(params, net.node_dims())]


def zero_params(net: NetworkTopology):
    return [np.zeros(d * d) for d in net.node_dims()]


@dataclass
class Prediction:
    """Readout probabilities of the root qubit and the implied class."""

    probs: np.ndarray

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.probs))


_KINDS = {"ttn": 0, "mera": 1}
_SCHEMES = {PER_QUBIT: 0, PER_NODE: 1}


def save_checkpoint(path, net: NetworkTopology, params) -> None:
    """Versioned binary checkpoint: topology header plus per-node packed
    Hermitian parameters (real diagonal, then row-major upper triangle as
    interleaved re/im float64), nodes in topological (construction) order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BIIBdB", _KINDS[net.kind], net.m, net.k,
                             _SCHEMES[net.scheme], net.p,
                             1 if net.dephase_data_layer else 0))
        fh.write(struct.pack("<I", len(params)))
        for vec, d in zip(params, net.node_dims()):
            if len(vec) != d * d:
                raise ValueError("parameter vector length does not match node dim")
            fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; rebuilds the topology and returns (net, params)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a dtnml checkpoint")
        kind_b, m, k, scheme_b, p, ddl = struct.unpack("<BIIBdB", fh.read(19))
        (count,) = struct.unpack("<I", fh.read(4))
        kind = {v: kk for kk, v in _KINDS.items()}[kind_b]
        scheme = {v: s for s, v in _SCHEMES.items()}[scheme_b]
        if kind == "ttn":
            net = build_ttn(m, k, scheme, p=p, dephase_data_layer=bool(ddl))
        else:
            net = build_mera(m, k, p=p, dephase_data_layer=bool(ddl))
        if count != len(net.nodes):
            raise ValueError("checkpoint node count does not match topology")
        params = []
        for d_expected in net.node_dims():
            (d,) = struct.unpack("<I", fh.read(4))
            if d != d_expected:
                raise ValueError("checkpoint node dimension mismatch")
            buf = fh.read(8 * d * d)
            if len(buf) != 8 * d * d:
                raise ValueError(f"{path}: truncated checkpoint")
            params.append(np.frombuffer(buf, dtype="<f8").copy())
    return net, params
