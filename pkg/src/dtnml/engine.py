"""Batched evaluation engine for dephased tensor network classifiers.

A topology is compiled once into a static plan: a sequence of register
operations (load, merge, permute, dephase, node application, trace,
readout) with all shapes, axis permutations and damping exponents fixed.
The plan then executes in one of two modes:

* density: registers are (batch, D, D) complex density matrices; node
  application is unitary conjugation, dephasing damps entry (i, j) by
  (1 - p)^c per differing wire bit (c = number of enabled layer
  boundaries the wire crosses), tracing is a partial trace. Works for
  every p.
* stochastic: registers are (batch, D) real probability vectors; each
  node acts through the elementwise square-modulus of its unitary and
  tracing marginalizes. This is the fully-dephased (p = 1) limit, where
  the network is a classical Bayesian network; it equals the density
  mode at p = 1 with a dephased data layer.

Dephasing is applied lazily when a node consumes a wire. Between its
producer and its consumer a wire is untouched by construction, and the
channel is strictly local, so this commutes with everything in between
and is exactly the between-every-layer insertion.

Reverse mode: every step is linear in the register state except the node
application, which is linear in the state and quadratic in the node
unitary. Pulling a Hermitian cotangent G back through the steps
(conjugation by U^dagger, identity-padding for traces, the same damping
mask for dephasing, partial contraction against the sibling factor for
merges) yields, at each node, the matrix A with dL = 2 Re Tr(A dU); the
eigenbasis divided-difference chain then converts A into the gradient
with respect to the packed Hermitian parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channels import _check_rate
from .linalg import _phi_divided_difference, hermitian_eig, pack_hermitian_grad, unpack_hermitian
from .network import NetworkTopology, WidthCapExceededError, wire_producers, leaf_registers

DENSITY = "density"
STOCHASTIC = "stochastic"


@dataclass
class _Step:
    op: str
    slot: int = -1
    # op-specific payload:
    src: tuple = ()            # merge: (slot_a, slot_b)
    perm: tuple = ()           # permute: new order as indices into old
    exponents: tuple = ()      # dephase: per-wire crossing counts, front-aligned
    node_id: int = -1          # apply
    n_node: int = 0            # apply: node wires occupy the front positions
    keep: int = 0              # trace: number of front wires kept
    drop: int = 0              # trace: number of tail wires removed
    width: int = 0             # register width after the step


@dataclass
class Plan:
    net: NetworkTopology
    steps: list
    n_slots: int
    leaf_slots: list           # slot per data qubit, in feature order
    leaf_widths: list          # 1 + leaf ancillas
    final_slot: int = -1
    max_width: int = 0
    node_order: list = field(default_factory=list)
    _mask_cache: dict = field(default_factory=dict)

    def damping_mask(self, exponents: tuple, p: float):
        """(D, D) elementwise damping factors for a register whose wires
        carry the given boundary-crossing counts."""
        key = (exponents, p)
        mask = self._mask_cache.get(key)
        if mask is None:
            w = len(exponents)
            idx = np.arange(2 ** w)
            expo = np.zeros((2 ** w, 2 ** w))
            for q, c in enumerate(exponents):
                if c == 0:
                    continue
                bits = (idx >> (w - 1 - q)) & 1
                expo += c * (bits[:, None] != bits[None, :])
            mask = (1.0 - p) ** expo
            self._mask_cache[key] = mask
        return mask


def compile_plan(net: NetworkTopology, node_order=None,
                 width_cap: int = 12) -> Plan:
    """Build the static step plan for a topology.

    ``node_order`` overrides the default greedy schedule with an explicit
    (topologically valid) node ordering, which is how order-invariance is
    exercised in tests.
    """
    deps = wire_producers(net)
    steps = []
    slot_wires = {}     # slot -> tuple of wire ids (significance order)
    wire_slot = {}      # wire -> slot
    produced_layer = {} # wire -> layer of its producer (0 for data/leaf)
    next_slot = 0

    leaf_slots, leaf_widths = [], []
    for reg in leaf_registers(net):
        slot = next_slot
        next_slot += 1
        steps.append(_Step("load", slot=slot, n_node=len(reg) - 1,
                           width=len(reg)))
        slot_wires[slot] = tuple(reg)
        for w in reg:
            wire_slot[w] = slot
            produced_layer[w] = 0
        leaf_slots.append(slot)
        leaf_widths.append(len(reg))

    fresh_anc = {}
    for node in net.nodes:
        for w in node.ancilla_wires:
            if w >= net.m + net.m * net.leaf_ancillas:
                fresh_anc[w] = node.node_id

    if node_order is None:
        order = _greedy_order(net, width_cap)
    else:
        order = list(node_order)
        _validate_order(net, order)

    done = set()
    max_width = 0
    for nid in order:
        node = net.nodes[nid]
        done.add(nid)

        # fresh per-node ancillas come in as their own |0...0> register
        fresh = [w for w in node.ancilla_wires if w in fresh_anc]
        if fresh:
            slot = next_slot
            next_slot += 1
            steps.append(_Step("load_anc", slot=slot, n_node=len(fresh),
                               width=len(fresh)))
            slot_wires[slot] = tuple(fresh)
            for w in fresh:
                wire_slot[w] = slot
                produced_layer[w] = node.layer  # crosses no boundary

        # merge every register holding an input wire, in first-use order
        src_slots = []
        for w in node.input_wires:
            s = wire_slot[w]
            if s not in src_slots:
                src_slots.append(s)
        cur = src_slots[0]
        for other in src_slots[1:]:
            slot = next_slot
            next_slot += 1
            steps.append(_Step("merge", slot=slot, src=(cur, other),
                               width=len(slot_wires[cur]) + len(slot_wires[other])))
            slot_wires[slot] = slot_wires[cur] + slot_wires[other]
            cur = slot
        wires = slot_wires[cur]
        for w in wires:
            wire_slot[w] = cur
        max_width = max(max_width, len(wires))
        if len(wires) > width_cap:
            raise WidthCapExceededError(
                f"node {nid} needs a {len(wires)}-qubit register, cap is {width_cap}")

        # bring node wires to the front, in the node's own input order
        spect = [w for w in wires if w not in node.input_wires]
        target = list(node.input_wires) + spect
        if target != list(wires):
            perm = tuple(wires.index(w) for w in target)
            steps.append(_Step("permute", slot=cur, perm=perm, width=len(wires)))
            slot_wires[cur] = tuple(target)
            wires = slot_wires[cur]

        # lazy dephasing of the wires this node consumes
        exps = [net.crossing_count(produced_layer[w], node.layer)
                for w in node.input_wires]
        if any(exps):
            exponents = tuple(exps) + (0,) * len(spect)
            steps.append(_Step("dephase", slot=cur, exponents=exponents,
                               width=len(wires)))

        steps.append(_Step("apply", slot=cur, node_id=nid,
                           n_node=node.n_wires, width=len(wires)))

        if node.traced_wires:
            # reorder to kept + spectators + traced, then drop the tail
            target = list(node.kept_wires) + spect + list(node.traced_wires)
            if target != list(wires):
                perm = tuple(wires.index(w) for w in target)
                steps.append(_Step("permute", slot=cur, perm=perm,
                                   width=len(wires)))
                slot_wires[cur] = tuple(target)
            keep_n = len(node.kept_wires) + len(spect)
            steps.append(_Step("trace", slot=cur, keep=keep_n,
                               drop=len(node.traced_wires), width=keep_n))
            slot_wires[cur] = tuple(target[:keep_n])
            for w in node.traced_wires:
                wire_slot.pop(w, None)

        for w in slot_wires[cur]:
            wire_slot[w] = cur
        for w in node.kept_wires:
            produced_layer[w] = node.layer

    # reduce the root register to the readout wire and take its diagonal
    final = wire_slot[net.readout_wire]
    wires = slot_wires[final]
    if len(wires) > 1:
        target = [net.readout_wire] + [w for w in wires if w != net.readout_wire]
        if target != list(wires):
            perm = tuple(wires.index(w) for w in target)
            steps.append(_Step("permute", slot=final, perm=perm, width=len(wires)))
            slot_wires[final] = tuple(target)
        steps.append(_Step("trace", slot=final, keep=1,
                           drop=len(wires) - 1, width=1))
    steps.append(_Step("readout", slot=final, width=1))

    plan = Plan(net=net, steps=steps, n_slots=next_slot,
                leaf_slots=leaf_slots, leaf_widths=leaf_widths,
                final_slot=final, max_width=max_width, node_order=order)
    return plan


def _greedy_order(net: NetworkTopology, width_cap: int):
    from .network import live_wire_schedule

    return live_wire_schedule(net, width_cap=width_cap).node_order


def _validate_order(net: NetworkTopology, order):
    deps = wire_producers(net)
    seen = set()
    if sorted(order) != list(range(len(net.nodes))):
        raise ValueError("node order must be a permutation of all node ids")
    for nid in order:
        need = {p for p in deps[nid].values() if p is not None}
        if not need <= seen:
            raise ValueError(f"node {nid} scheduled before its inputs are ready")
        seen.add(nid)


# ---------------------------------------------------------------------------
# forward execution


def _load_density(xs_col, n_anc):
    """(B,) features -> (B, 2^(1+n_anc), 2^(1+n_anc)) data-qubit (x) |0..0><0..0|."""
    s = np.sin(np.pi * xs_col / 2.0)
    c = np.cos(np.pi * xs_col / 2.0)
    b = len(xs_col)
    d = 2 ** (1 + n_anc)
    out = np.zeros((b, d, d), dtype=complex)
    step = d // 2
    out[:, 0, 0] = s * s
    out[:, 0, step] = s * c
    out[:, step, 0] = s * c
    out[:, step, step] = c * c
    return out


def _load_stochastic(xs_col, n_anc):
    s2 = np.sin(np.pi * xs_col / 2.0) ** 2
    b = len(xs_col)
    d = 2 ** (1 + n_anc)
    out = np.zeros((b, d))
    out[:, 0] = s2
    out[:, d // 2] = 1.0 - s2
    return out


def _permute_density(arr, perm):
    b, d, _ = arr.shape
    w = len(perm)
    tens = arr.reshape((b,) + (2,) * (2 * w))
    axes = (0,) + tuple(1 + p for p in perm) + tuple(1 + w + p for p in perm)
    return np.ascontiguousarray(tens.transpose(axes)).reshape(b, d, d)


def _permute_stochastic(arr, perm):
    b, d = arr.shape
    w = len(perm)
    tens = arr.reshape((b,) + (2,) * w)
    axes = (0,) + tuple(1 + p for p in perm)
    return np.ascontiguousarray(tens.transpose(axes)).reshape(b, d)


def _apply_density(arr, u, n_node):
    b, d, _ = arr.shape
    du = u.shape[0]
    if du == d:
        return np.matmul(np.matmul(u, arr), u.conj().T)
    r = d // du
    t = arr.reshape(b, du, r, du, r)
    t = np.einsum("ab,sbrct->sarct", u, t, optimize=True)
    t = np.einsum("sarct,dc->sardt", t, u.conj(), optimize=True)
    return t.reshape(b, d, d)


def _apply_stochastic(arr, m, n_node):
    b, d = arr.shape
    dm = m.shape[0]
    if dm == d:
        return arr @ m.T
    r = d // dm
    t = arr.reshape(b, dm, r)
    return np.einsum("ab,sbr->sar", m, t, optimize=True).reshape(b, d)


def _trace_density(arr, keep):
    b, d, _ = arr.shape
    dk = 2 ** keep
    dt = d // dk
    t = arr.reshape(b, dk, dt, dk, dt)
    return np.einsum("bktlt->bkl", t, optimize=True)


def _trace_stochastic(arr, keep):
    b, d = arr.shape
    dk = 2 ** keep
    return arr.reshape(b, dk, d // dk).sum(axis=2)


class NodeOperators:
    """Per-node operators derived from packed Hermitian parameters: the
    unitary U = exp(iH) (density mode), its square-modulus M = |U|^2
    (stochastic mode), and the eigendecomposition reused by gradients."""

    def __init__(self, net: NetworkTopology, params):
        dims = net.node_dims()
        if len(params) != len(dims):
            raise ValueError(f"expected {len(dims)} parameter vectors, got {len(params)}")
        self.hermitians, self.eigvals, self.eigvecs, self.unitaries = [], [], [], []
        for vec, d in zip(params, dims):
            if vec is None:
                raise ValueError("unset parameters")
            h = unpack_hermitian(vec, d)
            w, v = hermitian_eig(h)
            self.hermitians.append(h)
            self.eigvals.append(w)
            self.eigvecs.append(v)
            self.unitaries.append((v * np.exp(1j * w)) @ v.conj().T)
        self.moduli = [np.abs(u) ** 2 for u in self.unitaries]

    def grad_packed(self, node_id: int, a_mat):
        """Convert A (dL = 2 Re Tr(A dU)) into the packed-parameter gradient."""
        w, v = self.eigvals[node_id], self.eigvecs[node_id]
        phi = _phi_divided_difference(w)
        a_tilde = v.conj().T @ a_mat @ v
        g_tilde = 1j * (a_tilde * phi) - 1j * (a_tilde.conj().T * phi.conj())
        g_h = v @ g_tilde @ v.conj().T
        return pack_hermitian_grad(g_h)


def execute(plan: Plan, ops: NodeOperators, features, p: float | None = None,
            mode: str = DENSITY, keep_stash: bool = False,
            return_readout_state: bool = False):
    """Run the plan over a feature batch.

    Returns (probs, stash); probs is (batch, 2). The stash holds the
    intermediates backprop needs and, optionally, the pre-measurement
    readout qubit state.
    """
    net = plan.net
    if p is None:
        p = net.p
    p = _check_rate(p)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != net.m:
        raise ValueError(f"expected {net.m} features, got {features.shape[1]}")
    if mode == STOCHASTIC and not (p == 1.0 and net.dephase_data_layer):
        raise ValueError("stochastic mode models the fully-dephased network "
                         "(p = 1 with a dephased data layer)")

    env = [None] * plan.n_slots
    stash = {"inputs": {}, "mode": mode, "p": p, "features": features} if keep_stash else None
    dens = mode == DENSITY

    leaf_iter = iter(range(net.m))
    readout_state = None
    for si, st in enumerate(plan.steps):
        if st.op == "load":
            q = next(leaf_iter)
            col = features[:, q]
            env[st.slot] = (_load_density if dens else _load_stochastic)(col, st.n_node)
        elif st.op == "load_anc":
            b = features.shape[0]
            d = 2 ** st.n_node
            if dens:
                arr = np.zeros((b, d, d), dtype=complex)
                arr[:, 0, 0] = 1.0
            else:
                arr = np.zeros((b, d))
                arr[:, 0] = 1.0
            env[st.slot] = arr
        elif st.op == "merge":
            a, bb = env[st.src[0]], env[st.src[1]]
            if keep_stash:
                stash["inputs"][si] = (a, bb)
            if dens:
                da, db = a.shape[1], bb.shape[1]
                out = np.einsum("bij,bkl->bikjl", a, bb, optimize=True)
                env[st.slot] = out.reshape(a.shape[0], da * db, da * db)
            else:
                out = np.einsum("bi,bj->bij", a, bb, optimize=True)
                env[st.slot] = out.reshape(a.shape[0], -1)
            env[st.src[0]] = env[st.src[1]] = None
        elif st.op == "permute":
            env[st.slot] = (_permute_density if dens else _permute_stochastic)(
                env[st.slot], st.perm)
        elif st.op == "dephase":
            if dens and p > 0.0:
                mask = plan.damping_mask(st.exponents, p)
                env[st.slot] = env[st.slot] * mask
            # stochastic registers are already diagonal: nothing to damp
        elif st.op == "apply":
            arr = env[st.slot]
            if keep_stash:
                stash["inputs"][si] = arr
            op = ops.unitaries[st.node_id] if dens else ops.moduli[st.node_id]
            env[st.slot] = (_apply_density if dens else _apply_stochastic)(
                arr, op, st.n_node)
        elif st.op == "trace":
            env[st.slot] = (_trace_density if dens else _trace_stochastic)(
                env[st.slot], st.keep)
        elif st.op == "readout":
            final = env[st.slot]
            if dens:
                if return_readout_state:
                    readout_state = final
                probs = np.real(np.stack([final[:, 0, 0], final[:, 1, 1]], axis=1))
            else:
                if return_readout_state:
                    readout_state = final
                probs = final.copy()
        else:  # pragma: no cover
            raise AssertionError(f"unknown step {st.op}")

    if keep_stash:
        stash["readout_state"] = readout_state
    return probs, stash


# ---------------------------------------------------------------------------
# reverse mode


def backprop(plan: Plan, ops: NodeOperators, stash, dprobs):
    """Pull the loss cotangent back through the plan.

    ``dprobs`` is (batch, 2) = dL/dprobs (per-sample weights folded in).
    Returns the list of packed gradients, one per node, summed over the
    batch.
    """
    net = plan.net
    dens = stash["mode"] == DENSITY
    p = stash["p"]
    b = dprobs.shape[0]

    cot = [None] * plan.n_slots
    if dens:
        g = np.zeros((b, 2, 2), dtype=complex)
        g[:, 0, 0] = dprobs[:, 0]
        g[:, 1, 1] = dprobs[:, 1]
    else:
        g = dprobs.astype(np.float64)

    a_mats = {nid: None for nid in range(len(net.nodes))}

    last = plan.steps[-1]
    assert last.op == "readout"
    cot[last.slot] = g

    for si in range(len(plan.steps) - 2, -1, -1):
        st = plan.steps[si]
        if st.op in ("load", "load_anc"):
            cot[st.slot] = None  # no gradients flow into the data layer
        elif st.op == "merge":
            gout = cot[st.slot]
            a, bb = stash["inputs"][si]
            if dens:
                da, db = a.shape[1], bb.shape[1]
                g4 = gout.reshape(b, da, db, da, db)
                cot[st.src[0]] = np.einsum("bikjl,blk->bij", g4, bb, optimize=True)
                cot[st.src[1]] = np.einsum("bikjl,bji->bkl", g4, a, optimize=True)
            else:
                da, db = a.shape[1], bb.shape[1]
                g2 = gout.reshape(b, da, db)
                cot[st.src[0]] = np.einsum("bik,bk->bi", g2, bb, optimize=True)
                cot[st.src[1]] = np.einsum("bik,bi->bk", g2, a, optimize=True)
            cot[st.slot] = None
        elif st.op == "permute":
            inv = np.argsort(st.perm)
            cot[st.slot] = (_permute_density if dens else _permute_stochastic)(
                cot[st.slot], tuple(inv))
        elif st.op == "dephase":
            if dens and p > 0.0:
                mask = plan.damping_mask(st.exponents, p)
                cot[st.slot] = cot[st.slot] * mask
        elif st.op == "apply":
            gout = cot[st.slot]
            rho_in = stash["inputs"][si]
            if dens:
                u = ops.unitaries[st.node_id]
                du = u.shape[0]
                d = gout.shape[1]
                if du == d:
                    cot[st.slot] = np.matmul(np.matmul(u.conj().T, gout), u)
                    a_mat = np.einsum("bij,bjk->ik",
                                      np.matmul(rho_in, u.conj().T), gout,
                                      optimize=True)
                else:
                    r = d // du
                    g4 = gout.reshape(b, du, r, du, r)
                    cot[st.slot] = np.einsum(
                        "ab,sarct,cd->sbrdt", u.conj(), g4, u,
                        optimize=True).reshape(b, d, d)
                    rho4 = rho_in.reshape(b, du, r, du, r)
                    x = np.einsum("sarct,dc->sardt", rho4, u.conj(), optimize=True)
                    a_mat = np.einsum("sardt,sdtbr->ab", x, g4, optimize=True)
            else:
                mmod = ops.moduli[st.node_id]
                dm = mmod.shape[0]
                d = gout.shape[1]
                if dm == d:
                    cot[st.slot] = gout @ mmod
                    g_m = np.einsum("ba,bc->ac", gout, rho_in, optimize=True)
                else:
                    r = d // dm
                    g3 = gout.reshape(b, dm, r)
                    cot[st.slot] = np.einsum("ab,sar->sbr", mmod, g3,
                                             optimize=True).reshape(b, d)
                    rho3 = rho_in.reshape(b, dm, r)
                    g_m = np.einsum("sar,sbr->ab", g3, rho3, optimize=True)
                u = ops.unitaries[st.node_id]
                a_mat = (g_m * u.conj()).T
            if a_mats[st.node_id] is None:
                a_mats[st.node_id] = a_mat
            else:
                a_mats[st.node_id] = a_mats[st.node_id] + a_mat
        elif st.op == "trace":
            # identity-pad the traced tail block back on
            gout = cot[st.slot]
            dt = 2 ** st.drop
            if dens:
                dk = gout.shape[1]
                eye = np.eye(dt)
                g5 = np.einsum("bkl,ts->bktls", gout, eye, optimize=True)
                cot[st.slot] = g5.reshape(b, dk * dt, dk * dt)
            else:
                cot[st.slot] = np.repeat(gout, dt, axis=1)

    grads = []
    for nid, node in enumerate(net.nodes):
        a_mat = a_mats[nid]
        if a_mat is None:
            raise AssertionError(f"node {nid} never applied in plan")
        grads.append(ops.grad_packed(nid, a_mat))
    return grads
