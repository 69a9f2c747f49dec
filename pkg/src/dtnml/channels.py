"""Local dephasing channels on qubit registers.

A dephasing channel at rate ``p`` damps the off-diagonal entries of a
single-qubit density matrix by ``(1 - p)``; its two-operator Kraus form is
``K0 = sqrt(1 - p/2) I`` and ``K1 = sqrt(p/2) sigma_z``. Acting locally on
every qubit of an m-qubit register, entry (i, j) is damped by
``(1 - p) ** hamming(i, j)``, the number of bit positions where the row
and column basis strings differ. The closed Hamming form is what this
module implements (O(4^m) instead of the O(8^m) Kraus sum); the explicit
Kraus sum is kept available as a test oracle.

The dephasing basis is fixed to the computational (sigma_z) basis.
"""

from __future__ import annotations

import itertools

import numpy as np

from .linalg import kron, num_qubits

SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)

KRAUS_COMPLETENESS_ATOL = 1e-12


def _check_rate(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dephasing rate p={p} outside [0, 1]")
    return p


def kraus_ops(p: float):
    """Single-qubit Kraus pair (K0, K1) for dephasing at rate p."""
    p = _check_rate(p)
    k0 = np.sqrt(1.0 - p / 2.0) * np.eye(2, dtype=complex)
    k1 = np.sqrt(p / 2.0) * SIGMA_Z
    return k0, k1


class DephasingChannel:
    """Local dephasing at rate p on each qubit of a register."""

    def __init__(self, p: float, qubit_count: int = 1):
        if qubit_count < 1:
            raise ValueError("qubit_count must be positive")
        self.p = _check_rate(p)
        self.qubit_count = int(qubit_count)
        comp = sum(k.conj().T @ k for k in kraus_ops(self.p))
        if np.max(np.abs(comp - np.eye(2))) > KRAUS_COMPLETENESS_ATOL:
            raise ValueError("Kraus completeness violated")

    def __call__(self, rho):
        if self.qubit_count == 1:
            return dephase_single(rho, self.p)
        return dephase_local(rho, self.p)


def hamming_exponents(w: int):
    """(2^w, 2^w) integer matrix of Hamming distances between basis index
    bitstrings of a w-qubit register."""
    idx = np.arange(2**w)
    xor = idx[:, None] ^ idx[None, :]
    exps = np.zeros((2**w, 2**w), dtype=np.int64)
    for q in range(w):
        exps += (xor >> q) & 1
    return exps


def damping_mask(w: int, p: float):
    """Elementwise damping factors (1 - p)^hamming(i, j) for a register."""
    p = _check_rate(p)
    return (1.0 - p) ** hamming_exponents(w)


def dephase_single(rho, p: float):
    """Dephase one qubit: diagonals unchanged, off-diagonals scaled by (1 - p)."""
    rho = np.asarray(rho)
    if rho.shape != (2, 2):
        raise ValueError(f"dephase_single expects a 2x2 state, got {rho.shape}")
    p = _check_rate(p)
    out = rho.copy()
    out[0, 1] *= 1.0 - p
    out[1, 0] *= 1.0 - p
    return out


def dephase_local(rho, p: float):
    """Local dephasing at rate p on every qubit of an m-qubit register."""
    rho = np.asarray(rho)
    w = num_qubits(rho)
    p = _check_rate(p)
    return rho * damping_mask(w, p)


def dephase_local_kraus(rho, p: float):
    """Reference implementation of local dephasing as the explicit
    2^m-term Kraus sum over per-qubit operator choices. Test oracle only;
    exponentially slower than :func:`dephase_local`."""
    rho = np.asarray(rho)
    w = num_qubits(rho)
    p = _check_rate(p)
    k0, k1 = kraus_ops(p)
    out = np.zeros_like(rho)
    for choice in itertools.product((k0, k1), repeat=w):
        op = choice[0]
        for factor in choice[1:]:
            op = kron(op, factor)
        out += op @ rho @ op.conj().T
    return out


def full_dephase(rho):
    """Set every off-diagonal entry to zero (the p = 1 superoperator).

    Idempotent, and equal to ``dephase_local(rho, 1.0)``. Equivalently the
    contraction of the state with third-order copy tensors on every wire.
    """
    rho = np.asarray(rho)
    if rho.shape[0] != rho.shape[1]:
        raise ValueError("full_dephase expects a square matrix")
    return np.diag(np.diag(rho)).astype(rho.dtype)
