"""Dense complex linear algebra over qubit registers.

Index convention, used everywhere in this package: qubit 0 is the most
significant bit of a basis index. A register of ``w`` qubits has basis
states ``|b_0 b_1 ... b_{w-1}>`` with integer index
``i = sum_q b_q * 2**(w-1-q)``, and ``kron(a, b)`` places the qubits of
``a`` in front of (more significant than) those of ``b``.

Density matrices are plain complex ndarrays; the validators below check
the invariants (Hermiticity, unit trace, positivity) where needed.
"""

from __future__ import annotations

import numpy as np

HERMITICITY_ATOL = 1e-10
TRACE_ATOL = 1e-10
UNITARITY_ATOL = 1e-10
PSD_EIGENVALUE_FLOOR = -1e-9

# Eigenvalue gap below which the divided difference of exp(i*x) switches
# to its limiting value.
DEGENERACY_GAP = 1e-12


def kron(a, b):
    """Tensor product of two operators; ``a``'s qubits become the most
    significant index block of the result."""
    return np.kron(np.asarray(a), np.asarray(b))


def num_qubits(mat) -> int:
    """Number of qubits of a square operator; raises if dim is not 2**w."""
    dim = mat.shape[0]
    w = dim.bit_length() - 1
    if mat.shape != (dim, dim) or 2**w != dim:
        raise ValueError(f"operator shape {mat.shape} is not a square power-of-two matrix")
    return w


def is_hermitian(mat, atol: float = HERMITICITY_ATOL) -> bool:
    return bool(np.max(np.abs(mat - mat.conj().T)) <= atol)


def is_unitary(mat, atol: float = UNITARITY_ATOL) -> bool:
    dim = mat.shape[0]
    return bool(np.max(np.abs(mat.conj().T @ mat - np.eye(dim))) <= atol)


def validate_density_matrix(rho, check_psd: bool = False) -> None:
    """Raise ValueError unless ``rho`` is a valid density matrix.

    Positivity is comparatively expensive and only checked on request
    (debug/test mode).
    """
    rho = np.asarray(rho)
    num_qubits(rho)
    if not is_hermitian(rho):
        raise ValueError("density matrix is not Hermitian within tolerance")
    if abs(np.trace(rho) - 1.0) > TRACE_ATOL:
        raise ValueError(f"density matrix trace {np.trace(rho)} != 1")
    if check_psd:
        smallest = np.linalg.eigvalsh(rho)[0]
        if smallest < PSD_EIGENVALUE_FLOOR:
            raise ValueError(f"density matrix has negative eigenvalue {smallest}")


def apply_unitary(rho, u):
    """Conjugate a state by a unitary, ``u rho u^dagger``.

    The result is re-symmetrized, (r + r^dagger)/2, to absorb the
    floating-point drift that otherwise accumulates along deep networks.
    """
    rho = np.asarray(rho)
    u = np.asarray(u)
    if rho.shape != u.shape:
        raise ValueError(f"dimension mismatch: state {rho.shape} vs unitary {u.shape}")
    out = u @ rho @ u.conj().T
    return (out + out.conj().T) / 2.0


def partial_trace(rho, traced_qubits, qubit_count: int | None = None):
    """Trace out the given qubits (by position, 0 = most significant).

    At least one qubit must remain.
    """
    rho = np.asarray(rho)
    w = num_qubits(rho) if qubit_count is None else qubit_count
    traced = sorted(set(int(q) for q in traced_qubits))
    if not traced:
        return rho.copy()
    if any(q < 0 or q >= w for q in traced):
        raise ValueError(f"traced qubit out of range for {w}-qubit register: {traced}")
    if len(traced) >= w:
        raise ValueError("cannot trace out every qubit of the register")

    kept = [q for q in range(w) if q not in traced]
    tens = rho.reshape((2,) * (2 * w))
    # Move kept axes to the front (rows then columns), traced axes to the back.
    perm = kept + [w + q for q in kept] + traced + [w + q for q in traced]
    tens = tens.transpose(perm)
    dk, dt = 2 ** len(kept), 2 ** len(traced)
    tens = tens.reshape(dk, dk, dt, dt)
    return np.einsum("ijkk->ij", tens)


def purity(rho) -> float:
    """Tr(rho^2); 1 for pure states, 1/d for the maximally mixed state."""
    rho = np.asarray(rho)
    return float(np.real(np.einsum("ij,ji->", rho, rho)))


def _phi_divided_difference(eigvals):
    """Matrix of (e^{ix} - e^{iy}) / (i (x - y)) over eigenvalue pairs,
    with the limiting value e^{ix} on (near-)degenerate pairs."""
    x = eigvals[:, None]
    y = eigvals[None, :]
    diff = x - y
    expx = np.exp(1j * x)
    expy = np.exp(1j * y)
    safe = np.where(np.abs(diff) < DEGENERACY_GAP, 1.0, diff)
    phi = np.where(np.abs(diff) < DEGENERACY_GAP,
                   expx * np.ones_like(diff),
                   (expx - expy) / (1j * safe))
    return phi


def hermitian_eig(h):
    """Eigendecomposition of a Hermitian matrix, h = V diag(w) V^dagger."""
    h = np.asarray(h)
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite entries in Hermitian parameter matrix")
    w, v = np.linalg.eigh(h)
    return w, v


def hermitian_expm(h):
    """U = exp(i h) for Hermitian h, via eigendecomposition.

    The same factorization backs the parameter derivative, which is why
    scaling-and-squaring is not used here.
    """
    w, v = hermitian_eig(h)
    return (v * np.exp(1j * w)) @ v.conj().T


def expm_grad(h, direction):
    """Directional derivative of U = exp(i h) along a Hermitian direction.

    Uses the eigenbasis divided-difference (Daleckii-Krein) formula:
    in h's eigenbasis, dU[a, b] = i * direction[a, b] * phi(w_a, w_b) with
    phi(x, y) = (e^{ix} - e^{iy}) / (i (x - y)) and the limit e^{ix} on
    degenerate pairs.
    """
    direction = np.asarray(direction)
    if not is_hermitian(direction, atol=1e-9):
        raise ValueError("direction must be Hermitian")
    if direction.shape != np.asarray(h).shape:
        raise ValueError("dimension mismatch between parameter and direction")
    w, v = hermitian_eig(h)
    phi = _phi_divided_difference(w)
    d_tilde = v.conj().T @ direction @ v
    return v @ (1j * d_tilde * phi) @ v.conj().T


def pack_hermitian(h):
    """Pack a Hermitian d x d matrix into its d^2 independent real
    parameters: the real diagonal, then row-major upper-triangle entries
    as interleaved (real, imag) pairs."""
    h = np.asarray(h)
    d = h.shape[0]
    iu = np.triu_indices(d, k=1)
    upper = h[iu]
    out = np.empty(d * d)
    out[:d] = h.diagonal().real
    out[d::2] = upper.real
    out[d + 1::2] = upper.imag
    return out


def unpack_hermitian(vec, dim: int):
    """Inverse of :func:`pack_hermitian`."""
    vec = np.asarray(vec)
    if vec.size != dim * dim:
        raise ValueError(f"packed vector length {vec.size} != {dim * dim}")
    h = np.zeros((dim, dim), dtype=complex)
    iu = np.triu_indices(dim, k=1)
    upper = vec[dim::2] + 1j * vec[dim + 1::2]
    h[iu] = upper
    h += h.conj().T
    h[np.diag_indices(dim)] = vec[:dim]
    return h


def pack_hermitian_grad(g):
    """Pack the Hermitian gradient matrix G (defined by dL = Tr(G dH)) into
    the parametrization of :func:`pack_hermitian`: dL/d(diag) = diag(G).real,
    dL/dx_ab = 2 Re G[a,b], dL/dy_ab = 2 Im G[a,b]."""
    g = np.asarray(g)
    d = g.shape[0]
    iu = np.triu_indices(d, k=1)
    upper = g[iu]
    out = np.empty(d * d)
    out[:d] = g.diagonal().real
    out[d::2] = 2.0 * upper.real
    out[d + 1::2] = 2.0 * upper.imag
    return out
