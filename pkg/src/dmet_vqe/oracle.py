"""Dense matrix-exponential reference for circuit verification.

Rebuilds an ansatz circuit's action as a product of exact term
exponentials in original line coordinates (Jordan-Wigner strings written
out as dense Pauli products) followed by the fermionic permutation the
swap network leaves behind. Entirely independent of the statevector
engine's gate kernels, so agreement between the two is a real check.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from .ansatz import FSWAP_OP, HOP, HOPSWAP, AnsatzCircuit

_I = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.diag([1, -1]).astype(complex)
_N1 = np.diag([0, 1]).astype(complex)


def _kron_at(ops: dict[int, np.ndarray], n: int) -> np.ndarray:
    """Dense operator with `ops[q]` on qubit q (identity elsewhere);
    qubit 0 is the least-significant factor."""
    out = np.array([[1.0 + 0j]])
    for q in range(n):
        out = np.kron(ops.get(q, _I), out)
    return out


def hopping_operator(i: int, j: int, n: int) -> np.ndarray:
    """Dense a^dag_i a_j + a^dag_j a_i with the parity string, i < j."""
    if i >= j:
        raise ValueError("need i < j")
    string = {q: _Z for q in range(i + 1, j)}
    xx = _kron_at({i: _X, j: _X, **string}, n)
    yy = _kron_at({i: _Y, j: _Y, **string}, n)
    return 0.5 * (xx + yy)


def number_operator(i: int, n: int) -> np.ndarray:
    return _kron_at({i: _N1}, n)


def onsite_operator(i: int, j: int, n: int) -> np.ndarray:
    return _kron_at({i: _N1, j: _N1}, n)


def permutation_unitary(initial: tuple[int, ...], final: tuple[int, ...],
                        n_orb: int) -> np.ndarray:
    """Fermionic-mode permutation taking `initial` line order to `final`,
    mirrored on both spin sectors, built from dense adjacent FSWAPs."""
    n = 2 * n_orb
    fswap = np.array([[1, 0, 0, 0],
                      [0, 0, 1, 0],
                      [0, 1, 0, 0],
                      [0, 0, 0, -1]], dtype=complex)
    U = np.eye(1 << n, dtype=complex)
    work = list(initial)
    for target_pos in range(n_orb):
        want = final[target_pos]
        at = work.index(want)
        while at > target_pos:
            # adjacent transposition on both sectors
            for off in (0, n_orb):
                ops = _embed_two_qubit(fswap, at - 1 + off, at + off, n)
                U = ops @ U
            work[at - 1], work[at] = work[at], work[at - 1]
            at -= 1
    return U


def _embed_two_qubit(U4: np.ndarray, q1: int, q2: int, n: int) -> np.ndarray:
    """Dense n-qubit embedding of a 4x4 gate on (q1, q2), q1 the low bit."""
    dim = 1 << n
    out = np.zeros((dim, dim), dtype=complex)
    m1, m2 = 1 << q1, 1 << q2
    rest = [i for i in range(dim) if not (i & m1) and not (i & m2)]
    for base in rest:
        idx = [base, base | m1, base | m2, base | m1 | m2]
        for r in range(4):
            for c in range(4):
                if U4[r, c] != 0:
                    out[idx[r], idx[c]] = U4[r, c]
    return out


def reference_state(circuit: AnsatzCircuit, theta: np.ndarray) -> np.ndarray:
    """Exact product of term exponentials, in the realize order, applied to
    the circuit's initial state, then permuted like the swap network."""
    theta = np.asarray(theta, dtype=float)
    sched = circuit.schedule
    n_orb = circuit.n_orb
    n = circuit.n_qubits
    binding = circuit.binding
    coeff = circuit._coeff

    init_pos = {orb: p for p, orb in enumerate(sched.initial_order)}
    psi = circuit._init_state.amp.copy()

    def angle(d, key):
        return theta[d * binding.n_slots + binding.slot_of[key]] * coeff[key]

    op_cache: dict = {}

    def apply_exp(H_op_key, H_builder, th):
        if abs(th) < 1e-300:
            return
        if H_op_key not in op_cache:
            op_cache[H_op_key] = H_builder()
        nonlocal psi
        psi = expm(1j * th * op_cache[H_op_key]) @ psi

    order = list(sched.initial_order)
    for d in range(circuit.depth):
        for site in range(sched.n_frag):
            th = angle(d, ("ons", site))
            pu, pd = init_pos[site], init_pos[site] + n_orb
            apply_exp(("ons", site), lambda pu=pu, pd=pd: onsite_operator(pu, pd, n), th)
        layers = sched.layers if d % 2 == 0 else list(reversed(sched.layers))
        for layer in layers:
            for g in (layer if d % 2 == 0 else reversed(layer)):
                p1, p2 = g.positions
                a, b = order[p1], order[p2]
                if g.kind in (HOP, HOPSWAP):
                    lo, hi = min(a, b), max(a, b)
                    th = angle(d, ("hop", lo, hi))
                    iu, ju = sorted((init_pos[lo], init_pos[hi]))
                    idn, jdn = iu + n_orb, ju + n_orb
                    apply_exp(("hop", iu, ju),
                              lambda iu=iu, ju=ju: hopping_operator(iu, ju, n), th)
                    apply_exp(("hop", idn, jdn),
                              lambda i=idn, j=jdn: hopping_operator(i, j, n), th)
                if g.kind in (HOPSWAP, FSWAP_OP):
                    order[p1], order[p2] = order[p2], order[p1]
        for orb in sched.number_orbitals:
            th = angle(d, ("num", orb))
            pu, pd = init_pos[orb], init_pos[orb] + n_orb
            apply_exp(("num", pu), lambda p=pu: number_operator(p, n), th)
            apply_exp(("num", pd), lambda p=pd: number_operator(p, n), th)

    final = tuple(order)
    if final != tuple(sched.initial_order):
        V = permutation_unitary(tuple(sched.initial_order), final, n_orb)
        psi = V @ psi
    return psi
