"""Dense statevector simulator with the gate set used by the ansatz circuits.

Qubit q is bit q of the basis index (little-endian). All two-qubit gates
here preserve Hamming weight up to diagonal phases, so number conservation
holds for every circuit assembled from them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# ---------------------------------------------------------------------------
# gate matrices


def hopping_gate(theta: float) -> np.ndarray:
    """Number-preserving rotation between two adjacent modes.

    exp(i*theta*(a^dag_i a_j + a^dag_j a_i)) restricted to neighbouring
    Jordan-Wigner lines: rotates |01>,|10> with cos/isin, fixes |00>,|11>.
    """
    c, s = np.cos(theta), 1j * np.sin(theta)
    return np.array(
        [[1, 0, 0, 0],
         [0, c, s, 0],
         [0, s, c, 0],
         [0, 0, 0, 1]], dtype=complex)


FSWAP = np.array(
    [[1, 0, 0, 0],
     [0, 0, 1, 0],
     [0, 1, 0, 0],
     [0, 0, 0, -1]], dtype=complex)

CZ = np.diag([1, 1, 1, -1]).astype(complex)

M_BASIS = np.array(
    [[1, 0, 0, 0],
     [0, 1 / np.sqrt(2), 1 / np.sqrt(2), 0],
     [0, 1 / np.sqrt(2), -1 / np.sqrt(2), 0],
     [0, 0, 0, 1]], dtype=complex)

S_GATE = np.diag([1, 1j]).astype(complex)


def fswap_hopping_gate(theta: float) -> np.ndarray:
    """Combined FSWAP * Hopping(theta): one two-qubit gate doing both."""
    return FSWAP @ hopping_gate(theta)


def onsite_phase_gate(theta: float) -> np.ndarray:
    """Controlled phase e^{i theta} on |11> (evolution of n_i n_j)."""
    return np.diag([1, 1, 1, np.exp(1j * theta)]).astype(complex)


def number_phase_gate(theta: float) -> np.ndarray:
    """Single-qubit phase e^{i theta} on |1> (evolution of n_i)."""
    return np.diag([1, np.exp(1j * theta)]).astype(complex)


def givens_gate(theta: float) -> np.ndarray:
    """Real rotation in the |01>,|10> block, used for determinant preparation."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array(
        [[1, 0, 0, 0],
         [0, c, -s, 0],
         [0, s, c, 0],
         [0, 0, 0, 1]], dtype=complex)


# ---------------------------------------------------------------------------
# indexing helpers

_POPCOUNT16 = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.int64)


def popcount(x: np.ndarray) -> np.ndarray:
    """Vectorised population count for non-negative indices below 2^32."""
    x = np.asarray(x)
    return _POPCOUNT16[x & 0xFFFF] + _POPCOUNT16[(x >> 16) & 0xFFFF]


def _cleared_indices(n: int, q1: int, q2: int) -> np.ndarray:
    """All n-bit indices with bits q1 and q2 equal to zero."""
    lo, hi = (q1, q2) if q1 < q2 else (q2, q1)
    k = np.arange(1 << (n - 2))
    x = ((k >> lo) << (lo + 1)) | (k & ((1 << lo) - 1))
    x = ((x >> hi) << (hi + 1)) | (x & ((1 << hi) - 1))
    return x


# ---------------------------------------------------------------------------
# state


class StateVector:
    """2^n complex amplitudes with in-place gate application."""

    def __init__(self, n_qubits: int, amplitudes: np.ndarray | None = None):
        self.n_qubits = n_qubits
        if amplitudes is None:
            self.amp = np.zeros(2**n_qubits, dtype=complex)
            self.amp[0] = 1.0
        else:
            amplitudes = np.asarray(amplitudes, dtype=complex)
            if amplitudes.shape != (2**n_qubits,):
                raise ValueError("amplitude vector has wrong length")
            self.amp = amplitudes.copy()

    @classmethod
    def from_bitmask(cls, n_qubits: int, mask: int) -> "StateVector":
        sv = cls(n_qubits)
        sv.amp[0] = 0.0
        sv.amp[mask] = 1.0
        return sv

    def copy(self) -> "StateVector":
        return StateVector(self.n_qubits, self.amp)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amp))

    def fidelity(self, other: "StateVector") -> float:
        return float(abs(np.vdot(self.amp, other.amp)) ** 2)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amp) ** 2

    # -- gate application ---------------------------------------------------

    def apply_1q(self, U: np.ndarray, q: int) -> None:
        if not 0 <= q < self.n_qubits:
            raise IndexError(f"qubit {q} out of range")
        a = self.amp.reshape(2 ** (self.n_qubits - q - 1), 2, 2**q)
        a0 = a[:, 0, :].copy()
        a1 = a[:, 1, :].copy()
        a[:, 0, :] = U[0, 0] * a0 + U[0, 1] * a1
        a[:, 1, :] = U[1, 0] * a0 + U[1, 1] * a1

    def apply_2q(self, U: np.ndarray, q1: int, q2: int) -> None:
        """Apply a 4x4 gate to qubits (q1, q2); gate basis index is 2*b2 + b1."""
        n = self.n_qubits
        if q1 == q2 or not (0 <= q1 < n and 0 <= q2 < n):
            raise IndexError(f"bad qubit pair ({q1}, {q2})")
        i00 = _cleared_indices(n, q1, q2)
        amp = self.amp
        m1, m2 = 1 << q1, 1 << q2
        gather = (amp[i00], amp[i00 | m1], amp[i00 | m2], amp[i00 | m1 | m2])
        for r, target in enumerate((i00, i00 | m1, i00 | m2, i00 | m1 | m2)):
            amp[target] = (U[r, 0] * gather[0] + U[r, 1] * gather[1]
                           + U[r, 2] * gather[2] + U[r, 3] * gather[3])

    def apply_diag_2q(self, phases: np.ndarray, q1: int, q2: int) -> None:
        idx = np.arange(self.amp.size)
        sub = (((idx >> q2) & 1) << 1) | ((idx >> q1) & 1)
        self.amp *= phases[sub]

    # -- measurement --------------------------------------------------------

    def sample(self, shots: int, rng: np.random.Generator) -> dict[int, int]:
        """IID computational-basis samples; returns {basis index: count}."""
        if shots < 1:
            raise ValueError("shots must be >= 1")
        p = self.probabilities()
        p = p / p.sum()
        counts = rng.multinomial(shots, p)
        hits = np.nonzero(counts)[0]
        return {int(i): int(counts[i]) for i in hits}


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) so streams can be derived and replayed."""
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams of a master seed, stable across runs."""
    seqs = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(s)) for s in seqs]


# ---------------------------------------------------------------------------
# qubit layout


@dataclass(frozen=True)
class QubitLayout:
    """Mapping from embedded spin-orbitals to Jordan-Wigner line positions.

    `order` lists orbital indices (0..n_orb-1) in line order for one spin
    sector; the up sector occupies positions 0..n_orb-1 and the down sector
    mirrors it at positions n_orb..2n_orb-1.
    """

    order: tuple[int, ...]

    @property
    def n_orb(self) -> int:
        return len(self.order)

    @property
    def n_qubits(self) -> int:
        return 2 * len(self.order)

    def position(self, orbital: int, spin: int) -> int:
        """Line position of (orbital, spin); spin 0 = up, 1 = down."""
        p = self.order.index(orbital)
        return p + spin * self.n_orb

    def position_map(self) -> dict[int, int]:
        """orbital -> position within one spin sector."""
        return {orb: p for p, orb in enumerate(self.order)}


# ---------------------------------------------------------------------------
# long-range hopping under Jordan-Wigner


def apply_long_range_hopping(theta: float, i: int, j: int,
                             state: StateVector) -> int:
    """Evolve exp(i*theta*(a^dag_i a_j + h.c.)) between line positions i < j.

    CZ ladder from each intermediate line to j, the two-qubit rotation on
    (i, j), and the ladder reversed. Returns the two-qubit gate count
    2(j - i) + 1.
    """
    if i >= j:
        raise ValueError("need i < j")
    count = 0
    for k in range(i, j):
        state.apply_2q(CZ, k, j)
        count += 1
    state.apply_2q(hopping_gate(theta), i, j)
    count += 1
    for k in range(j - 1, i - 1, -1):
        state.apply_2q(CZ, k, j)
        count += 1
    return count


# ---------------------------------------------------------------------------
# Slater determinant preparation via Givens rotations


def givens_decompose(phi: np.ndarray) -> list[tuple[int, float]]:
    """Decompose an orthonormal N x M column matrix into adjacent rotations.

    Returns rotations [(p, theta), ...] such that applying the mode-space
    rotations G(p, p+1, theta) in list order to the reference matrix
    [I_M; 0] reproduces phi up to column phases (sign), i.e. the same
    determinant up to global phase.
    """
    N, M = phi.shape
    W = phi.copy().astype(float)
    rotations_inv: list[tuple[int, float]] = []
    # eliminate rows bottom-up, column by column, with adjacent rotations
    for c in range(M):
        for r in range(N - 1, c, -1):
            if abs(W[r, c]) < 1e-14:
                continue
            a, b = W[r - 1, c], W[r, c]
            theta = np.arctan2(b, a)
            G = np.array([[np.cos(theta), np.sin(theta)],
                          [-np.sin(theta), np.cos(theta)]])
            W[r - 1:r + 1, :] = G @ W[r - 1:r + 1, :]
            rotations_inv.append((r - 1, theta))
    # W is now [D; 0] with D diagonal +-1 (orthonormal upper triangular)
    return [(p, th) for (p, th) in reversed(rotations_inv)]


def prepare_slater(K_quadratic: np.ndarray, n_up: int, n_down: int,
                   layout: QubitLayout) -> tuple[StateVector, float]:
    """Ground determinant of a one-spin quadratic coefficient matrix.

    Both spin sectors get the same orbital content (n_up = n_down). The
    circuit is X gates on the lowest line positions of each sector followed
    by adjacent Givens rotations. Returns (state, fermi_gap); a zero-ish
    gap means the determinant is not unique.
    """
    if n_up != n_down:
        raise ValueError("equal spin populations required")
    norb = K_quadratic.shape[0]
    if layout.n_orb != norb:
        raise ValueError("layout size mismatch")
    vals, vecs = np.linalg.eigh(K_quadratic)
    gap = float(vals[n_up] - vals[n_up - 1]) if n_up < norb else np.inf
    occ = vecs[:, :n_up]

    # express occupied orbitals on the line: row p of phi_line is the
    # amplitude of the orbital sitting at line position p
    pos = layout.position_map()
    phi_line = np.zeros_like(occ)
    for orb in range(norb):
        phi_line[pos[orb], :] = occ[orb, :]

    rotations = givens_decompose(phi_line)
    n_qubits = 2 * norb
    mask = 0
    for p in range(n_up):
        mask |= 1 << p            # up sector reference
    for p in range(n_down):
        mask |= 1 << (p + norb)   # down sector reference
    state = StateVector.from_bitmask(n_qubits, mask)
    for (p, theta) in rotations:
        g = givens_gate(theta)
        state.apply_2q(g, p, p + 1)
        state.apply_2q(g, p + norb, p + 1 + norb)
    return state, gap


# ---------------------------------------------------------------------------
# exact expectation values


def _hopping_term_indices(n: int, i: int, j: int):
    """(source, target, sign) arrays for <a^dag_i a_j + h.c.>, line positions i < j."""
    idx = np.arange(1 << n)
    src = idx[((idx >> j) & 1 == 1) & ((idx >> i) & 1 == 0)]
    dst = src - (1 << j) + (1 << i)
    if j > i + 1:
        between = src & (((1 << j) - 1) ^ ((1 << (i + 1)) - 1))
        signs = 1.0 - 2.0 * (popcount(between) % 2)
    else:
        signs = np.ones(src.size)
    return src, dst, signs


def _hopping_expectation(amp: np.ndarray, n: int, i: int, j: int) -> float:
    """<a^dag_i a_j + a^dag_j a_i> for line positions i < j with the parity string."""
    src, dst, signs = _hopping_term_indices(n, i, j)
    return float(2.0 * np.real(np.sum(signs * np.conj(amp[dst]) * amp[src])))


class ExpectationEvaluator:
    """Precomputed index machinery for fast repeated <H_emb> evaluations.

    Indices and parity signs depend only on the term positions (layout),
    so one evaluator serves a whole VQE optimisation; the chemical
    potential only rescales the fragment-number coefficients.
    """

    def __init__(self, H, layout: QubitLayout):
        self.H = H
        self.layout = layout
        norb = layout.n_orb
        n = 2 * norb
        pos = layout.position_map()
        idx = np.arange(1 << n)
        K = H.K

        self.hoppings = []  # (a, b, t, [(src, dst, sign) per spin])
        for a in range(norb):
            for b in range(a + 1, norb):
                t = float(K[a, b])
                if abs(t) < 1e-15:
                    continue
                per_spin = []
                for spin in (0, 1):
                    i, j = pos[a] + spin * norb, pos[b] + spin * norb
                    if i > j:
                        i, j = j, i
                    per_spin.append(_hopping_term_indices(n, i, j))
                self.hoppings.append((a, b, t, per_spin))

        self.number_bits = []  # (orbital, base coefficient, is_fragment, q_up, q_dn)
        for a in range(norb):
            self.number_bits.append(
                (a, float(K[a, a]), a < H.n_frag, pos[a], pos[a] + norb))

        self.onsite_masks = []
        for a in range(H.n_frag):
            qu, qd = pos[a], pos[a] + norb
            self.onsite_masks.append(
                (a, ((idx >> qu) & 1 == 1) & ((idx >> qd) & 1 == 1)))
        self._idx = idx

    def hopping_values(self, state: StateVector) -> dict[tuple[int, int], float]:
        amp = state.amp
        out = {}
        for (a, b, t, per_spin) in self.hoppings:
            v = 0.0
            for (src, dst, signs) in per_spin:
                v += 2.0 * np.real(np.sum(signs * np.conj(amp[dst]) * amp[src]))
            out[(a, b)] = float(v)
        return out

    def number_values(self, state: StateVector) -> dict[int, float]:
        probs = state.probabilities()
        idx = self._idx
        out = {}
        for (a, _, _, qu, qd) in self.number_bits:
            nu = float(probs[(idx >> qu) & 1 == 1].sum())
            nd = float(probs[(idx >> qd) & 1 == 1].sum())
            out[a] = nu + nd
        return out

    def onsite_values(self, state: StateVector) -> dict[int, float]:
        probs = state.probabilities()
        return {a: float(probs[mask].sum()) for (a, mask) in self.onsite_masks}

    def energy(self, state: StateVector, mu: float | None = None) -> float:
        if mu is None:
            mu = self.H.mu
        total = 0.0
        for (a, b, t, per_spin) in self.hoppings:
            amp = state.amp
            for (src, dst, signs) in per_spin:
                total += t * 2.0 * np.real(
                    np.sum(signs * np.conj(amp[dst]) * amp[src]))
        nvals = self.number_values(state)
        for (a, base, is_frag, _, _) in self.number_bits:
            coeff = base - (mu if is_frag else 0.0)
            if abs(coeff) > 1e-15:
                total += coeff * nvals[a]
        if abs(self.H.U) > 1e-15:
            for a, v in self.onsite_values(state).items():
                total += self.H.U * v
        return float(total)


def expectation(H, state: StateVector, layout: QubitLayout) -> float:
    """Exact <H_emb> by termwise sparse application under Jordan-Wigner."""
    return ExpectationEvaluator(H, layout).energy(state)


def term_expectations(H, state: StateVector, layout: QubitLayout) -> dict:
    """Expectations needed by the observable formulas, keyed by term kind."""
    ev = ExpectationEvaluator(H, layout)
    return {
        "hopping": ev.hopping_values(state),
        "number": ev.number_values(state),
        "onsite": ev.onsite_values(state),
    }
