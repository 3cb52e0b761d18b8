"""Solvers for the embedded Hamiltonian.

Exact diagonalisation works in the fixed (n_up, n_down) particle sector;
VQE optimises an ansatz circuit with either exact expectation values
(L-BFGS) or sampled estimates (SPSA).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .embedding import EmbeddedHamiltonian
from .statevector import QubitLayout, StateVector, popcount

DENSE_SECTOR_LIMIT = 4096
LANCZOS_TOL = 1e-10


# ---------------------------------------------------------------------------
# sector basis


@dataclass(frozen=True)
class SectorBasis:
    """Computational basis states with fixed particle number per spin.

    Basis elements are (up_mask, down_mask) pairs over n_orb modes each;
    `index` maps a pair back to its row. Sector dimension is
    C(n_orb, n_up) * C(n_orb, n_down).
    """

    n_orb: int
    n_up: int
    n_down: int
    up_masks: tuple[int, ...]
    down_masks: tuple[int, ...]

    @classmethod
    def build(cls, n_orb: int, n_up: int, n_down: int) -> "SectorBasis":
        if not (0 <= n_up <= n_orb and 0 <= n_down <= n_orb):
            raise ValueError("spin populations outside [0, n_orb]")
        def masks(k):
            return tuple(sum(1 << b for b in c)
                         for c in combinations(range(n_orb), k))
        return cls(n_orb, n_up, n_down, masks(n_up), masks(n_down))

    @property
    def dim(self) -> int:
        return len(self.up_masks) * len(self.down_masks)

    def index(self, up_mask: int, down_mask: int) -> int:
        iu = self.up_masks.index(up_mask)
        idn = self.down_masks.index(down_mask)
        return iu * len(self.down_masks) + idn

    def full_index(self, row: int) -> int:
        """Embed a sector row into the 2^(2 n_orb) computational basis.

        Up modes occupy line positions 0..n_orb-1, down modes the rest;
        this matches QubitLayout with identity orbital order.
        """
        iu, idn = divmod(row, len(self.down_masks))
        return self.up_masks[iu] | (self.down_masks[idn] << self.n_orb)


def _hop_sign(mask: int, i: int, j: int) -> int:
    """Fermionic sign of a^dag_i a_j acting on an occupation mask (i != j)."""
    lo, hi = (i, j) if i < j else (j, i)
    between = mask & (((1 << hi) - 1) ^ ((1 << (lo + 1)) - 1))
    return 1 - 2 * (bin(between).count("1") % 2)


def sector_hamiltonian(H: EmbeddedHamiltonian, basis: SectorBasis,
                       mu: float | None = None) -> sp.csr_matrix:
    """Sparse matrix of H_emb restricted to the sector, orbital order = K order."""
    if mu is None:
        mu = H.mu
    K = H.K
    norb = H.n_orb
    nf = H.n_frag
    hops = [(a, b, float(K[a, b])) for a in range(norb)
            for b in range(a + 1, norb) if abs(K[a, b]) > 1e-15]
    diag_coeff = np.array([K[a, a] - (mu if a < nf else 0.0)
                           for a in range(norb)])

    ups, dns = basis.up_masks, basis.down_masks
    nu, nd = len(ups), len(dns)
    up_index = {m: i for i, m in enumerate(ups)}
    dn_index = {m: i for i, m in enumerate(dns)}

    rows, cols, vals = [], [], []

    # diagonal: number terms + onsite
    dvals = np.zeros(basis.dim)
    up_n = np.array([[(m >> a) & 1 for a in range(norb)] for m in ups])
    dn_n = np.array([[(m >> a) & 1 for a in range(norb)] for m in dns])
    dia_up = up_n @ diag_coeff
    dia_dn = dn_n @ diag_coeff
    dvals += np.repeat(dia_up, nd) + np.tile(dia_dn, nu)
    if abs(H.U) > 1e-15:
        both = (up_n[:, :nf][:, None, :] * dn_n[:, :nf][None, :, :]).sum(axis=2)
        dvals += H.U * both.reshape(-1)

    # hopping within each spin sector
    def add_spin_hops(masks, index_map, is_up):
        for (a, b, t) in hops:
            for mi, m in enumerate(masks):
                if (m >> b) & 1 and not ((m >> a) & 1):
                    m2 = m ^ (1 << a) ^ (1 << b)
                    sign = _hop_sign(m, a, b)
                    mj = index_map[m2]
                    if is_up:
                        r = np.arange(nd)
                        rows.extend((mj * nd + r).tolist())
                        cols.extend((mi * nd + r).tolist())
                    else:
                        r = np.arange(nu)
                        rows.extend((r * nd + mj).tolist())
                        cols.extend((r * nd + mi).tolist())
                    vals.extend([t * sign] * (nd if is_up else nu))

    add_spin_hops(ups, up_index, True)
    add_spin_hops(dns, dn_index, False)

    off = sp.coo_matrix((vals, (rows, cols)), shape=(basis.dim, basis.dim))
    # hops were added in one direction only; add the hermitian conjugate
    Hs = off + off.T + sp.diags(dvals)
    return Hs.tocsr()


@dataclass(frozen=True)
class EDResult:
    energy: float
    sector_state: np.ndarray
    basis: SectorBasis
    gap: float

    def to_statevector(self, layout: QubitLayout | None = None) -> StateVector:
        """Embed the sector ground state into the full register.

        With a non-identity layout the orbitals are permuted onto their
        line positions, including the fermionic reordering signs.
        """
        n_orb = self.basis.n_orb
        n = 2 * n_orb
        amp = np.zeros(1 << n, dtype=complex)
        if layout is None or tuple(layout.order) == tuple(range(n_orb)):
            for row, a in enumerate(self.sector_state):
                if abs(a) > 1e-16:
                    amp[self.basis.full_index(row)] = a
            return StateVector(n, amp)
        pos = layout.position_map()
        for row, a in enumerate(self.sector_state):
            if abs(a) < 1e-16:
                continue
            iu, idn = divmod(row, len(self.basis.down_masks))
            sgn = 1.0
            full = 0
            for mask, offset in ((self.basis.up_masks[iu], 0),
                                 (self.basis.down_masks[idn], n_orb)):
                orbs = [o for o in range(n_orb) if (mask >> o) & 1]
                perm = sorted(range(len(orbs)), key=lambda k: pos[orbs[k]])
                sgn *= _permutation_sign(perm)
                for o in orbs:
                    full |= 1 << (pos[o] + offset)
            amp[full] = sgn * a
        return StateVector(n, amp)


def _permutation_sign(perm: list[int]) -> float:
    sign = 1.0
    seen = [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, clen = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            clen += 1
        if clen % 2 == 0:
            sign = -sign
    return sign


def exact_diagonalize(H: EmbeddedHamiltonian, mu: float | None = None) -> EDResult:
    """Lowest eigenpair of H_emb in the (N_emb/2, N_emb/2) sector."""
    k = H.n_each_spin
    basis = SectorBasis.build(H.n_orb, k, k)
    if basis.dim == 0:
        raise ValueError("empty particle sector")
    Hs = sector_hamiltonian(H, basis, mu)
    if basis.dim <= DENSE_SECTOR_LIMIT:
        dense = Hs.toarray()
        vals, vecs = np.linalg.eigh(dense)
        gap = float(vals[1] - vals[0]) if basis.dim > 1 else np.inf
        return EDResult(float(vals[0]), vecs[:, 0], basis, gap)
    vals, vecs = spla.eigsh(Hs, k=2, which="SA", tol=LANCZOS_TOL)
    order = np.argsort(vals)
    return EDResult(float(vals[order[0]]), vecs[:, order[0]], basis,
                    float(vals[order[1]] - vals[order[0]]))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class SPSAConfig:
    """Gain schedule and budget for the simultaneous-perturbation optimizer."""

    a: float = 2.0
    A: float = 10.0
    alpha: float = 0.602
    gamma: float = 0.101
    c: float = 0.2
    max_iters: int = 2000
    seed: int = 0


@dataclass
class VQEResult:
    theta: np.ndarray
    energy: float
    evaluations: int
    history: list[float] = field(default_factory=list)
    fidelity: float | None = None
    converged: bool = True
    message: str = ""


def spsa_minimize(objective, theta0: np.ndarray, config: SPSAConfig,
                  final_objective=None, select_last: int = 10) -> VQEResult:
    """SPSA descent with the standard two-evaluation gradient estimate.

    a_k = a/(k+1+A)^alpha, c_k = c/(k+1)^gamma, perturbation +-1 per
    coordinate. The returned theta is the best of the trailing
    `select_last` iterates re-evaluated with `final_objective` (defaults
    to `objective`), since individual SPSA iterates are noisy.
    """
    rng = np.random.Generator(np.random.Philox(config.seed))
    theta = np.asarray(theta0, dtype=float).copy()
    evals = 0
    history = []
    tail: list[np.ndarray] = []
    for k in range(config.max_iters):
        ak = config.a / (k + 1 + config.A) ** config.alpha
        ck = config.c / (k + 1) ** config.gamma
        delta = rng.integers(0, 2, size=theta.size) * 2.0 - 1.0
        fp = objective(theta + ck * delta)
        fm = objective(theta - ck * delta)
        evals += 2
        ghat = (fp - fm) / (2.0 * ck) * delta
        theta = theta - ak * ghat
        history.append(0.5 * (fp + fm))
        if k >= config.max_iters - select_last:
            tail.append(theta.copy())
    if not tail:
        tail = [theta.copy()]
    fob = final_objective if final_objective is not None else objective
    scores = [fob(t) for t in tail]
    evals += len(tail)
    best = int(np.argmin(scores))
    return VQEResult(theta=tail[best], energy=float(scores[best]),
                     evaluations=evals, history=history)


def quasi_newton_minimize(objective, theta0: np.ndarray,
                          tol: float = 1e-8, fd_step: float = 1e-5,
                          max_iters: int = 500) -> VQEResult:
    """L-BFGS-B with central finite-difference gradients.

    Requires a deterministic objective. Returns the best iterate with a
    warning message when the line search gives up early.
    """
    from scipy.optimize import minimize

    evals = [0]

    def f(x):
        evals[0] += 1
        return objective(x)

    def grad(x):
        g = np.zeros_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = fd_step
            g[i] = (f(x + e) - f(x - e)) / (2 * fd_step)
        return g

    history = []

    def cb(xk):
        history.append(float(f(xk)))

    res = minimize(f, np.asarray(theta0, dtype=float), jac=grad,
                   method="L-BFGS-B", callback=cb,
                   options={"gtol": tol, "maxiter": max_iters,
                            "ftol": 1e-14})
    msg = "" if res.success else f"optimizer stopped early: {res.message}"
    return VQEResult(theta=res.x, energy=float(res.fun),
                     evaluations=evals[0], history=history,
                     converged=bool(res.success), message=msg)
