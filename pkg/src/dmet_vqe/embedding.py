"""Bath construction and the embedded Hamiltonian.

The environment block of the mean-field 1-RDM is diagonalised; eigenvalues
classify environment orbitals as empty (~0), occupied (~1) or fractional.
The fractional eigenvectors define the bath, and projecting the hopping
matrix into (fragment + bath) gives the one-spin coefficient matrix of the
embedded problem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import FragmentSpec, HubbardSpec

OCC_CLASSIFY_EPS = 1e-7
OCC_CLASSIFY_EPS_MAX = 1e-4
STRUCTURE_THRESHOLD = 1e-10


class FractionalCountMismatch(RuntimeError):
    """Environment RDM did not yield exactly N_frag fractional eigenvalues."""


@dataclass(frozen=True)
class Projector:
    """Block projector [[I, 0], [0, V]] onto fragment + bath orbitals.

    P is N x 2*N_frag in the permuted basis (fragment sites first, then
    environment). `site_order` records that permutation of lattice sites.
    N_emb counts embedded electrons of both spins.
    """

    P: np.ndarray
    site_order: np.ndarray
    n_frag: int
    N_emb: int
    bath_eigenvalues: np.ndarray
    n_core: int


@dataclass(frozen=True)
class EmbeddedHamiltonian:
    """Embedded problem on 2*N_frag orbitals per spin.

    K: one-spin quadratic coefficient matrix (identical for both spins),
    indexed fragment orbitals 0..N_frag-1 then bath orbitals. U acts on
    fragment orbitals only; mu enters as -mu on fragment number operators.
    n_up = n_down = N_emb // 2.
    """

    K: np.ndarray
    U: float
    mu: float
    N_emb: int
    n_frag: int

    @property
    def n_orb(self) -> int:
        return self.K.shape[0]

    @property
    def n_each_spin(self) -> int:
        return self.N_emb // 2

    @property
    def n_qubits(self) -> int:
        return 2 * self.n_orb

    def quadratic_one_spin(self) -> np.ndarray:
        """K plus the -mu shift on fragment orbitals (state-prep quadratic part)."""
        Kq = self.K.copy()
        for i in range(self.n_frag):
            Kq[i, i] -= self.mu
        return Kq

    def with_mu(self, mu: float) -> "EmbeddedHamiltonian":
        return EmbeddedHamiltonian(self.K, self.U, mu, self.N_emb, self.n_frag)


@dataclass(frozen=True)
class TermStructure:
    """Classified nonzero terms of the embedded Hamiltonian (one spin).

    Hoppings are (i, j, t) with i < j; number terms (i, t) collect the bath
    diagonal. `bath_groups` partitions bath orbitals into connected
    components of the bath-bath coupling graph, each sorted ascending,
    groups ordered by size descending then smallest member.
    """

    n_frag: int
    frag_frag: list[tuple[int, int, float]]
    frag_bath: list[tuple[int, int, float]]
    bath_bath: list[tuple[int, int, float]]
    bath_number: list[tuple[int, float]]
    bath_groups: list[list[int]] = field(default_factory=list)
    threshold: float = STRUCTURE_THRESHOLD

    @property
    def n_orb(self) -> int:
        return 2 * self.n_frag

    def all_hoppings(self) -> list[tuple[int, int, float]]:
        return self.frag_frag + self.frag_bath + self.bath_bath

    def edge_fragment_sites(self) -> list[int]:
        """Fragment orbitals carrying at least one fragment-bath term."""
        return sorted({i for (i, j, t) in self.frag_bath})

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_frag": self.n_frag,
                "threshold": self.threshold,
                "frag_frag": self.frag_frag,
                "frag_bath": self.frag_bath,
                "bath_bath": self.bath_bath,
                "bath_number": self.bath_number,
                "bath_groups": self.bath_groups,
            },
            indent=2,
        )


def _fix_signs(V: np.ndarray) -> np.ndarray:
    """First nonzero component of each column made positive (determinism)."""
    V = V.copy()
    for c in range(V.shape[1]):
        col = V[:, c]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            V[:, c] = -col
    return V


def build_projector(rho: np.ndarray, spec: HubbardSpec, frag: FragmentSpec) -> Projector:
    """Classify environment orbitals of the 1-RDM and build the projector.

    The eigenvalue band for 0/1 classification starts at OCC_CLASSIFY_EPS
    and widens tenfold (up to OCC_CLASSIFY_EPS_MAX) until exactly N_frag
    fractional eigenvalues remain; failing that raises
    FractionalCountMismatch.
    """
    frag.validate_against(spec)
    N = rho.shape[0]
    frag_sites = frag.sites(spec)
    env_sites = [s for s in range(N) if s not in set(frag_sites)]
    order = np.array(frag_sites + env_sites)
    n_frag = len(frag_sites)

    rho_perm = rho[np.ix_(order, order)]
    rho_env = rho_perm[n_frag:, n_frag:]
    vals, vecs = np.linalg.eigh(rho_env)

    eps = OCC_CLASSIFY_EPS
    while True:
        frac = (vals > eps) & (vals < 1.0 - eps)
        if int(frac.sum()) == n_frag:
            break
        eps *= 10.0
        if eps > OCC_CLASSIFY_EPS_MAX:
            raise FractionalCountMismatch(
                f"{int(frac.sum())} fractional environment eigenvalues, "
                f"expected {n_frag} (pathological or degenerate 1-RDM)"
            )
    n_core = int((vals >= 1.0 - eps).sum())
    V = _fix_signs(vecs[:, frac])

    N_emb = spec.N_occ - 2 * n_core
    if N_emb <= 0 or N_emb > 4 * n_frag:
        raise FractionalCountMismatch(
            f"embedded occupation N_emb={N_emb} outside (0, {4 * n_frag}]"
        )

    P = np.zeros((N, 2 * n_frag))
    P[:n_frag, :n_frag] = np.eye(n_frag)
    P[n_frag:, n_frag:] = V
    return Projector(
        P=P,
        site_order=order,
        n_frag=n_frag,
        N_emb=N_emb,
        bath_eigenvalues=vals[frac],
        n_core=n_core,
    )


def project_hopping(T: np.ndarray, proj: Projector) -> np.ndarray:
    """K_emb = P^T T P in the fragment-first permuted basis; symmetrised."""
    order = proj.site_order
    T_perm = T[np.ix_(order, order)]
    K = proj.P.T @ T_perm @ proj.P
    return (K + K.T) / 2.0


def assemble(K: np.ndarray, spec: HubbardSpec, frag: FragmentSpec,
             mu: float, N_emb: int) -> EmbeddedHamiltonian:
    """Combine the projected hopping, the fragment onsite term and -mu."""
    return EmbeddedHamiltonian(K=K, U=spec.U, mu=mu, N_emb=N_emb,
                               n_frag=frag.n_sites)


def _connected_components(n: int, edges: list[tuple[int, int]]) -> list[list[int]]:
    adj: dict[int, set[int]] = {i: set() for i in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen: set[int] = set()
    comps = []
    for i in range(n):
        if i in seen:
            continue
        stack, comp = [i], []
        seen.add(i)
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        comps.append(sorted(comp))
    comps.sort(key=lambda c: (-len(c), c[0]))
    return comps


def analyze_structure(H: EmbeddedHamiltonian,
                      threshold: float = STRUCTURE_THRESHOLD) -> TermStructure:
    """Classify every coefficient of K above threshold and group the bath.

    Bath groups are connected components of the bath-bath coupling graph;
    under the parity conditions on boundary and filling these come out as
    the even/odd split (1D) or the four-group split (2D fragments).
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    K = H.K
    nf, norb = H.n_frag, H.n_orb
    ff, fb, bb = [], [], []
    bnum = []
    for i in range(norb):
        for j in range(i + 1, norb):
            t = float(K[i, j])
            if abs(t) <= threshold:
                continue
            if i < nf and j < nf:
                ff.append((i, j, t))
            elif i >= nf and j >= nf:
                bb.append((i, j, t))
            else:
                fb.append((i, j, t))
    for i in range(nf, norb):
        t = float(K[i, i])
        if abs(t) > threshold:
            bnum.append((i, t))
    edges = [(i - nf, j - nf) for (i, j, t) in bb]
    groups = _connected_components(nf, edges)
    groups = [[g + nf for g in comp] for comp in groups]
    return TermStructure(
        n_frag=nf, frag_frag=ff, frag_bath=fb, bath_bath=bb,
        bath_number=bnum, bath_groups=groups, threshold=threshold,
    )
