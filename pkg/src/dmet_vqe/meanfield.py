"""Mean-field (quadratic) solution: occupied orbitals and the 1-RDM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERACY_TOL = 1e-9


@dataclass(frozen=True)
class MeanFieldSolution:
    """Occupied-orbital matrix for one spin sector plus diagnostics.

    phi: N x M matrix, columns are the M lowest eigenvectors of the hopping
    matrix (orthonormal). `fermi_gap` is the eigenvalue gap between the
    M-th and (M+1)-th levels; `whole_eigenspaces` is False when the gap is
    numerically zero, i.e. the occupied set cuts through a degenerate
    eigenspace and structure guarantees downstream are void.
    """

    phi: np.ndarray
    eigenvalues: np.ndarray
    fermi_gap: float
    whole_eigenspaces: bool

    @property
    def n_occupied(self) -> int:
        return self.phi.shape[1]

    @property
    def energy(self) -> float:
        """Sum of occupied eigenvalues (one spin sector)."""
        return float(np.sum(self.eigenvalues[: self.n_occupied]))


def lowest_eigenvectors(T: np.ndarray, M: int) -> MeanFieldSolution:
    """Diagonalise the hopping matrix and occupy the M lowest orbitals.

    Eigenvalues come out ascending (ties broken by index, as returned by
    the dense symmetric solver).
    """
    N = T.shape[0]
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= {N}, got M={M}")
    vals, vecs = np.linalg.eigh(T)
    if M < N:
        gap = float(vals[M] - vals[M - 1])
    else:
        gap = np.inf
    return MeanFieldSolution(
        phi=vecs[:, :M],
        eigenvalues=vals,
        fermi_gap=gap,
        whole_eigenspaces=bool(gap > DEGENERACY_TOL),
    )


def one_rdm(phi: np.ndarray) -> np.ndarray:
    """One-particle reduced density matrix of the determinant, phi @ phi.T."""
    return phi @ phi.T
