"""Hubbard problem definition: lattice, fragment geometry, hopping coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PERIODIC = "periodic"
ANTI_PERIODIC = "anti-periodic"


@dataclass(frozen=True)
class HubbardSpec:
    """A finite Hubbard lattice with fixed electron count.

    dimension: 1 or 2. For 1D set Ly=1. `boundary` applies to every axis;
    use `boundary_y` to override the second axis independently.
    N_occ electrons are split equally between up and down spins.
    """

    dimension: int
    Lx: int
    Ly: int
    t: float
    U: float
    boundary: str
    N_occ: int
    boundary_y: str | None = None

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dimension}")
        if self.dimension == 1 and self.Ly != 1:
            raise ValueError("1D lattice requires Ly=1")
        if self.Lx < 2 or (self.dimension == 2 and self.Ly < 2):
            raise ValueError("lattice extents must be >= 2 in each used dimension")
        for b in (self.boundary, self.boundary_y):
            if b is not None and b not in (PERIODIC, ANTI_PERIODIC):
                raise ValueError(f"unknown boundary condition {b!r}")
        if self.N_occ % 2 != 0:
            raise ValueError("N_occ must be even (equal up and down filling)")
        if not 0 < self.N_occ <= 2 * self.n_sites:
            raise ValueError(f"N_occ={self.N_occ} outside (0, {2 * self.n_sites}]")

    @property
    def n_sites(self) -> int:
        return self.Lx * self.Ly

    @property
    def filling(self) -> float:
        """Site occupancy <n> = N_occ / N."""
        return self.N_occ / self.n_sites

    def site_index(self, x: int, y: int = 0) -> int:
        """Row-major site indexing: x varies fastest."""
        return y * self.Lx + x


@dataclass(frozen=True)
class FragmentSpec:
    """Contiguous rectangular fragment anchored at the lattice origin.

    For a 1D lattice use shape (N_frag,). For a 2D lattice use (Nx, Ny)
    with Nx <= Ny; a 1xN strip is the '1D fragment in a 2D lattice' case.
    """

    shape: tuple[int, ...]

    def __post_init__(self):
        if len(self.shape) not in (1, 2):
            raise ValueError("fragment shape must be 1D or 2D")
        if any(s < 1 for s in self.shape):
            raise ValueError("fragment extents must be >= 1")
        if len(self.shape) == 2 and self.shape[0] > self.shape[1]:
            raise ValueError("2D fragment requires Nx <= Ny")

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_1d(self) -> bool:
        return len(self.shape) == 1

    def validate_against(self, spec: HubbardSpec) -> None:
        if self.is_1d and spec.dimension != 1:
            raise ValueError("1D-shaped fragment requires a 1D lattice")
        if not self.is_1d and spec.dimension != 2:
            raise ValueError("2D-shaped fragment requires a 2D lattice")
        if self.is_1d:
            if self.shape[0] > spec.Lx // 2:
                raise ValueError("fragment must not exceed half the lattice")
        else:
            nx, ny = self.shape
            if nx > spec.Lx or ny > spec.Ly:
                raise ValueError("fragment does not fit inside the lattice")
            if self.n_sites > spec.n_sites // 2:
                raise ValueError("fragment must not exceed half the lattice")

    def sites(self, spec: HubbardSpec) -> list[int]:
        """Lattice site indices covered by the fragment, in fragment order.

        Fragment order is x-fastest over the rectangle, matching the
        lattice's own row-major order restricted to the rectangle.
        """
        if self.is_1d:
            return list(range(self.shape[0]))
        nx, ny = self.shape
        return [spec.site_index(x, y) for y in range(ny) for x in range(nx)]

    def edge_sites(self) -> list[int]:
        """Fragment-local indices of sites on the rectangle boundary.

        1D fragments have edge sites {first, last}; a 1xN strip in 2D is
        all edge; a full 2D block has 2(Nx + Ny - 2) boundary sites.
        """
        if self.is_1d:
            n = self.shape[0]
            return [0] if n == 1 else [0, n - 1]
        nx, ny = self.shape
        out = []
        for y in range(ny):
            for x in range(nx):
                if x in (0, nx - 1) or y in (0, ny - 1):
                    out.append(y * nx + x)
        return out

    @property
    def n_edge(self) -> int:
        return len(self.edge_sites())

    def internal_bonds(self) -> list[tuple[int, int]]:
        """Nearest-neighbour bonds with both endpoints inside the fragment,
        as fragment-local index pairs (i < j)."""
        if self.is_1d:
            n = self.shape[0]
            return [(i, i + 1) for i in range(n - 1)]
        nx, ny = self.shape
        bonds = []
        for y in range(ny):
            for x in range(nx):
                i = y * nx + x
                if x + 1 < nx:
                    bonds.append((i, i + 1))
                if y + 1 < ny:
                    bonds.append((i, i + nx))
        return bonds


def _ring_matrix(L: int, t: float, boundary: str) -> np.ndarray:
    """One-axis hopping coefficients: -t on neighbours, boundary sign on the wrap."""
    T = np.zeros((L, L))
    for i in range(L - 1):
        T[i, i + 1] += -t
        T[i + 1, i] += -t
    wrap = t if boundary == ANTI_PERIODIC else -t
    T[0, L - 1] += wrap
    T[L - 1, 0] += wrap
    return T


def build_hopping_matrix(spec: HubbardSpec) -> np.ndarray:
    """One-spin hopping coefficient matrix of the kinetic term.

    In 2D this is the Kronecker sum of the two 1D ring matrices, with the
    site index y*Lx + x. Wrap bonds on a 2-site ring add to the direct bond.
    """
    bx = spec.boundary
    by = spec.boundary_y if spec.boundary_y is not None else spec.boundary
    Tx = _ring_matrix(spec.Lx, spec.t, bx)
    if spec.dimension == 1:
        return Tx
    Ty = _ring_matrix(spec.Ly, spec.t, by)
    return np.kron(np.eye(spec.Ly), Tx) + np.kron(Ty, np.eye(spec.Lx))
