"""Integer lattice bases, residue-class site groups, and sparsity costs.

A basis (p, q) of nonzero determinant tiles the pixel grid into |det(p, q)|
residue classes: two sites belong to the same class when their difference
is an integer combination of p and q.  Each in-bounds class is a "group";
the solver selects whole groups at a time and the two-level description
cost below prices a candidate amplitude matrix by how many groups it
touches and how many individual sites it occupies.

Coordinates are 1-based pixel sites throughout, matching `imaging`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LatticeBasis:
    """Pair of integer lattice vectors with nonzero determinant.

    Canonical form (see ``canonical``): ||p|| <= ||q||, det(p, q) > 0, and
    p points into the closed upper half plane excluding the negative x axis
    (angle in [0, 180) degrees, components read as (x, y)).
    """

    p: tuple[int, int]
    q: tuple[int, int]

    def __post_init__(self):
        p = (int(self.p[0]), int(self.p[1]))
        q = (int(self.q[0]), int(self.q[1]))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if self.det == 0:
            raise ValueError(f"basis is degenerate: p={p}, q={q}")

    @property
    def det(self) -> int:
        return self.p[0] * self.q[1] - self.p[1] * self.q[0]

    def canonical(self) -> "LatticeBasis":
        """Return the canonical-form basis spanning the same lattice.

        Idempotent: shorter vector first (order kept on ties), then p is
        sign-flipped into the upper half plane, then q is sign-flipped to
        make det(p, q) positive.
        """
        p, q = self.p, self.q
        if p[0] * p[0] + p[1] * p[1] > q[0] * q[0] + q[1] * q[1]:
            p, q = q, p
        if p[1] < 0 or (p[1] == 0 and p[0] < 0):
            p = (-p[0], -p[1])
        if p[0] * q[1] - p[1] * q[0] < 0:
            q = (-q[0], -q[1])
        return LatticeBasis(p, q)

    @property
    def is_canonical(self) -> bool:
        return self == self.canonical()


@dataclass(frozen=True)
class LatticeGroup:
    """All in-bounds sites of one residue class.

    ``offset`` is the class representative inside the half-open fundamental
    parallelogram (it may fall outside the 1-based pixel grid; it is a
    label, not necessarily a valid site).  ``members`` is a (k, 2) int array
    of 1-based sites sorted lexicographically.
    """

    basis: LatticeBasis
    offset: tuple[int, int]
    members: np.ndarray

    @property
    def size(self) -> int:
        return self.members.shape[0]


@dataclass(frozen=True)
class GroupCatalog:
    """The full residue-class partition of a rows x cols grid.

    ``groups`` is ordered by offset (lexicographic), ``group_index`` maps
    each 0-based pixel to its group id, and ``max_group_size`` is the K
    used by the per-site term of the description cost.
    """

    basis: LatticeBasis
    rows: int
    cols: int
    groups: tuple
    group_index: np.ndarray
    max_group_size: int

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, site: tuple[int, int]) -> int:
        m, n = int(site[0]), int(site[1])
        if not (1 <= m <= self.rows and 1 <= n <= self.cols):
            raise ValueError(f"site {site} outside grid")
        return int(self.group_index[m - 1, n - 1])


def reduce_offset(site: tuple[int, int], basis: LatticeBasis) -> tuple[int, int]:
    """Map a site to its residue-class representative.

    Solves site = offset + zp*p + zq*q with integer zp, zq and offset in
    the half-open fundamental parallelogram B*[0,1)^2.  Exact integer
    arithmetic: the lattice coordinates are rational with denominator
    det(p, q), and Python floor division floors for either det sign.
    """
    m, n = int(site[0]), int(site[1])
    p1, p2 = basis.p
    q1, q2 = basis.q
    det = basis.det
    zp = (q2 * m - q1 * n) // det
    zq = (-p2 * m + p1 * n) // det
    return (m - zp * p1 - zq * q1, n - zp * p2 - zq * q2)


def enumerate_groups(basis: LatticeBasis, rows: int, cols: int) -> GroupCatalog:
    """Partition the grid into residue-class groups under ``basis``.

    Every site lands in exactly one group.  When the grid spans at least
    one full period along both basis directions the catalog has exactly
    |det(p, q)| groups; a grid too small to touch every class yields fewer.
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid dims must be >= 1")
    p1, p2 = basis.p
    q1, q2 = basis.q
    det = basis.det

    mm, nn = np.meshgrid(
        np.arange(1, rows + 1, dtype=np.int64),
        np.arange(1, cols + 1, dtype=np.int64),
        indexing="ij",
    )
    m = mm.ravel()
    n = nn.ravel()
    zp = np.floor_divide(q2 * m - q1 * n, det)
    zq = np.floor_divide(-p2 * m + p1 * n, det)
    om = m - zp * p1 - zq * q1
    on = n - zp * p2 - zq * q2

    offsets = np.stack([om, on], axis=1)
    uniq, inverse = np.unique(offsets, axis=0, return_inverse=True)

    sites = np.stack([m, n], axis=1)
    order = np.argsort(inverse, kind="stable")  # sites are generated lex-ordered
    sorted_ids = inverse[order]
    bounds = np.searchsorted(sorted_ids, np.arange(uniq.shape[0] + 1))

    groups = []
    for g in range(uniq.shape[0]):
        members = sites[order[bounds[g] : bounds[g + 1]]]
        groups.append(
            LatticeGroup(basis=basis, offset=(int(uniq[g, 0]), int(uniq[g, 1])), members=members)
        )

    group_index = inverse.reshape(rows, cols).astype(np.int32)
    return GroupCatalog(
        basis=basis,
        rows=rows,
        cols=cols,
        groups=tuple(groups),
        group_index=group_index,
        max_group_size=max(g.size for g in groups),
    )


def sparsity_cost(atoms, catalog: GroupCatalog) -> float:
    """Two-level description cost of an amplitude map.

    log2(2*|G|) per group touched plus log2(2*K) per occupied site, where
    |G| is the number of groups in the catalog and K the largest group
    size.  The empty map costs 0.
    """
    if (atoms.rows, atoms.cols) != (catalog.rows, catalog.cols):
        raise ValueError("atom map dims do not match catalog")
    if atoms.nnz == 0:
        return 0.0
    gids = {catalog.group_of(site) for site in atoms.entries}
    group_bits = math.log2(2 * catalog.n_groups)
    site_bits = math.log2(2 * catalog.max_group_size)
    return group_bits * len(gids) + site_bits * atoms.nnz


def stopping_constant(catalog: GroupCatalog) -> float:
    """Cost budget for a single fully occupied lattice group.

    One group term plus one site term per expected lattice site, taking
    the site count as rows*cols / |det| (the average class size).
    """
    group_bits = math.log2(2 * catalog.n_groups)
    site_bits = math.log2(2 * catalog.max_group_size)
    return group_bits + site_bits * (catalog.rows * catalog.cols / abs(catalog.basis.det))
