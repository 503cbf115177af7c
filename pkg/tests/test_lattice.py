"""Lattice group bookkeeping: residues, catalogs, and description cost.

Cost expectations are frozen scalar literals computed by hand from the
two-level description length formula, so a regression in the catalog or
the cost cannot hide itself.
"""

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticefind.imaging import AtomMap
from latticefind.lattice import (
    LatticeBasis,
    enumerate_groups,
    reduce_offset,
    sparsity_cost,
    stopping_constant,
)

DEFAULT_BASIS = LatticeBasis((6, 0), (0, 6))

# hand-computed description cost pieces for the 75x75 default catalog:
# 36 groups, largest group 169 sites
LOG2_2G = 6.169925001442312  # log2(72)
LOG2_2K = 8.400879436282183  # log2(338)

basis_vectors = st.tuples(st.integers(-9, 9), st.integers(-9, 9))


def nondegenerate(p, q):
    return p[0] * q[1] - p[1] * q[0] != 0


class TestBasis:
    def test_det(self):
        assert DEFAULT_BASIS.det == 36
        assert LatticeBasis((5, 2), (-2, 5)).det == 29

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            LatticeBasis((2, 4), (1, 2))
        with pytest.raises(ValueError):
            LatticeBasis((0, 0), (1, 2))

    @given(basis_vectors, basis_vectors)
    def test_canonical_invariants(self, p, q):
        if not nondegenerate(p, q):
            return
        b = LatticeBasis(p, q).canonical()
        assert b.det > 0
        assert b.p[0] ** 2 + b.p[1] ** 2 <= b.q[0] ** 2 + b.q[1] ** 2
        # p points into the upper half plane, components read as (x, y)
        assert b.p[1] > 0 or (b.p[1] == 0 and b.p[0] > 0)
        assert b.canonical() == b
        assert b.is_canonical

    @given(basis_vectors, basis_vectors)
    def test_canonical_preserves_absolute_determinant(self, p, q):
        if not nondegenerate(p, q):
            return
        b = LatticeBasis(p, q)
        assert b.canonical().det == abs(b.det)


class TestReduceOffset:
    def test_example(self):
        assert reduce_offset((7, 7), DEFAULT_BASIS) == (1, 1)

    def test_representatives_fill_half_open_cell(self):
        # offsets live in B*[0,1)^2, so components run 0..5 for period 6
        for m in range(1, 13):
            for n in range(1, 13):
                assert reduce_offset((m, n), DEFAULT_BASIS) == (m % 6, n % 6)

    @given(
        st.integers(-50, 50),
        st.integers(-50, 50),
        st.integers(-4, 4),
        st.integers(-4, 4),
    )
    def test_translation_invariance(self, m, n, a, b):
        basis = LatticeBasis((5, 2), (-2, 5))
        shifted = (
            m + a * basis.p[0] + b * basis.q[0],
            n + a * basis.p[1] + b * basis.q[1],
        )
        assert reduce_offset(shifted, basis) == reduce_offset((m, n), basis)

    def test_exhaustive_residue_count(self):
        # det 29 basis: exactly 29 distinct residues over any large window
        basis = LatticeBasis((5, 2), (-2, 5))
        residues = {
            reduce_offset((m, n), basis)
            for m in range(1, 30)
            for n in range(1, 30)
        }
        assert len(residues) == 29


class TestEnumerateGroups:
    def test_default_catalog_shape(self):
        cat = enumerate_groups(DEFAULT_BASIS, 75, 75)
        assert cat.n_groups == 36
        assert cat.max_group_size == 169
        # 75 = 6 * 12 + 3: three residues per axis get 13 lattice lines,
        # the other three get 12, so sizes split 13*13 / 13*12 / 12*12
        assert Counter(g.size for g in cat.groups) == {169: 9, 156: 18, 144: 9}

    def test_unit_basis_single_group(self):
        cat = enumerate_groups(LatticeBasis((1, 0), (0, 1)), 8, 9)
        assert cat.n_groups == 1
        assert cat.groups[0].size == 72

    def test_group_of_matches_offsets(self):
        cat = enumerate_groups(DEFAULT_BASIS, 75, 75)
        assert cat.groups[cat.group_of((7, 7))].offset == (1, 1)
        assert cat.groups[cat.group_of((5, 5))].offset == (5, 5)
        with pytest.raises(ValueError):
            cat.group_of((0, 3))
        with pytest.raises(ValueError):
            cat.group_of((76, 3))

    def test_members_sorted_and_in_bounds(self):
        cat = enumerate_groups(DEFAULT_BASIS, 30, 20)
        for g in cat.groups:
            members = [tuple(row) for row in g.members]
            assert members == sorted(members)
            for m, n in members:
                assert 1 <= m <= 30 and 1 <= n <= 20

    @given(
        basis_vectors,
        basis_vectors,
        st.integers(3, 40),
        st.integers(3, 40),
    )
    @settings(max_examples=40, deadline=None)
    def test_groups_partition_every_pixel(self, p, q, rows, cols):
        det = p[0] * q[1] - p[1] * q[0]
        if not (2 <= abs(det) <= 200):
            return
        cat = enumerate_groups(LatticeBasis(p, q), rows, cols)
        seen = set()
        for g in cat.groups:
            for m, n in (tuple(row) for row in g.members):
                assert (m, n) not in seen
                seen.add((m, n))
        assert len(seen) == rows * cols
        # membership agrees with the residue map
        site = next(iter(seen))
        g = cat.group_of(site)
        assert reduce_offset(site, cat.basis) == cat.groups[g].offset


class TestSparsityCost:
    def test_empty_map_costs_nothing(self):
        cat = enumerate_groups(DEFAULT_BASIS, 75, 75)
        assert sparsity_cost(AtomMap.empty(75, 75), cat) == 0.0

    def test_one_atom(self):
        cat = enumerate_groups(DEFAULT_BASIS, 75, 75)
        atoms = AtomMap(75, 75, {(5, 5): 1.0})
        assert sparsity_cost(atoms, cat) == pytest.approx(
            LOG2_2G + LOG2_2K, abs=1e-9
        )
        assert sparsity_cost(atoms, cat) == pytest.approx(14.570804437724496, abs=1e-9)

    def test_full_largest_group(self):
        cat = enumerate_groups(DEFAULT_BASIS, 75, 75)
        group = max(cat.groups, key=lambda g: g.size)
        entries = {tuple(int(v) for v in row): 1.0 for row in group.members}
        atoms = AtomMap(75, 75, entries)
        assert sparsity_cost(atoms, cat) == pytest.approx(
            LOG2_2G + 169 * LOG2_2K, abs=1e-9
        )
        assert sparsity_cost(atoms, cat) == pytest.approx(1425.9185497331314, abs=1e-6)

    def test_two_groups_two_atoms(self):
        cat = enumerate_groups(DEFAULT_BASIS, 75, 75)
        atoms = AtomMap(75, 75, {(5, 5): 1.0, (6, 5): 1.0})
        assert sparsity_cost(atoms, cat) == pytest.approx(
            2 * LOG2_2G + 2 * LOG2_2K, abs=1e-9
        )

    def test_adding_an_atom_never_cheapens(self):
        cat = enumerate_groups(DEFAULT_BASIS, 30, 30)
        rng = np.random.default_rng(4)
        entries = {}
        prev = 0.0
        for _ in range(25):
            site = (int(rng.integers(1, 31)), int(rng.integers(1, 31)))
            if site in entries:
                continue
            entries[site] = 1.0
            cost = sparsity_cost(AtomMap(30, 30, dict(entries)), cat)
            assert cost >= prev - 1e-12
            prev = cost


class TestStoppingConstant:
    def test_default_catalog_value(self):
        cat = enumerate_groups(DEFAULT_BASIS, 75, 75)
        assert stopping_constant(cat) == pytest.approx(
            1318.8073369205335, abs=1e-9
        )

    def test_unit_lattice_formula(self):
        cat = enumerate_groups(LatticeBasis((1, 0), (0, 1)), 8, 9)
        expected = math.log2(2 * 1) + 72 * math.log2(2 * 72)
        assert stopping_constant(cat) == pytest.approx(expected, rel=1e-12)
