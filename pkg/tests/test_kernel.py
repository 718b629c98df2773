import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkphase.experiment import ExperimentConfig, make_grid, select_training
from qkphase.ising import ChainSpec, fidelity, fidelity_per_site
from qkphase.kernel import (
    AlignmentError,
    GramMatrix,
    KernelKind,
    alignment,
    build_gram,
    center,
    extrapolate_f_alignment,
    ideal_labels,
    kernel_rows,
    read_gram_csv,
    write_gram_csv,
)

POINTS = [0.3, 0.55, 0.9, 1.05, 1.4, 1.7]


def plain(entries, kind=KernelKind.FIDELITY):
    entries = np.asarray(entries, dtype=float)
    return GramMatrix(kind, 4, tuple(range(entries.shape[0])), entries)


@pytest.fixture(scope="module")
def default_grid():
    return make_grid(ExperimentConfig())


class TestBuildGram:
    @pytest.mark.parametrize("kind", [KernelKind.FIDELITY, KernelKind.FIDELITY_PER_SITE])
    def test_single_point(self, kind):
        g = build_gram(kind, [0.8], ChainSpec(50))
        assert g.entries.tolist() == [[1.0]]

    def test_ideal(self):
        g = build_gram(KernelKind.IDEAL, [0.5, 0.7, 1.5])
        assert g.entries.tolist() == [[1, 1, -1], [1, 1, -1], [-1, -1, 1]]
        assert g.n_sites is None

    def test_ideal_label_at_critical_point(self):
        assert ideal_labels([1.0]).tolist() == [1.0]

    def test_entries_match_scalar_functions(self):
        chain = ChainSpec(30)
        gf = build_gram(KernelKind.FIDELITY, POINTS, chain)
        gl = build_gram(KernelKind.FIDELITY_PER_SITE, POINTS, chain)
        for i, a in enumerate(POINTS):
            for j, b in enumerate(POINTS):
                assert gf.entries[i, j] == pytest.approx(fidelity(chain, a, b), rel=1e-14)
                assert gl.entries[i, j] == pytest.approx(fidelity_per_site(chain, a, b), rel=1e-14)

    @pytest.mark.parametrize("kind", [KernelKind.FIDELITY, KernelKind.FIDELITY_PER_SITE])
    def test_invariants(self, kind):
        g = build_gram(kind, POINTS, ChainSpec(200))
        k = g.entries
        assert np.array_equal(k, k.T)
        assert np.all(np.diag(k) == 1.0)
        assert np.all((k >= 0) & (k <= 1))

    def test_requires_chain(self):
        with pytest.raises(ValueError):
            build_gram(KernelKind.FIDELITY, POINTS)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            build_gram(KernelKind.IDEAL, [])

    def test_read_only(self):
        g = build_gram(KernelKind.FIDELITY, POINTS, ChainSpec(10))
        with pytest.raises(ValueError):
            g.entries[0, 0] = 2.0

    def test_deterministic_and_thread_independent(self):
        chain = ChainSpec(500)
        pts = np.linspace(0.25, 1.75, 40)
        a = build_gram(KernelKind.FIDELITY_PER_SITE, pts, chain)
        b = build_gram(KernelKind.FIDELITY_PER_SITE, pts, chain)
        c = build_gram(KernelKind.FIDELITY_PER_SITE, pts, chain, threads=4)
        assert np.array_equal(a.entries, b.entries)
        assert np.array_equal(a.entries, c.entries)

    def test_fidelity_is_lambda_to_the_n(self):
        n = 800
        chain = ChainSpec(n)
        pts = np.linspace(0.25, 1.75, 25)
        kf = build_gram(KernelKind.FIDELITY, pts, chain).entries
        kl = build_gram(KernelKind.FIDELITY_PER_SITE, pts, chain).entries
        mask = kf > 1e-300
        np.testing.assert_allclose(kf[mask], kl[mask] ** n, rtol=1e-10)

    def test_kernel_rows_match_gram(self):
        chain = ChainSpec(64)
        g = build_gram(KernelKind.FIDELITY_PER_SITE, POINTS, chain)
        rows = kernel_rows(KernelKind.FIDELITY_PER_SITE, chain, POINTS, POINTS)
        np.testing.assert_array_equal(rows, g.entries)

    def test_block_structure_at_n100(self, default_grid):
        pts = select_training(default_grid, "d1").points
        g = build_gram(KernelKind.FIDELITY, pts, ChainSpec(100))
        y = ideal_labels(pts)
        same = np.equal.outer(y, y)
        off = ~np.eye(len(pts), dtype=bool)
        within = g.entries[same & off].mean()
        across = g.entries[~same].mean()
        assert within > across
        assert within > 5 * across


class TestCenter:
    def test_constant_matrix(self):
        assert np.all(center(plain(np.full((4, 4), 0.7))).entries == 0.0)

    def test_identity_2x2(self):
        # H I H = H with H = I - 11^T / 2
        np.testing.assert_allclose(
            center(plain(np.eye(2))).entries, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-16
        )

    @settings(max_examples=30)
    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_matches_projector_form(self, m, seed):
        k = np.random.default_rng(seed).uniform(size=(m, m))
        k = k + k.T
        h = np.eye(m) - np.full((m, m), 1.0 / m)
        np.testing.assert_allclose(center(plain(k)).entries, h @ k @ h, atol=1e-13)

    def test_flag_and_rejects_double_centering(self):
        c = center(plain(np.eye(3)))
        assert c.centered
        with pytest.raises(ValueError):
            center(c)

    @settings(max_examples=50)
    @given(st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_row_and_column_sums_vanish(self, m, seed):
        x = np.random.default_rng(seed).normal(size=(m, 3))
        k = x @ x.T
        kc = center(plain(k)).entries
        assert np.all(np.abs(kc.sum(axis=0)) < 1e-10 * m)
        assert np.all(np.abs(kc.sum(axis=1)) < 1e-10 * m)
        assert np.max(np.abs(kc - kc.T)) <= 1e-14 * max(1.0, np.abs(k).max())


class TestAlignment:
    def setup_method(self):
        g = build_gram(KernelKind.FIDELITY_PER_SITE, POINTS, ChainSpec(100))
        self.kc = center(g)
        self.yc = center(build_gram(KernelKind.IDEAL, POINTS))

    def test_self(self):
        assert alignment(self.kc, self.kc) == pytest.approx(1.0, abs=1e-15)

    def test_sign_flip(self):
        neg = GramMatrix(self.kc.kind, self.kc.n_sites, self.kc.points, -self.kc.entries, True)
        assert alignment(self.kc, neg) == pytest.approx(-1.0, abs=1e-15)

    def test_symmetric_and_bounded(self):
        a = alignment(self.kc, self.yc)
        assert a == alignment(self.yc, self.kc)
        assert -1.0 <= a <= 1.0

    def test_requires_centered(self):
        with pytest.raises(AlignmentError):
            alignment(build_gram(KernelKind.IDEAL, POINTS), self.yc)

    def test_zero_matrix(self):
        z = center(plain(np.ones((6, 6))))
        z = GramMatrix(z.kind, z.n_sites, self.yc.points, z.entries, True)
        with pytest.raises(AlignmentError):
            alignment(z, self.yc)

    def test_mismatched_points(self):
        other = center(build_gram(KernelKind.IDEAL, POINTS[::-1]))
        with pytest.raises(AlignmentError):
            alignment(self.kc, other)

    def test_permutation_invariance(self):
        perm = [3, 0, 5, 1, 4, 2]
        pts = [POINTS[i] for i in perm]
        kc = center(build_gram(KernelKind.FIDELITY_PER_SITE, pts, ChainSpec(100)))
        yc = center(build_gram(KernelKind.IDEAL, pts))
        assert alignment(kc, yc) == pytest.approx(alignment(self.kc, self.yc), rel=1e-13)

    def test_identity_kernel_limit(self):
        # centered identity against any centered label kernel gives 1/sqrt(M-1)
        m = 9
        pts = tuple(np.linspace(0.3, 1.7, m))
        ident = center(GramMatrix(KernelKind.FIDELITY, 10, pts, np.eye(m)))
        yc = center(build_gram(KernelKind.IDEAL, pts))
        assert alignment(ident, yc) == pytest.approx(1 / math.sqrt(m - 1), rel=1e-12)


@pytest.fixture(scope="module")
def setup(default_grid):
    pts = select_training(default_grid, "random", seed=0, m=133).points
    ref_n = 10_000
    ref = build_gram(KernelKind.FIDELITY_PER_SITE, pts, ChainSpec(ref_n))
    yc = center(build_gram(KernelKind.IDEAL, pts))
    return pts, ref, yc, ref_n


class TestExtrapolation:
    def test_reference_size_matches_direct(self, setup):
        pts, ref, yc, ref_n = setup
        direct = alignment(center(build_gram(KernelKind.FIDELITY, pts, ChainSpec(ref_n))), yc)
        assert abs(extrapolate_f_alignment(ref, yc, ref_n) - direct) < 1e-3

    def test_tends_to_identity_limit(self, setup):
        pts, ref, yc, _ = setup
        m = len(pts)
        a = extrapolate_f_alignment(ref, yc, 1e8)
        assert a == pytest.approx(1 / math.sqrt(m - 1), rel=0.02)
        assert a == pytest.approx(1 / math.sqrt(m), rel=0.05)

    def test_single_interior_maximum_on_wide_range(self, setup):
        _, ref, yc, _ = setup
        ns = np.logspace(1, 4, 61)
        a = np.array([extrapolate_f_alignment(ref, yc, n) for n in ns])
        k = int(np.argmax(a))
        assert 0 < k < ns.size - 1
        assert np.all(np.diff(a[: k + 1]) > 0)
        assert np.all(np.diff(a[k:]) < 0)

    def test_rejects_wrong_reference(self, setup):
        _, ref, yc, _ = setup
        with pytest.raises(ValueError):
            extrapolate_f_alignment(center(ref), yc, 100)


class TestCsv:
    @pytest.mark.parametrize("kind", list(KernelKind))
    def test_round_trip_bit_exact(self, tmp_path, kind):
        chain = None if kind is KernelKind.IDEAL else ChainSpec(1234)
        g = build_gram(kind, np.linspace(0.25, 1.75, 17), chain)
        for gm in (g, center(g)):
            path = tmp_path / f"{kind.value}_{gm.centered}.csv"
            write_gram_csv(path, gm, comments=["qkphase test"])
            back = read_gram_csv(path)
            assert back.kind is gm.kind and back.n_sites == gm.n_sites
            assert back.centered == gm.centered and back.points == gm.points
            assert np.array_equal(back.entries, gm.entries)

    def test_header_layout(self, tmp_path):
        g = build_gram(KernelKind.IDEAL, [0.5, 1.5])
        path = tmp_path / "g.csv"
        write_gram_csv(path, g)
        lines = path.read_text().splitlines()
        assert lines[0] == "IDEAL,,2,0,0.5,1.5"
        assert len(lines) == 3
