"""Quantization grids, scale fitting, size accounting, packing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.base import clone

from quantlm import quant as Q
from quantlm.exceptions import (
    ConfigError,
    DegenerateInputError,
    DegenerateScaleError,
)
from quantlm.model import TransformerLM


def oracle_nearest(theta, table):
    """Exhaustive grid scan; ties to smaller magnitude, then positive level."""
    levels = sorted(table.integer_levels(), key=lambda q: (abs(q), -q))
    levels = np.asarray(levels, dtype=np.float64)
    d = np.abs(np.asarray(theta, dtype=np.float64)[:, None] - table.alpha * levels[None, :])
    return levels[np.argmin(d, axis=1)]


class TestQuantTable:
    @pytest.mark.parametrize("bits,count", [(1, 2), (2, 3), (4, 15), (8, 255)])
    def test_level_counts(self, bits, count):
        assert Q.QuantTable(bits, 0.5).grid().size == count

    def test_grid_symmetric(self):
        for bits in (1, 2, 3, 4, 8):
            g = Q.QuantTable(bits, 0.7).grid()
            assert_allclose(np.sort(g), np.sort(-g))

    def test_binary_grid_has_no_zero(self):
        assert_array_equal(Q.QuantTable(1, 2.0).grid(), [-2.0, 2.0])

    def test_invalid_construction(self):
        with pytest.raises(ConfigError):
            Q.QuantTable(0, 1.0)
        with pytest.raises(ConfigError):
            Q.QuantTable(9, 1.0)
        with pytest.raises(ConfigError):
            Q.QuantTable(2, 0.0)
        with pytest.raises(ConfigError):
            Q.QuantTable(2, -1.0)


class TestQuantizeValue:
    def test_nearest_point(self):
        table = Q.QuantTable(3, 0.5)  # grid {0, +/-0.5, +/-1.0, +/-1.5}
        level, value = Q.quantize_value(0.7, table)
        assert (level, value) == (1, 0.5)

    def test_zero_maps_to_zero(self):
        for bits in (2, 3, 4, 8):
            level, value = Q.quantize_value(0.0, Q.QuantTable(bits, 0.37))
            assert (level, value) == (0, 0.0)

    def test_midpoint_tie_goes_to_smaller_magnitude(self):
        table = Q.QuantTable(2, 0.5)
        level, value = Q.quantize_value(0.25, table)
        assert (level, value) == (0, 0.0)
        level, _ = Q.quantize_value(-0.25, table)
        assert level == 0

    def test_binary_sign_split(self):
        table = Q.QuantTable(1, 0.8)
        assert Q.quantize_value(0.01, table) == (1, 0.8)
        assert Q.quantize_value(-0.01, table) == (-1, -0.8)
        assert Q.quantize_value(0.0, table)[0] == 1

    def test_clipping_to_extremes(self):
        table = Q.QuantTable(2, 0.5)
        assert Q.quantize_value(99.0, table) == (1, 0.5)
        assert Q.quantize_value(-99.0, table) == (-1, -0.5)

    def test_matches_grid_scan_oracle(self):
        rng = np.random.default_rng(0)
        for bits in (1, 2, 3, 4, 8):
            for trial in range(5):
                table = Q.QuantTable(bits, float(rng.uniform(0.01, 2.0)))
                theta = rng.standard_normal(10_000) * rng.uniform(0.1, 5.0)
                levels, values = Q.quantize_array(theta, table)
                want = oracle_nearest(theta, table)
                assert_array_equal(levels.astype(np.float64), want)
                assert_array_equal(values, table.alpha * want)


class TestFitScale:
    def test_binary_closed_form(self):
        table = Q.fit_scale([0.9, 1.0, -1.1], 1)
        assert table.alpha == 1.0
        # dense scan cannot do better than the closed form
        w = np.array([0.9, 1.0, -1.1])
        best = min(Q.scale_objective(w, Q.QuantTable(1, a))
                   for a in np.linspace(0.2, 2.5, 4001))
        assert Q.scale_objective(w, table) <= best + 1e-12

    def test_constant_cluster_exact(self):
        w = np.full(17, 0.3125)
        table = Q.fit_scale(w, 2)
        assert table.alpha == 0.3125
        assert Q.scale_objective(w, table) == 0.0

    def test_beats_dense_scan(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal(50)
        table = Q.fit_scale(w, 2)
        amax = np.abs(w).max()
        scanned = np.geomspace(amax / 100, 2 * amax, 10_000)
        best_scan = min(Q.scale_objective(w, Q.QuantTable(2, a)) for a in scanned)
        assert Q.scale_objective(w, table) <= best_scan * (1 + 1e-9)

    def test_degenerate_inputs(self):
        with pytest.raises(DegenerateScaleError):
            Q.fit_scale(np.zeros(10), 2)
        with pytest.raises(DegenerateInputError):
            Q.fit_scale([], 2)

    def test_objective_trace_never_increases(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal(200)
        for alpha0 in (0.01, 0.1, 1.0, 3.0):
            trace = Q.fit_scale_trace(w, 4, alpha0)
            for a, b in zip(trace, trace[1:]):
                assert b <= a + 1e-9 * max(1.0, abs(a))

    def test_extra_start_is_honored(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal(80)
        base = Q.fit_scale(w, 4)
        seeded = Q.fit_scale(w, 4, extra_starts=(base.alpha,))
        assert Q.scale_objective(w, seeded) <= Q.scale_objective(w, base) * (1 + 1e-12)


class TestQuantizeCluster:
    def test_on_grid_weights_have_zero_perturbation(self):
        levels = np.array([-1, 0, 1, 1, -1, 0, 1, -1, -1, 1])
        arrays = {"w": 0.5 * levels.astype(np.float64)}
        result = Q.quantize_cluster(arrays, 2)
        assert result.table.alpha == 0.5
        assert result.perturbation == 0.0
        assert_array_equal(result.levels["w"], levels)

    def test_more_bits_never_hurt(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            arrays = {"w": rng.standard_normal(120)}
            p1 = Q.quantize_cluster(arrays, 1).perturbation
            p8 = Q.quantize_cluster(arrays, 8).perturbation
            assert p8 <= p1

    def test_perturbation_matches_scalar_loop(self):
        rng = np.random.default_rng(9)
        arrays = {"a": rng.standard_normal(12), "b": rng.standard_normal(8)}
        result = Q.quantize_cluster(arrays, 2)
        total = 0.0
        for name in arrays:
            for w, q in zip(arrays[name], result.levels[name]):
                total += (float(w) - result.table.alpha * int(q)) ** 2
        assert_allclose(result.perturbation, total, rtol=1e-6)

    def test_ladder_is_monotone(self):
        rng = np.random.default_rng(10)
        for trial in range(5):
            arrays = {"w": rng.standard_normal(200) * rng.uniform(0.1, 3)}
            ladder = Q.perturbation_by_bits(arrays)
            perts = [ladder[b].perturbation for b in sorted(ladder)]
            for lo, hi in zip(perts, perts[1:]):
                assert hi <= lo + 1e-12

    def test_idempotence(self):
        rng = np.random.default_rng(11)
        arrays = {"w": rng.standard_normal(64).astype(np.float32)}
        first = Q.quantize_cluster(arrays, 4)
        snapped = {"w": Q.dequantize(first.levels["w"], first.table.alpha)}
        levels, values = Q.quantize_array(snapped["w"], first.table)
        assert_array_equal(levels, first.levels["w"])
        assert_allclose(values, snapped["w"], rtol=1e-7)

    def test_round_trip_is_exact(self):
        rng = np.random.default_rng(12)
        table = Q.QuantTable(4, 0.123)
        levels, values = Q.quantize_array(rng.standard_normal(50), table)
        assert_array_equal(Q.dequantize(levels, table.alpha, np.float64), values)


def tiny_model(seed=0, vocab=13, tied=False):
    return TransformerLM.init_random(vocab, d_model=8, d_ff=16, n_heads=2,
                                     n_layers=2, max_len=16, seed=seed, tied=tied)


class TestClusters:
    def test_default_partition(self):
        m = tiny_model()
        clusters = Q.default_clusters(m)
        ids = [c.id for c in clusters]
        assert ids == ["embed.tok", "embed.pos", "layer0.attn", "layer0.ffn",
                       "layer1.attn", "layer1.ffn", "out.proj"]
        Q.validate_clusters(clusters, m.params())

    def test_embeddings_can_stay_full_precision(self):
        clusters = Q.default_clusters(tiny_model(), quantize_embeddings=False)
        assert [c.id for c in clusters][0] == "layer0.attn"

    def test_tied_model_has_no_projection_cluster(self):
        clusters = Q.default_clusters(tiny_model(tied=True))
        assert "out.proj" not in [c.id for c in clusters]

    def test_overlap_rejected(self):
        m = tiny_model()
        clusters = [Q.LayerCluster("a", ("layer0.Q",)),
                    Q.LayerCluster("b", ("layer0.Q",))]
        with pytest.raises(ConfigError):
            Q.validate_clusters(clusters, m.params())

    def test_unknown_reference_rejected(self):
        with pytest.raises(ConfigError):
            Q.validate_clusters([Q.LayerCluster("a", ("nope",))], tiny_model().params())

    def test_empty_cluster_rejected(self):
        with pytest.raises(ConfigError):
            Q.LayerCluster("a", ())


class TestQuantizedModel:
    def make(self, bits=2, tied=False, assignment=None):
        m = tiny_model(seed=3, tied=tied)
        clusters = Q.default_clusters(m)
        if assignment is None:
            assignment = {c.id: bits for c in clusters}
        return m, clusters, Q.quantize_model(m, clusters, assignment)

    def test_dequantized_params_lie_on_grids(self):
        _, clusters, qm = self.make(bits=2)
        for c in clusters:
            grid = qm.tables[c.id].grid()
            for ref in c.param_refs:
                vals = qm.param_array(ref, np.float64).reshape(-1)
                assert np.isin(vals, grid).all()

    def test_residue_kept_exactly(self):
        m, _, qm = self.make(bits=4)
        assert_array_equal(qm.residue["layer0.b1"], m.params()["layer0.b1"].data)
        assert_array_equal(qm.residue["layer1.ln2.g"], m.params()["layer1.ln2.g"].data)

    def test_full_precision_assignment_passes_through(self):
        m, clusters, qm = self.make(assignment={c.id: 32 for c in Q.default_clusters(tiny_model(seed=3))})
        assert not qm.tables
        for name, t in m.params().items():
            assert_array_equal(qm.param_array(name), t.data)

    def test_to_model_round_trip_error_bounded(self):
        # in-range weights land within half a step; clipped tails add
        # whatever sticks out past the top level
        m, _, qm = self.make(bits=8)
        rebuilt = qm.to_model()
        owner = qm.cluster_of()
        for name, t in m.params().items():
            err = np.abs(rebuilt.params()[name].data - t.data).max()
            if name not in owner:
                assert err == 0.0
                continue
            table = qm.tables[owner[name]]
            clip = max(0.0, float(np.abs(t.data).max()) - table.alpha * table.max_level)
            assert err <= max(table.alpha * 0.51, clip) + 1e-6

    def test_missing_assignment_rejected(self):
        m = tiny_model()
        clusters = Q.default_clusters(m)
        with pytest.raises(ConfigError):
            Q.quantize_model(m, clusters, {"embed.tok": 2})

    def test_average_bits(self):
        m = tiny_model(seed=4)
        clusters = Q.default_clusters(m, quantize_embeddings=False)
        assignment = {c.id: (1 if c.id.endswith("attn") else 8) for c in clusters}
        qm = Q.quantize_model(m, clusters, assignment)
        sizes = Q.cluster_sizes(clusters, {n: t.data.shape for n, t in m.params().items()})
        want = sum(assignment[c] * sizes[c] for c in sizes) / sum(sizes.values())
        assert_allclose(qm.average_bits(), want, rtol=1e-12)


class TestSizeAccounting:
    def test_residue_only_model(self):
        qm = Q.QuantizedModel(meta={}, clusters=[], assignment={}, tables={},
                              levels={}, residue={"w": np.zeros(10 ** 6, dtype=np.float32)})
        assert qm.size_mb() == 4.0

    def test_single_binary_cluster(self):
        c = Q.LayerCluster("c", ("w",))
        qm = Q.QuantizedModel(meta={}, clusters=[c], assignment={"c": 1},
                              tables={"c": Q.QuantTable(1, 0.5)},
                              levels={"w": np.ones(10 ** 6, dtype=np.int16)},
                              residue={})
        assert_allclose(qm.size_mb(), 0.125004, rtol=1e-12)

    def test_mixed_assignment_matches_bookkeeping_oracle(self):
        m = tiny_model(seed=5)
        clusters = Q.default_clusters(m)
        assignment = {"embed.tok": 8, "embed.pos": 32, "layer0.attn": 1,
                      "layer0.ffn": 2, "layer1.attn": 4, "layer1.ffn": 8,
                      "out.proj": 2}
        qm = Q.quantize_model(m, clusters, assignment)
        by_cluster = {r: c.id for c in clusters for r in c.param_refs}
        expect_bytes = 0.0
        n_tables = 0
        for name, t in m.params().items():
            cid = by_cluster.get(name)
            bits = assignment.get(cid, 32) if cid else 32
            expect_bytes += t.data.size * bits / 8
        n_tables = sum(1 for cid, b in assignment.items() if b != 32)
        expect_bytes += 4 * n_tables
        assert_allclose(qm.size_mb(), expect_bytes / 1e6, rtol=1e-12)

    def test_full_precision_size(self):
        m = tiny_model()
        total = sum(p.data.size for p in m.param_list())
        assert_allclose(Q.full_model_size_mb(m), total * 4 / 1e6, rtol=1e-12)

    def test_compression_ratio_table_values(self):
        assert round(Q.compression_ratio(66, 2.3), 1) == 28.7
        assert round(Q.compression_ratio(66, 4.6), 1) == 14.3
        assert round(Q.compression_ratio(106, 14.1), 1) == 7.5

    def test_compression_ratio_rejects_nonpositive(self):
        with pytest.raises(DegenerateInputError):
            Q.compression_ratio(0, 1)
        with pytest.raises(DegenerateInputError):
            Q.compression_ratio(1, -2)


class TestPacking:
    @pytest.mark.parametrize("bits", [1, 2, 3, 4, 8])
    def test_round_trip(self, bits):
        rng = np.random.default_rng(bits)
        table = Q.QuantTable(bits, 1.0)
        levels = rng.choice(table.integer_levels(), size=101).astype(np.int16)
        packed = Q.pack_levels(levels, bits)
        assert len(packed) == int(np.ceil(101 * bits / 8))
        assert_array_equal(Q.unpack_levels(packed, bits, 101), levels)

    def test_binary_bit_layout(self):
        packed = Q.pack_levels(np.array([1, -1, -1, 1, 1, 1, 1, 1]), 1)
        assert packed == bytes([0b11111001])

    def test_out_of_range_levels_rejected(self):
        with pytest.raises(ConfigError):
            Q.pack_levels(np.array([2]), 2)
        with pytest.raises(ConfigError):
            Q.pack_levels(np.array([0]), 1)

    def test_short_payload_rejected(self):
        with pytest.raises(ConfigError):
            Q.unpack_levels(b"\x00", 8, 5)

    @settings(max_examples=40)
    @given(st.lists(st.integers(min_value=-7, max_value=7), min_size=1, max_size=64))
    def test_round_trip_property(self, levels):
        arr = np.asarray(levels, dtype=np.int16)
        assert_array_equal(Q.unpack_levels(Q.pack_levels(arr, 4), 4, arr.size), arr)


class TestClusterQuantizer:
    def test_fit_transform_snaps_to_grid(self):
        rng = np.random.default_rng(20)
        w = rng.standard_normal((6, 7)).astype(np.float32)
        est = Q.ClusterQuantizer(n_bits=2)
        out = est.fit_transform(w)
        assert out.shape == w.shape and out.dtype == w.dtype
        assert np.isin(out.astype(np.float64), est.table_.grid().astype(np.float32)).all()

    def test_levels_match_transform(self):
        rng = np.random.default_rng(21)
        w = rng.standard_normal(40)
        est = Q.ClusterQuantizer(n_bits=4).fit(w)
        assert_allclose(est.quantize_levels(w) * est.table_.alpha, est.transform(w),
                        rtol=1e-12)

    def test_transform_before_fit_rejected(self):
        with pytest.raises(ConfigError):
            Q.ClusterQuantizer().transform(np.ones(3))

    def test_sklearn_protocol(self):
        est = Q.ClusterQuantizer(n_bits=4, n_starts=16)
        cloned = clone(est)
        assert cloned.get_params()["n_bits"] == 4
        assert cloned.get_params()["n_starts"] == 16
        est.set_params(n_bits=2)
        assert est.n_bits == 2
