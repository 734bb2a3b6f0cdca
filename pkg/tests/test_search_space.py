import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trinas import autodiff as ad
from trinas import search_space as ss


DESK_SPEC = ss.SupernetSpec(num_cells=2, num_nodes=4, channels=8,
                            num_classes=4, in_shape=(8, 8, 1))


def test_edge_list_matches_darts_layout():
    # intermediate i (0-based) sees the two cell inputs plus all earlier
    # intermediates, so i + 2 candidates
    assert ss.num_edges(1) == 2
    assert ss.num_edges(2) == 5
    assert ss.num_edges(4) == 14
    edges = ss.edge_list(2)
    assert edges == [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)]


def test_spec_validation():
    with pytest.raises(ValueError):
        ss.SupernetSpec(num_nodes=2)
    with pytest.raises(ValueError):
        ss.SupernetSpec(ops=("sep_conv_3x3", "made_up_op"))
    with pytest.raises(ValueError):
        ss.SupernetSpec(num_cells=2, use_reduction=True)


def test_opset_hash_tracks_the_ordered_catalog():
    # column k of the arch logits means op k, so order is part of identity
    a = ss.opset_hash(("zero", "identity", "max_pool_3x3"))
    b = ss.opset_hash(("max_pool_3x3", "zero", "identity"))
    c = ss.opset_hash(("zero", "identity", "max_pool_3x3"))
    assert a == c != b
    assert len(a) == 16


class TestArchParams:
    def test_softmax_rows_sum_to_one(self):
        arch = ss.ArchParams.init(DESK_SPEC, np.random.default_rng(0))
        for kind in arch.cell_types():
            w = arch.softmax_weights(kind)
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_copy_is_independent(self):
        arch = ss.ArchParams.init(DESK_SPEC, np.random.default_rng(1))
        dup = arch.copy()
        dup.weights["normal"].data[0, 0] += 1.0
        assert arch.weights["normal"].data[0, 0] != \
            dup.weights["normal"].data[0, 0]


class TestDeriveCell:
    def test_keeps_two_inputs_per_node(self):
        arch = ss.ArchParams.init(DESK_SPEC, np.random.default_rng(2))
        cell = ss.derive_cell(arch)
        assert cell.num_intermediate == 1
        assert len(cell.normal) == 1
        (a, _), (b, _) = cell.normal[0]
        assert {a, b} == {0, 1}

    def test_never_selects_zero_op(self):
        spec = ss.SupernetSpec(num_cells=1, num_nodes=5, channels=4,
                               num_classes=2,
                               ops=("zero", "identity", "avg_pool_3x3"))
        rng = np.random.default_rng(3)
        for _ in range(20):
            arch = ss.ArchParams.init(spec, rng)
            arch.weights["normal"].data[:] = rng.standard_normal(
                arch.weights["normal"].shape)
            # make zero dominant everywhere; it must still never be picked
            arch.weights["normal"].data[:, 0] += 10.0
            cell = ss.derive_cell(arch)
            for node in cell.normal:
                for _, op in node:
                    assert op != "zero"

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(-50, 50))
    def test_invariant_to_per_row_shift(self, seed, shift):
        rng = np.random.default_rng(seed)
        arch = ss.ArchParams.init(DESK_SPEC, rng)
        arch.weights["normal"].data[:] = rng.standard_normal(
            arch.weights["normal"].shape)
        before = ss.derive_cell(arch)
        arch.weights["normal"].data += shift
        after = ss.derive_cell(arch)
        assert before == after


class TestSupernetForward:
    def test_logit_shape_and_finiteness(self):
        net = ss.Supernet(DESK_SPEC)
        rng = np.random.default_rng(4)
        ws = net.init_weights(rng)
        arch = ss.ArchParams.init(DESK_SPEC, rng)
        x = ad.constant(rng.uniform(-1, 1, (3, 1, 8, 8)))
        logits = net.forward(ws, arch, x)
        assert logits.shape == (3, 4)
        assert np.isfinite(logits.data).all()

    def test_gradients_reach_arch_parameters(self):
        net = ss.Supernet(DESK_SPEC)
        rng = np.random.default_rng(5)
        ws = net.init_weights(rng)
        arch = ss.ArchParams.init(DESK_SPEC, rng)
        x = ad.constant(rng.uniform(-1, 1, (4, 1, 8, 8)))
        loss = ad.cross_entropy(net.forward(ws, arch, x),
                                np.array([0, 1, 2, 3]))
        g = ad.gradients(loss, arch.weights)
        assert g.norm() > 0.0

    def test_wrong_channel_count_rejected(self):
        net = ss.Supernet(DESK_SPEC)
        rng = np.random.default_rng(6)
        ws = net.init_weights(rng)
        arch = ss.ArchParams.init(DESK_SPEC, rng)
        x = ad.constant(np.zeros((2, 3, 8, 8)))
        with pytest.raises(ad.ShapeError):
            net.forward(ws, arch, x)


class TestEvalNetwork:
    def _cell(self):
        return ss.DiscreteCell(1, (((0, "sep_conv_3x3"),
                                    (1, "dil_conv_3x3")),))

    def test_forward_shape(self):
        net = ss.EvalNetwork(DESK_SPEC, self._cell())
        rng = np.random.default_rng(7)
        ws = net.init_weights(rng)
        x = ad.constant(rng.uniform(-1, 1, (2, 1, 8, 8)))
        assert net.forward(ws, x).shape == (2, 4)

    def test_parameter_count_grows_with_cells(self):
        counts = []
        for cells in (1, 2, 4):
            spec = ss.SupernetSpec(num_cells=cells, num_nodes=4, channels=8,
                                   num_classes=4, in_shape=(8, 8, 1))
            net = ss.EvalNetwork(spec, self._cell())
            ws = net.init_weights(np.random.default_rng(8))
            counts.append(ws.num_params)
        assert counts[0] < counts[1] < counts[2]

    def test_rejects_op_missing_from_spec(self):
        spec = ss.SupernetSpec(num_cells=1, num_nodes=4, channels=4,
                               num_classes=2,
                               ops=("identity", "avg_pool_3x3"))
        with pytest.raises(ss.GenotypeError):
            ss.EvalNetwork(spec, self._cell())


class TestGenotypeText:
    def _cell(self):
        return ss.DiscreteCell(2, (((0, "sep_conv_3x3"), (1, "identity")),
                                   ((1, "avg_pool_3x3"), (2, "dil_conv_3x3"))))

    def test_roundtrip(self):
        text = ss.genotype_text(self._cell(), config_hash="cafe1234",
                                ops_fingerprint="beef5678")
        cell, header = ss.parse_genotype_text(text)
        assert cell == self._cell()
        assert header["config_hash"] == "cafe1234"
        assert header["opset_hash"] == "beef5678"

    def test_roundtrip_with_reduce_cell(self):
        cell = ss.DiscreteCell(1, (((0, "identity"), (1, "zero")),),
                               (((0, "max_pool_3x3"), (1, "identity")),))
        back, _ = ss.parse_genotype_text(ss.genotype_text(cell))
        assert back == cell

    def test_rejects_unknown_op(self):
        text = ss.genotype_text(self._cell())
        with pytest.raises(ss.GenotypeError):
            ss.parse_genotype_text(text.replace("sep_conv_3x3", "warp_drive"))

    def test_rejects_missing_version_line(self):
        text = ss.genotype_text(self._cell())
        body = "\n".join(text.splitlines()[1:])
        with pytest.raises(ss.GenotypeError):
            ss.parse_genotype_text(body)

    def test_rejects_duplicate_input(self):
        bad = ("# trinas genotype v1\n"
               "normal 2 0 identity\n"
               "normal 2 0 zero\n")
        with pytest.raises(ss.GenotypeError):
            ss.parse_genotype_text(bad)

    def test_discrete_cell_validates_edge_counts(self):
        with pytest.raises(ss.GenotypeError):
            ss.DiscreteCell(1, (((0, "identity"),),))
        with pytest.raises(ss.GenotypeError):
            ss.DiscreteCell(2, (((0, "identity"), (1, "zero")),))
