import numpy as np
import pytest

from pcgait import encoder, synth
from pcgait.evaluation import (
    EmbeddingEntry,
    EmbeddingSet,
    EvalMatrix,
    attribute_report,
    cross_view_matrix,
    distance_matrix,
    extract_embeddings,
    rank_k_accuracy,
    write_matrix_csv,
    write_matrix_heatmap,
    write_report_csv,
)
from pcgait.projection import read_pgm
from pcgait.synth import SequenceRecord
from pcgait.training import record_key

from oracles import reference_rank_k

# Hand-enumerated 3x3 retrieval fixture. Probes and gallery both carry
# identities (a, b, c) in order.
#   rank-1: probe a -> 0.1 (a, hit), probe b -> 0.2 (c, miss),
#           probe c -> 0.3 (c, hit)                          => 2/3
#   rank-5 covers the whole 3-entry gallery                  => 1
# Swapping probe/gallery roles transposes the grid:
#   probe a -> 0.1 (a, hit), probe b -> 0.4 (b, hit),
#   probe c -> 0.2 (b, miss)                                 => 2/3
RANK_GRID = np.array([
    [0.1, 0.5, 0.9],
    [0.8, 0.4, 0.2],
    [0.6, 0.7, 0.3],
])
RANK_LABELS = ["a", "b", "c"]


def entry(value, identity, view, attribute, seq_id):
    return EmbeddingEntry(
        np.array([value], dtype=np.float64), identity, view, attribute, seq_id
    )


def toy_embedding_set():
    """Two identities, two views, normal plus bag walks, scalar embeddings.

    Hand enumeration for bag probes against the normal gallery at k=1:
    the view-0 bag walk of identity a sits at 5.2, nearer to b's 10.0
    than to a's 0.0, so cell (0, 0) misses; every other cell hits.
    """
    return EmbeddingSet([
        entry(0.0, "a", 0, "normal", "a/n/0"),
        entry(1.0, "a", 90, "normal", "a/n/90"),
        entry(10.0, "b", 0, "normal", "b/n/0"),
        entry(11.0, "b", 90, "normal", "b/n/90"),
        entry(5.2, "a", 0, "bag", "a/g/0"),
        entry(10.6, "b", 90, "bag", "b/g/90"),
    ])


class TestDistanceMatrix:
    def test_identical_embeddings_zero(self):
        e = EmbeddingSet([entry(3.0, "a", 0, "normal", "x")])
        f = EmbeddingSet([entry(3.0, "a", 0, "normal", "y")])
        assert distance_matrix(e, f)[0, 0] == 0.0

    def test_three_four_five(self):
        a = EmbeddingSet([EmbeddingEntry(
            np.array([0.0, 0.0, 0.0, 0.0]), "a", 0, "normal", "p")])
        b = EmbeddingSet([EmbeddingEntry(
            np.array([3.0, 4.0, 0.0, 0.0]), "a", 0, "normal", "g")])
        assert distance_matrix(a, b)[0, 0] == pytest.approx(5.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        ents = [
            EmbeddingEntry(rng.standard_normal(8), "a", 0, "normal", f"s{i}")
            for i in range(5)
        ]
        s = EmbeddingSet(ents)
        d = distance_matrix(s, s)
        assert np.allclose(d, d.T, atol=1e-12)
        # self distance: sqrt of the |a|^2+|b|^2-2ab cancellation residue
        assert np.all(np.diag(d) < 1e-6)

    def test_empty_rejected(self):
        s = EmbeddingSet([entry(0.0, "a", 0, "normal", "x")])
        with pytest.raises(ValueError):
            distance_matrix(EmbeddingSet([]), s)


class TestRankK:
    def test_hand_enumerated_grid(self):
        assert rank_k_accuracy(RANK_GRID, RANK_LABELS, RANK_LABELS, 1) == 2 / 3
        assert rank_k_accuracy(RANK_GRID, RANK_LABELS, RANK_LABELS, 5) == 1.0

    def test_grid_role_swap(self):
        assert rank_k_accuracy(RANK_GRID.T, RANK_LABELS, RANK_LABELS, 1) == 2 / 3
        assert rank_k_accuracy(RANK_GRID.T, RANK_LABELS, RANK_LABELS, 5) == 1.0

    def test_matches_reference_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            n_p, n_g = int(rng.integers(3, 8)), int(rng.integers(3, 8))
            d = rng.random((n_p, n_g))
            plab = rng.integers(0, 4, n_p).tolist()
            glab = rng.integers(0, 4, n_g).tolist()
            if not set(plab) & set(glab):
                glab[0] = plab[0]
            for k in (1, 3):
                assert rank_k_accuracy(d, plab, glab, k) == \
                    reference_rank_k(d, plab, glab, k)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        d = rng.random((6, 9))
        plab = rng.integers(0, 3, 6).tolist()
        glab = rng.integers(0, 3, 9).tolist()
        for k in (1, 2, 5):
            assert rank_k_accuracy(d, plab, glab, k) == \
                rank_k_accuracy(d ** 2, plab, glab, k) == \
                rank_k_accuracy(2.0 * d + 1.0, plab, glab, k)

    def test_duplicate_gallery_entry_never_hurts(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            d = rng.random((5, 6))
            plab = rng.integers(0, 3, 5).tolist()
            glab = rng.integers(0, 3, 6).tolist()
            if not set(plab) & set(glab):
                glab[0] = plab[0]
            base = rank_k_accuracy(d, plab, glab, 1)
            j = int(rng.integers(0, 6))
            d2 = np.concatenate([d, d[:, j:j + 1]], axis=1)
            assert rank_k_accuracy(d2, plab, glab + [glab[j]], 1) >= base

    def test_ties_break_by_gallery_index(self):
        d = np.array([[1.0, 1.0]])
        assert rank_k_accuracy(d, ["a"], ["b", "a"], 1) == 0.0
        assert rank_k_accuracy(d, ["a"], ["a", "b"], 1) == 1.0

    def test_absent_probe_dropped_and_counted(self):
        d = np.array([[0.5, 0.1], [0.2, 0.9]])
        acc, absent = rank_k_accuracy(
            d, ["a", "z"], ["b", "a"], 1, return_excluded=True
        )
        # probe z has no gallery entry; probe a's nearest (0.1) is an a
        assert acc == 1.0 and absent == 1

    def test_all_absent_rejected(self):
        with pytest.raises(ValueError):
            rank_k_accuracy(np.ones((2, 2)), ["x", "y"], ["a", "b"], 1)

    def test_excluded_pairs_removed(self):
        d = np.array([[0.1, 0.3, 0.5]])
        glab = ["a", "b", "a"]
        assert rank_k_accuracy(d, ["a"], glab, 1) == 1.0
        excl = np.array([[True, False, False]])
        assert rank_k_accuracy(d, ["a"], glab, 1, excluded=excl) == 0.0


class TestEmbeddingSet:
    def test_duplicate_seq_id_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingSet([
                entry(0.0, "a", 0, "normal", "x"),
                entry(1.0, "b", 90, "normal", "x"),
            ])

    def test_views_sorted(self):
        s = EmbeddingSet([
            entry(0.0, "a", 270, "normal", "x"),
            entry(0.0, "a", 0, "normal", "y"),
            entry(0.0, "a", 90, "normal", "z"),
        ])
        assert s.views() == (0, 90, 270)

    def test_select(self):
        s = toy_embedding_set()
        assert s.select("bag", 0) == [4]
        assert s.select(None, 90) == [1, 3, 5]


class TestCrossViewMatrix:
    def test_toy_normal_gallery(self):
        m = cross_view_matrix(toy_embedding_set(), "bag", 1)
        assert m.views == (0, 90)
        assert np.array_equal(m.values, [[0.0, 1.0], [1.0, 1.0]])
        assert m.defined_mean() == 0.75
        assert m.excluded_probes == 0

    def test_toy_variant_gallery(self):
        m = cross_view_matrix(
            toy_embedding_set(), "bag", 1, gallery_role="variant_gallery"
        )
        # each cell's one-entry bag gallery covers exactly one identity;
        # the other probe is dropped as absent, four drops in total
        assert np.array_equal(m.values, np.ones((2, 2)))
        assert m.excluded_probes == 4

    def test_self_match_excluded_but_other_sequences_count(self):
        s = EmbeddingSet([
            entry(0.0, "a", 0, "normal", "a0"),
            entry(0.3, "a", 0, "normal", "a1"),
            entry(10.0, "b", 0, "normal", "b0"),
            entry(0.05, "a", 90, "normal", "a90"),
            entry(10.0, "b", 90, "normal", "b90"),
        ])
        m = cross_view_matrix(s, "normal", 1)
        # (0, 0): probes a0, a1, b0 against the same pool minus self;
        # a0 matches a1 (0.3) and a1 matches a0; b0's only candidate
        # after dropping itself has no b -> excluded
        assert m.values[0, 0] == 1.0
        assert m.excluded_probes >= 1

    def test_single_identity_all_defined_cells_one(self):
        s = EmbeddingSet([
            entry(0.0, "a", 0, "normal", "n0"),
            entry(1.0, "a", 90, "normal", "n90"),
            entry(0.4, "a", 0, "bag", "g0"),
            entry(1.4, "a", 90, "bag", "g90"),
        ])
        m = cross_view_matrix(s, "bag", 1)
        assert np.all(m.values == 1.0)

    def test_absent_cells_nan(self):
        m = cross_view_matrix(toy_embedding_set(), "umbrella", 1)
        assert np.all(np.isnan(m.values))
        with pytest.raises(ValueError):
            m.defined_mean()

    def test_needs_two_views(self):
        s = EmbeddingSet([
            entry(0.0, "a", 0, "normal", "x"),
            entry(0.4, "a", 0, "bag", "y"),
        ])
        with pytest.raises(ValueError):
            cross_view_matrix(s, "bag", 1)

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            cross_view_matrix(toy_embedding_set(), "bag", 1, gallery_role="x")


class TestAttributeReport:
    def test_toy_report_values(self):
        rep = attribute_report(toy_embedding_set(), ks=(1, 5))
        assert rep.per_attribute["bag", 1] == 0.75
        assert rep.per_attribute["normal", 1] == 1.0
        assert rep.per_attribute["umbrella", 1] is None
        assert rep.overall_pooled[1] == 0.75
        assert rep.overall_mean[1] == pytest.approx(0.875)
        # a 2-entry gallery fits entirely inside any top-5 shortlist
        assert rep.per_attribute["bag", 5] == 1.0
        assert rep.overall_pooled[5] == 1.0
        assert rep.matrices["bag", 1].defined_mean() == 0.75
        assert rep.matrices[None, 1].defined_mean() == 0.75

    def test_report_mean_consistency(self):
        rep = attribute_report(toy_embedding_set(), ks=(1,))
        defined = [v for (a, k), v in rep.per_attribute.items() if v is not None]
        assert rep.overall_mean[1] == pytest.approx(np.mean(defined))


class TestWriters:
    def test_matrix_csv(self, tmp_path):
        m = EvalMatrix(
            "bag", 1, "normal_gallery", (0, 90),
            np.array([[0.125, np.nan], [1.0, 0.5]]),
        )
        path = tmp_path / "m.csv"
        write_matrix_csv(path, m)
        lines = path.read_text().splitlines()
        assert lines[0] == "view,0,90"
        assert lines[1] == "0,12.50,"
        assert lines[2] == "90,100.00,50.00"

    def test_heatmap_pgm(self, tmp_path):
        m = EvalMatrix(
            "bag", 1, "normal_gallery", (0, 90),
            np.array([[0.0, np.nan], [0.5, 1.0]]),
        )
        path = tmp_path / "m.pgm"
        write_matrix_heatmap(path, m)
        img = read_pgm(path)
        assert img.shape == (2, 2)
        assert img[0, 0] == 0 and img[0, 1] == 0
        assert img[1, 0] == 128 and img[1, 1] == 255

    def test_report_csv_schema(self, tmp_path):
        rep = attribute_report(toy_embedding_set(), ks=(1, 5))
        path = tmp_path / "r.csv"
        write_report_csv(path, rep, header={"split": "2/0", "frames": "all"})
        lines = path.read_text().splitlines()
        assert lines[0] == "# split=2/0"
        assert lines[1] == "# frames=all"
        assert lines[2] == "# gallery_role=normal_gallery"
        assert lines[3].startswith("# absent_probes_excluded=")
        assert lines[4] == (
            "rank,normal,bag,clothing,carrying,umbrella,uniform,"
            "occlusion,night,overall_pooled,overall_mean"
        )
        rank1 = lines[5].split(",")
        assert rank1[0] == "1"
        assert rank1[1] == "100.00" and rank1[2] == "75.00"
        assert rank1[3] == "" and rank1[8] == ""   # absent attributes
        assert rank1[9] == "75.00" and rank1[10] == "87.50"
        assert lines[6].split(",")[0] == "5"


@pytest.fixture(scope="module")
def tiny_eval_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalds")
    records = synth.generate_dataset(
        root, 2, attributes=("normal",), seed=11, views=(0, 90), n_frames=6
    )
    params = encoder.init_params(3, views=("rv",), n_classes=2)
    return root, records, params


class TestExtractEmbeddings:
    def test_shapes_and_metadata(self, tiny_eval_setup):
        root, records, params = tiny_eval_setup
        s = extract_embeddings(params, root, records)
        assert len(s.entries) == 4
        for e, rec in zip(s.entries, records):
            assert e.embedding.shape == (4 * 128,)
            assert e.embedding.dtype == np.float64
            assert e.identity == rec.identity
            assert e.view_deg == rec.view_deg
            assert e.seq_id == record_key(rec)

    def test_deterministic(self, tiny_eval_setup):
        root, records, params = tiny_eval_setup
        a = extract_embeddings(params, root, records, frames_limit=3, seed=1)
        b = extract_embeddings(params, root, records, frames_limit=3, seed=1)
        for ea, eb in zip(a.entries, b.entries):
            assert np.array_equal(ea.embedding, eb.embedding)

    def test_frames_limit_semantics(self, tiny_eval_setup):
        root, records, params = tiny_eval_setup
        cache = {}
        full = extract_embeddings(params, root, records, image_cache=cache)
        capped = extract_embeddings(
            params, root, records, frames_limit=10, image_cache=cache
        )
        one = extract_embeddings(
            params, root, records, frames_limit=1, image_cache=cache
        )
        for ef, ec in zip(full.entries, capped.entries):
            assert np.array_equal(ef.embedding, ec.embedding)
        assert any(
            not np.array_equal(ef.embedding, eo.embedding)
            for ef, eo in zip(full.entries, one.entries)
        )

    def test_matches_single_sequence_path(self, tiny_eval_setup):
        root, records, params = tiny_eval_setup
        cache = {}
        s = extract_embeddings(params, root, records, image_cache=cache)
        rec = records[0]
        frames = encoder.scale_images(cache[record_key(rec), "rv"])
        direct = encoder.embed_sequence(params, {"rv": frames})
        assert np.allclose(
            s.entries[0].embedding, direct.reshape(-1), atol=1e-5
        )

    def test_zero_frame_sequence_skipped(self, tiny_eval_setup):
        root, records, params = tiny_eval_setup
        empty = SequenceRecord("0000", "normal", 9, 0, "near", 0)
        with pytest.warns(UserWarning):
            s = extract_embeddings(params, root, records + [empty])
        assert len(s.entries) == len(records)

    def test_all_empty_rejected(self, tiny_eval_setup):
        root, _, params = tiny_eval_setup
        empty = SequenceRecord("0000", "normal", 9, 0, "near", 0)
        with pytest.warns(UserWarning):
            with pytest.raises(ValueError):
                extract_embeddings(params, root, [empty])

    def test_end_to_end_report(self, tiny_eval_setup):
        root, records, params = tiny_eval_setup
        s = extract_embeddings(params, root, records)
        m = cross_view_matrix(s, "normal", 1)
        assert m.views == (0, 90)
        assert np.isnan(m.values[0, 0]) and np.isnan(m.values[1, 1])
        assert np.isfinite(m.values[0, 1]) and np.isfinite(m.values[1, 0])
