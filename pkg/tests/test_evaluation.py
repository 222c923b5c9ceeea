import math

import numpy as np
import pytest
import torch

from bridgereid import (Modality, ShotMode, cmc, mean_average_precision, mmd,
                        pairwise_distances, build_protocol)
from bridgereid.evaluation import (ProtocolError, evaluate_retrieval,
                                   median_bandwidth)

from helpers import oracle_cmc, oracle_map, oracle_mmd


class TestPairwiseDistances:
    def test_identical_unit_vectors(self):
        q = np.array([[1.0, 0.0]])
        assert pairwise_distances(q, q)[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[0.0, 1.0]])
        assert pairwise_distances(q, g)[0, 0] == pytest.approx(1.0)

    def test_antipodal(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[-1.0, 0.0]])
        assert pairwise_distances(q, g)[0, 0] == pytest.approx(2.0)

    def test_normalizes_inputs(self):
        q = np.array([[10.0, 0.0]])
        g = np.array([[0.5, 0.0]])
        assert pairwise_distances(q, g)[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            pairwise_distances(np.zeros((1, 4)), np.ones((2, 4)))

    def test_entries_in_range(self):
        rng = np.random.default_rng(0)
        d = pairwise_distances(rng.normal(size=(5, 8)),
                               rng.normal(size=(7, 8)))
        assert d.min() >= 0.0 and d.max() <= 2.0


class TestCmc:
    def test_single_query_perfect(self):
        dist = np.array([[0.1, 0.5, 0.9]])
        curve = cmc(dist, np.array([7]), np.array([7, 1, 2]), 3)
        assert curve[0] == 1.0

    def test_two_queries_hand_ranked(self):
        # query 0 matches at rank 1; query 1 matches at rank 3
        dist = np.array([
            [0.1, 0.4, 0.6, 0.8],
            [0.5, 0.2, 0.3, 0.4],
        ])
        q_ids = np.array([0, 1])
        g_ids = np.array([0, 2, 3, 1])
        curve = cmc(dist, q_ids, g_ids, 4)
        assert np.allclose(curve, [0.5, 0.5, 1.0, 1.0])

    def test_worst_case_rank1_zero(self):
        dist = np.array([[0.9, 0.1, 0.2]])
        curve = cmc(dist, np.array([5]), np.array([5, 1, 2]), 3)
        assert curve[0] == 0.0
        assert curve[2] == 1.0

    def test_monotone_and_reaches_one(self):
        rng = np.random.default_rng(3)
        g_ids = np.array([0, 0, 1, 1, 2, 2])
        dist = rng.random((4, 6))
        curve = cmc(dist, np.array([0, 1, 2, 0]), g_ids, 6)
        assert (np.diff(curve) >= -1e-12).all()
        assert curve[-1] == 1.0

    def test_missing_identity_named(self):
        dist = np.zeros((1, 2))
        with pytest.raises(ProtocolError, match="9"):
            cmc(dist, np.array([9]), np.array([1, 2]), 2)

    def test_same_camera_filtering(self):
        # the only same-id gallery entry shares the query's camera: filtered
        dist = np.array([[0.1, 0.2]])
        with pytest.raises(ProtocolError):
            cmc(dist, np.array([0]), np.array([0, 1]), 2,
                q_cams=np.array([0]), g_cams=np.array([0, 1]))
        # different camera: kept
        curve = cmc(dist, np.array([0]), np.array([0, 1]), 2,
                    q_cams=np.array([0]), g_cams=np.array([1, 1]))
        assert curve[0] == 1.0


class TestMeanAveragePrecision:
    def test_perfect_retrieval(self):
        dist = np.array([[0.1, 0.2, 0.8, 0.9]])
        ap = mean_average_precision(dist, np.array([0]),
                                    np.array([0, 0, 1, 2]))
        assert ap == pytest.approx(1.0)

    def test_two_relevant_ranks_1_and_3(self):
        dist = np.array([[0.1, 0.2, 0.3, 0.4]])
        g_ids = np.array([0, 1, 0, 2])
        ap = mean_average_precision(dist, np.array([0]), g_ids)
        assert ap == pytest.approx(5.0 / 6.0)

    def test_single_relevant_ranked_last(self):
        dist = np.array([[0.1, 0.2, 0.3, 0.4]])
        g_ids = np.array([1, 2, 3, 0])
        ap = mean_average_precision(dist, np.array([0]), g_ids)
        assert ap == pytest.approx(0.25)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(1)
        g_ids = np.array([0, 1, 2, 0, 1, 2])
        ap = mean_average_precision(rng.random((5, 6)),
                                    np.array([0, 1, 2, 1, 0]), g_ids)
        assert 0.0 <= ap <= 1.0


class TestMetricOracleProperties:
    def test_random_micro_protocols_match_brute_force(self):
        rng = np.random.default_rng(42)
        for trial in range(120):
            nq = int(rng.integers(1, 5))
            ng = int(rng.integers(2, 7))
            g_ids = rng.integers(0, 3, size=ng)
            # ensure every query id is present in the gallery
            q_ids = rng.choice(g_ids, size=nq)
            dist = rng.random((nq, ng))
            curve = cmc(dist, q_ids, g_ids, ng)
            want_curve = oracle_cmc(dist, q_ids, g_ids, ng)
            assert np.allclose(curve, want_curve), f"trial {trial}"
            got = mean_average_precision(dist, q_ids, g_ids)
            assert got == pytest.approx(oracle_map(dist, q_ids, g_ids),
                                        abs=1e-12), f"trial {trial}"

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(5)
        g_ids = np.array([0, 1, 2, 0, 1, 2])
        q_ids = np.array([0, 1, 2])
        dist = rng.random((3, 6))
        base_curve = cmc(dist, q_ids, g_ids, 6)
        base_map = mean_average_precision(dist, q_ids, g_ids)
        for _ in range(5):
            perm = rng.permutation(6)
            curve = cmc(dist[:, perm], q_ids, g_ids[perm], 6)
            m = mean_average_precision(dist[:, perm], q_ids, g_ids[perm])
            assert np.allclose(curve, base_curve)
            assert m == pytest.approx(base_map, abs=1e-12)


class TestMmd:
    def test_identical_multisets_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 4))
        assert abs(mmd(x, x.copy(), bandwidth=1.0)) < 1e-9
        assert abs(mmd(x, x.copy())) < 1e-9  # median heuristic path

    def test_three_point_sets_match_double_loop(self):
        a = np.array([[0.0], [1.0], [2.0]])
        b = np.array([[0.5], [1.5], [4.0]])
        got = mmd(a, b, bandwidth=1.0)
        want = oracle_mmd(a, b, 1.0)
        assert got == pytest.approx(want, abs=1e-15)

    def test_matches_oracle_up_to_20(self):
        rng = np.random.default_rng(9)
        for m, n in ((5, 5), (20, 20), (7, 13), (20, 4)):
            a = rng.normal(size=(m, 3))
            b = rng.normal(size=(n, 3)) + 0.5
            got = mmd(a, b, bandwidth=0.8)
            want = oracle_mmd(a, b, 0.8)
            assert got == pytest.approx(want, rel=1e-12), (m, n)

    def test_far_separated_gaussians(self):
        rng = np.random.default_rng(2)
        a = rng.normal(-10.0, 0.01, size=(30, 2))
        b = rng.normal(10.0, 0.01, size=(30, 2))
        est = mmd(a, b, bandwidth=1.0)
        gamma = 1.0 / 2.0
        cross = np.exp(-gamma * ((a[:, None, :] - b[None, :, :]) ** 2)
                       .sum(-1)).mean()
        assert est == pytest.approx(2.0 * (1.0 - cross), abs=1e-3)
        assert est == pytest.approx(2.0, abs=1e-3)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(8, 3))
        b = rng.normal(size=(8, 3)) + 1.0
        assert mmd(a, b, bandwidth=0.7) == mmd(b, a, bandwidth=0.7)
        c = rng.normal(size=(5, 3))
        assert mmd(a, c, bandwidth=0.7) == mmd(c, a, bandwidth=0.7)
        assert mmd(a, b) == mmd(b, a)

    def test_small_sets_rejected(self):
        with pytest.raises(ValueError):
            mmd(np.zeros((1, 2)), np.zeros((5, 2)))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mmd(np.zeros((4, 2)), np.zeros((4, 3)))

    def test_median_bandwidth_positive(self):
        rng = np.random.default_rng(1)
        bw = median_bandwidth(rng.normal(size=(5, 2)),
                              rng.normal(size=(6, 2)))
        assert bw > 0


class TestProtocols:
    def test_single_shot_gallery_size(self, toy_query, toy_gallery):
        proto = build_protocol(toy_query, toy_gallery, ShotMode.SINGLE, seed=0)
        assert len(proto.gallery_indices) == toy_gallery.num_identities
        assert len(set(proto.gallery_ids.tolist())) == \
            toy_gallery.num_identities

    def test_multi_shot_caps_at_ten(self, toy_query, toy_gallery):
        proto = build_protocol(toy_query, toy_gallery, ShotMode.MULTI, seed=0)
        # 3 per identity available, under the cap of 10
        assert len(proto.gallery_indices) == 3 * toy_gallery.num_identities

    def test_deterministic_given_seed(self, toy_query, toy_gallery):
        a = build_protocol(toy_query, toy_gallery, ShotMode.SINGLE, seed=4)
        b = build_protocol(toy_query, toy_gallery, ShotMode.SINGLE, seed=4)
        assert np.array_equal(a.gallery_indices, b.gallery_indices)
        assert np.array_equal(a.query_indices, b.query_indices)

    def test_cross_modal_sides(self, toy_query, toy_gallery):
        proto = build_protocol(toy_query, toy_gallery, ShotMode.SINGLE, seed=0)
        assert all(toy_query.samples[i].modality is Modality.INFRARED
                   for i in proto.query_indices)
        assert all(toy_gallery.samples[i].modality is Modality.VISIBLE
                   for i in proto.gallery_indices)

    def test_missing_gallery_identity(self, toy_query, toy_gallery):
        crippled = type(toy_gallery)(
            [s for s in toy_gallery.samples
             if not (s.identity == 0 and s.modality is Modality.VISIBLE)],
            toy_gallery.num_identities, toy_gallery.split)
        with pytest.raises(ProtocolError, match="0"):
            build_protocol(toy_query, crippled, ShotMode.SINGLE, seed=0)


class TestRetrievalReport:
    def test_schema_and_ranges(self, toy_query, toy_gallery):
        from bridgereid import Embedder, EmbeddingConfig, TrainConfig
        cfg = TrainConfig(b=2, p=2, steps=1, seed=0, img_h=32, img_w=16,
                          feature_dim=16, stem_channels=4, trunk_channels=8)
        emb = Embedder(EmbeddingConfig(
            feature_dim=16, stem_channels=4, trunk_channels=8,
            num_identities=8))
        report = evaluate_retrieval(emb, toy_query, toy_gallery, cfg,
                                    ShotMode.SINGLE, seed=0)
        for key in ("r1", "r5", "r10", "r20", "map", "protocol", "seed"):
            assert key in report
        assert 0.0 <= report["map"] <= 1.0
        assert 0.0 <= report["r1"] <= report["r20"] <= 1.0


class TestBridgingReport:
    def test_schema(self, toy_query):
        from bridgereid import (Embedder, EmbeddingConfig, Generator,
                                GeneratorConfig, TrainConfig)
        cfg = TrainConfig(b=2, p=2, steps=1, seed=0, img_h=32, img_w=16,
                          feature_dim=16, stem_channels=4, trunk_channels=8,
                          gen_channels=8)
        from bridgereid.evaluation import bridging_report
        emb = Embedder(EmbeddingConfig(
            feature_dim=16, stem_channels=4, trunk_channels=8,
            num_identities=8))
        gen = Generator(GeneratorConfig(8))
        report = bridging_report(emb, gen, toy_query, cfg, seed=0)
        for key in ("mmd_vi", "mmd_vz", "mmd_iz", "bridges_v", "bridges_i"):
            assert key in report
        assert np.isfinite(report["mmd_vi"])

    def test_copy_generator_bridges_visible_trivially(self, toy_query):
        from bridgereid import Embedder, EmbeddingConfig, TrainConfig
        from bridgereid.evaluation import bridging_report

        class CopyGenerator:
            """Pretends to translate but returns the visible input."""

            def eval(self):
                pass

            def train(self):
                pass

            def intermediate(self, visible, infrared, detach_style=True):
                return visible

        cfg = TrainConfig(b=2, p=2, steps=1, seed=0, img_h=32, img_w=16,
                          feature_dim=16, stem_channels=4, trunk_channels=8)
        emb = Embedder(EmbeddingConfig(
            feature_dim=16, stem_channels=4, trunk_channels=8,
            num_identities=8, tie_intermediate_stem=True))
        report = bridging_report(emb, CopyGenerator(), toy_query, cfg, seed=0)
        assert report["mmd_vz"] == pytest.approx(0.0, abs=1e-9)
        assert report["bridges_v"]
