import numpy as np
import pytest

from geomamba.evaluation import (
    OPT,
    SAR,
    EmbeddingSet,
    ProtocolSpec,
    average_precision,
    dump_ranked_lists,
    evaluate,
    evaluate_all_protocols,
    load_embeddings,
    pairwise_distances,
    random_ranking_map,
    rank_gallery,
    save_embeddings,
)


def random_set(rng, n, n_classes=4, dim=8, role="gallery", id_offset=0):
    return EmbeddingSet(
        rng.standard_normal((n, dim)),
        rng.integers(0, n_classes, size=n),
        np.where(rng.uniform(size=n) < 0.5, OPT, SAR),
        np.array([f"s{id_offset + i:06d}" for i in range(n)]),
        role=role,
    )


def oracle_evaluate(query, gallery, proto, topk=(1, 3, 5)):
    """Definition-level reference: plain loops, no vectorization."""
    aps, hits, excluded = [], {k: [] for k in topk}, 0
    for qi in range(len(query)):
        if proto.query_modality is not None and query.modality[qi] != proto.query_modality:
            continue
        cands = []
        for gi in range(len(gallery)):
            if proto.gallery_modality is not None and gallery.modality[gi] != proto.gallery_modality:
                continue
            if proto.exclude_self and gallery.sample_ids[gi] == query.sample_ids[qi]:
                continue
            d = float(np.sqrt(((query.features[qi] - gallery.features[gi]) ** 2).sum()))
            cands.append((d, str(gallery.sample_ids[gi]), gi))
        cands.sort()
        rel = [1.0 if gallery.labels[gi] == query.labels[qi] else 0.0 for _, _, gi in cands]
        if sum(rel) == 0:
            excluded += 1
            continue
        hit_count, precisions = 0, []
        for pos, r in enumerate(rel, start=1):
            if r:
                hit_count += 1
                precisions.append(hit_count / pos)
        aps.append(sum(precisions) / sum(rel))
        for k in topk:
            hits[k].append(1.0 if sum(rel[:k]) > 0 else 0.0)
    out = {"mAP": float(np.mean(aps)), "excluded_queries": excluded}
    for k in topk:
        out[f"rank{k}"] = float(np.mean(hits[k]))
    return out


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([1, 1, 1]) == 1.0

    def test_interleaved(self):
        assert average_precision([1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-12)

    def test_late_hit(self):
        assert average_precision([0, 0, 1]) == pytest.approx(1 / 3, abs=1e-12)

    def test_no_relevant_raises(self):
        with pytest.raises(ValueError):
            average_precision([0, 0, 0])


class TestRankGallery:
    def test_duplicate_ranked_first(self):
        rng = np.random.default_rng(0)
        g = random_set(rng, 10)
        q_feat = g.features[4].copy()
        order = rank_gallery(q_feat, "query0", g, ProtocolSpec("all_to_all"))
        assert order[0] == 4

    def test_modality_filter(self):
        rng = np.random.default_rng(1)
        g = random_set(rng, 20)
        order = rank_gallery(rng.standard_normal(8), "q", g, ProtocolSpec("opt_to_sar"))
        assert all(g.modality[i] == SAR for i in order)

    def test_self_excluded(self):
        rng = np.random.default_rng(2)
        g = random_set(rng, 10)
        order = rank_gallery(g.features[3], g.sample_ids[3], g, ProtocolSpec("all_to_all"))
        assert 3 not in order

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(3)
        g = random_set(rng, 10)
        q = rng.standard_normal(8)
        order = rank_gallery(q, "q", g, ProtocolSpec("all_to_all"))
        ref = sorted(range(10), key=lambda i: (np.linalg.norm(q - g.features[i]),
                                               str(g.sample_ids[i])))
        assert list(order) == ref


class TestEvaluate:
    def test_one_hot_perfect_rank1(self):
        labels = np.repeat(np.arange(4), 3)
        feats = np.eye(4)[labels]
        modality = np.array([OPT, SAR] * 6)
        q = EmbeddingSet(feats, labels, modality, np.array([f"q{i}" for i in range(12)]))
        g = EmbeddingSet(feats, labels, modality, np.array([f"g{i}" for i in range(12)]))
        out = evaluate(q, g, ProtocolSpec("all_to_all"))
        assert out["rank1"] == 1.0 and out["mAP"] == 1.0

    def test_rank_monotone(self):
        rng = np.random.default_rng(4)
        out = evaluate(random_set(rng, 30, role="query"), random_set(rng, 60, id_offset=1000),
                       ProtocolSpec("all_to_all"))
        assert out["rank1"] <= out["rank3"] <= out["rank5"]

    @pytest.mark.parametrize("proto", ["all_to_all", "opt_to_sar", "sar_to_opt"])
    def test_matches_oracle(self, proto):
        rng = np.random.default_rng(5)
        for trial in range(10):
            q = random_set(rng, 20, role="query", id_offset=trial * 100)
            g = random_set(rng, 50, id_offset=10000 + trial * 100)
            out = evaluate(q, g, ProtocolSpec(proto))
            ref = oracle_evaluate(q, g, ProtocolSpec(proto))
            for key in ("mAP", "rank1", "rank3", "rank5"):
                assert out[key] == pytest.approx(ref[key], abs=1e-12)
            assert out["excluded_queries"] == ref["excluded_queries"]

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(6)
        q = random_set(rng, 15, role="query")
        g = random_set(rng, 40, id_offset=100)
        perm = rng.permutation(40)
        a = evaluate(q, g, ProtocolSpec("all_to_all"))
        b = evaluate(q, g.subset(perm), ProtocolSpec("all_to_all"))
        assert a == b

    def test_scale_invariance(self):
        rng = np.random.default_rng(7)
        q = random_set(rng, 15, role="query")
        g = random_set(rng, 40, id_offset=100)
        q2 = EmbeddingSet(q.features * 3.7, q.labels, q.modality, q.sample_ids)
        g2 = EmbeddingSet(g.features * 3.7, g.labels, g.modality, g.sample_ids)
        a = evaluate(q, g, ProtocolSpec("all_to_all"))
        b = evaluate(q2, g2, ProtocolSpec("all_to_all"))
        for key in ("mAP", "rank1", "rank3", "rank5"):
            assert a[key] == b[key]

    def test_repeat_determinism(self):
        rng = np.random.default_rng(8)
        q = random_set(rng, 10, role="query")
        g = random_set(rng, 30, id_offset=100)
        assert evaluate(q, g, ProtocolSpec("all_to_all")) == evaluate(q, g, ProtocolSpec("all_to_all"))

    def test_metrics_in_unit_interval(self):
        rng = np.random.default_rng(9)
        out = evaluate(random_set(rng, 20, role="query"), random_set(rng, 50, id_offset=100),
                       ProtocolSpec("all_to_all"))
        for key in ("mAP", "rank1", "rank3", "rank5"):
            assert 0.0 <= out[key] <= 1.0


def test_pairwise_blockwise_matches_direct():
    rng = np.random.default_rng(10)
    q, g = rng.standard_normal((7, 5)), rng.standard_normal((13, 5))
    d = pairwise_distances(q, g, block=3)
    ref = np.sqrt(((q[:, None] - g[None]) ** 2).sum(-1))
    np.testing.assert_allclose(d, ref, atol=1e-12)


def test_random_ranking_map_is_class_prior():
    labels = np.repeat(np.arange(4), 5)
    rng = np.random.default_rng(11)
    g = EmbeddingSet(rng.standard_normal((20, 4)), labels,
                     np.array([OPT] * 20), np.array([f"g{i}" for i in range(20)]))
    q = EmbeddingSet(rng.standard_normal((4, 4)), np.arange(4),
                     np.array([OPT] * 4), np.array([f"q{i}" for i in range(4)]), role="query")
    assert random_ranking_map(q, g, ProtocolSpec("all_to_all")) == pytest.approx(0.25)


def test_unknown_protocol():
    with pytest.raises(ValueError):
        ProtocolSpec("weird")


def test_nan_rejected():
    f = np.zeros((2, 3))
    f[0, 0] = np.nan
    with pytest.raises(ValueError):
        EmbeddingSet(f, np.zeros(2), np.array([OPT, SAR]), np.array(["a", "b"]))


def test_embedding_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    es = random_set(rng, 9, role="query")
    save_embeddings(tmp_path / "emb", es)
    back = load_embeddings(tmp_path / "emb")
    np.testing.assert_array_equal(back.features, es.features)
    np.testing.assert_array_equal(back.labels, es.labels)
    assert list(back.modality) == list(es.modality)
    assert list(back.sample_ids) == list(es.sample_ids)
    assert back.role == "query"


def test_ranked_list_dump(tmp_path):
    rng = np.random.default_rng(13)
    q = random_set(rng, 5, role="query")
    g = random_set(rng, 12, id_offset=100)
    path = tmp_path / "ranked.jsonl"
    dump_ranked_lists(path, q, g, ProtocolSpec("all_to_all"), top=4)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 5


def test_evaluate_all_protocols():
    rng = np.random.default_rng(14)
    out = evaluate_all_protocols(random_set(rng, 20, role="query"),
                                 random_set(rng, 40, id_offset=100))
    assert set(out) == {"all_to_all", "opt_to_sar", "sar_to_opt"}
