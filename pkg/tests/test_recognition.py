import json
import os
import stat
import sys

import numpy as np
import pytest

from t2vface.data import GallerySpec, ImageTensor, image_content_hash, synthesize_toy_dataset
from t2vface.errors import EmbedderLookupError, GalleryError
from t2vface.recognition import (
    Gallery,
    build_gallery,
    cmc_curve,
    cosine_distance,
    external_embedder,
    rank_k_accuracy,
    rank_of_query,
    toy_embedder,
)


class TestCosineDistance:
    def test_parallel(self):
        v = np.array([3.0, 4.0])
        assert cosine_distance(v, v) == 0.0

    def test_orthogonal(self):
        assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_antiparallel(self):
        assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == 2.0

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            cosine_distance([0.0, 0.0], [1.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_distance([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.normal(size=5)
            b = rng.normal(size=5)
            d1, d2 = cosine_distance(a, b), cosine_distance(b, a)
            assert d1 == d2
            assert 0.0 <= d1 <= 2.0


def gallery_from(entries):
    return Gallery(entries=[(s, np.asarray(e, dtype=np.float64)) for s, e in entries],
                   spec=GallerySpec("A"))


def vector_at_distance(target):
    # unit query (1, 0); cosine similarity equals the x component
    sim = 1.0 - target
    return np.array([sim, np.sqrt(max(0.0, 1.0 - sim * sim))])


class TestRankOfQuery:
    def test_exact_match_rank_one(self):
        g = gallery_from([("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [0.5, 0.5])])
        res = rank_of_query(np.array([1.0, 0.0]), "a", g)
        assert res.rank == 1
        assert res.sorted_gallery_subjects[0] == "a"

    def test_three_subject_example(self):
        g = gallery_from(
            [("A", vector_at_distance(0.4)), ("B", vector_at_distance(0.2)),
             ("C", vector_at_distance(0.9))]
        )
        res = rank_of_query(np.array([1.0, 0.0]), "A", g)
        assert res.rank == 2
        assert res.sorted_gallery_subjects == ["B", "A", "C"]

    def test_pessimistic_tie(self):
        v = np.array([0.8, 0.6])
        g = gallery_from([("true", v), ("wrong", v.copy()), ("far", [-1.0, 0.0])])
        res = rank_of_query(np.array([1.0, 0.0]), "true", g)
        assert res.rank == 2

    def test_absent_subject_rejected(self):
        g = gallery_from([("a", [1.0, 0.0])])
        with pytest.raises(ValueError):
            rank_of_query(np.array([1.0, 0.0]), "zz", g)

    def test_subject_min_variant(self):
        g = Gallery(
            entries=[
                ("a", np.array([0.0, 1.0])),
                ("a", np.array([1.0, 0.0])),
                ("b", np.array([0.9, 0.1])),
            ],
            spec=GallerySpec("B"),
        )
        per_image = rank_of_query(np.array([1.0, 0.0]), "a", g)
        per_subject = rank_of_query(np.array([1.0, 0.0]), "a", g, subject_min=True)
        assert per_image.rank == 1
        assert per_subject.rank == 1
        assert per_subject.sorted_gallery_subjects == ["a", "b"]


def brute_force_rank(query, true_subject, entries):
    """Independent oracle: adversarial sort (wrong subjects first on ties),
    then scan for the first correct entry."""
    dists = []
    for subject, emb in entries:
        a = np.asarray(query, dtype=np.float64)
        b = np.asarray(emb, dtype=np.float64)
        d = 1.0 - (a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        dists.append((d, subject))
    order = sorted(range(len(dists)), key=lambda i: (dists[i][0], dists[i][1] == true_subject))
    for position, i in enumerate(order, start=1):
        if dists[i][1] == true_subject:
            return position
    raise AssertionError("true subject missing")


class TestBruteForceOracle:
    def test_agreement_on_random_instances(self):
        rng = np.random.default_rng(12345)
        for trial in range(1000):
            m = int(rng.integers(2, 21))
            d = int(rng.integers(2, 9))
            n_subjects = int(rng.integers(2, m + 1))
            subjects = [f"s{i}" for i in range(n_subjects)]
            entries = []
            for i in range(m):
                # small-integer embeddings force frequent exact ties
                while True:
                    v = rng.integers(-1, 3, size=d).astype(np.float64)
                    if np.linalg.norm(v) > 0:
                        break
                entries.append((subjects[i % n_subjects], v))
            while True:
                q = rng.integers(-1, 3, size=d).astype(np.float64)
                if np.linalg.norm(q) > 0:
                    break
            true_subject = subjects[int(rng.integers(0, n_subjects))]
            g = Gallery(entries=entries, spec=GallerySpec("A"))
            assert rank_of_query(q, true_subject, g).rank == brute_force_rank(
                q, true_subject, entries
            ), f"disagreement on trial {trial}"

    def test_scale_invariance_with_exact_scalars(self):
        # power-of-two scaling is exact in floating point, so even tied
        # orderings must be bit-identical
        rng = np.random.default_rng(99)
        scalars = [0.25, 0.5, 2.0, 8.0]
        for trial in range(100):
            m = int(rng.integers(2, 15))
            d = int(rng.integers(2, 9))
            entries = [(f"s{i}", rng.normal(size=d)) for i in range(m)]
            q = rng.normal(size=d)
            g = Gallery(entries=entries, spec=GallerySpec("A"))
            true_subject = entries[int(rng.integers(0, m))][0]
            base = rank_of_query(q, true_subject, g)
            k = int(rng.integers(0, m))
            scaled_entries = [
                (s, e * scalars[trial % 4] if i == k else e)
                for i, (s, e) in enumerate(entries)
            ]
            g2 = Gallery(entries=scaled_entries, spec=GallerySpec("A"))
            scaled = rank_of_query(q, true_subject, g2)
            assert scaled.rank == base.rank
            assert scaled.sorted_gallery_subjects == base.sorted_gallery_subjects


class TestRankKAndCmc:
    def _staircase_gallery(self, m):
        # subjects s1..sm at strictly increasing distance from (1, 0)
        entries = [
            (f"s{i}", vector_at_distance(0.05 + 0.9 * (i - 1) / (m - 1)))
            for i in range(1, m + 1)
        ]
        return Gallery(entries=entries, spec=GallerySpec("A"))

    def test_hand_counted_accuracies(self):
        g = self._staircase_gallery(12)
        q = np.array([1.0, 0.0])
        queries = [(q, "s1"), (q, "s2"), (q, "s5"), (q, "s9")]  # ranks 1, 2, 5, 9
        acc = rank_k_accuracy(queries, g, [1, 3, 5, 7])
        assert acc == {1: 0.25, 3: 0.5, 5: 0.75, 7: 0.75}

    def test_perfect_case(self):
        g = self._staircase_gallery(5)
        queries = [(g.entries[0][1], "s1")]
        acc = rank_k_accuracy(queries, g, [1, 3, 5])
        assert acc == {1: 1.0, 3: 1.0, 5: 1.0}

    def test_k_equals_gallery_size(self):
        g = self._staircase_gallery(6)
        q = np.array([1.0, 0.0])
        queries = [(q, f"s{i}") for i in range(1, 7)]
        assert rank_k_accuracy(queries, g, [6])[6] == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(3)
        entries = [(f"s{i}", rng.normal(size=4)) for i in range(10)]
        g = Gallery(entries=entries, spec=GallerySpec("A"))
        queries = [(rng.normal(size=4), f"s{int(rng.integers(0, 10))}") for _ in range(20)]
        acc = rank_k_accuracy(queries, g, [1, 3, 5, 7])
        assert acc[1] <= acc[3] <= acc[5] <= acc[7]

    def test_empty_queries_rejected(self):
        g = self._staircase_gallery(3)
        with pytest.raises(ValueError):
            rank_k_accuracy([], g, [1])
        with pytest.raises(ValueError):
            cmc_curve([], g)

    def test_cmc_step_function(self):
        g = self._staircase_gallery(5)
        q = np.array([1.0, 0.0])
        curve = cmc_curve([(q, "s3")], g)
        assert curve.tolist() == [0.0, 0.0, 1.0, 1.0, 1.0]

    def test_cmc_monotone_terminal_one(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = int(rng.integers(2, 12))
            entries = [(f"s{i}", rng.normal(size=3)) for i in range(m)]
            g = Gallery(entries=entries, spec=GallerySpec("A"))
            queries = [
                (rng.normal(size=3), f"s{int(rng.integers(0, m))}") for _ in range(5)
            ]
            curve = cmc_curve(queries, g)
            assert len(curve) == m
            assert np.all(np.diff(curve) >= 0)
            assert curve[-1] == 1.0

    def test_split_averaging_matches_elementwise_mean(self):
        curves = np.array([[0.2, 0.6, 1.0], [0.4, 0.8, 1.0], [0.3, 0.7, 1.0]])
        assert np.allclose(curves.mean(axis=0), [0.3, 0.7, 1.0])


class TestGalleryBuilding:
    def test_protocol_counts(self, toy_samples):
        from t2vface.data import build_gallery_samples

        emb = toy_embedder(64)
        spec = GallerySpec("A")
        gallery = build_gallery(emb, build_gallery_samples(toy_samples, spec, 0), spec)
        assert gallery.size == 4
        assert gallery.dim == 192
        spec_b = GallerySpec("B")
        gallery_b = build_gallery(emb, build_gallery_samples(toy_samples, spec_b, 0), spec_b)
        assert gallery_b.size == 16

    def test_empty_gallery_rejected(self):
        with pytest.raises(GalleryError):
            build_gallery(toy_embedder(64), [], GallerySpec("A"))

    def test_dimension_consistency_enforced(self, toy_samples):
        class BrokenEmbedder:
            def __init__(self):
                self.calls = 0

            def embed(self, image):
                self.calls += 1
                return np.ones(4 if self.calls == 1 else 5)

        from t2vface.data import build_gallery_samples

        samples = build_gallery_samples(toy_samples, GallerySpec("A"), 0)
        with pytest.raises(GalleryError):
            build_gallery(BrokenEmbedder(), samples, GallerySpec("A"))


class TestToyEmbedder:
    def test_deterministic(self, toy_samples):
        emb = toy_embedder(64)
        a = emb.embed(toy_samples[0].visible)
        b = emb.embed(toy_samples[0].visible)
        assert np.array_equal(a, b)
        assert a.shape == (192,)

    def test_self_query_rank_one(self, toy_samples):
        from t2vface.data import build_gallery_samples

        emb = toy_embedder(64)
        spec = GallerySpec("A")
        gallery_samples = build_gallery_samples(toy_samples, spec, 0)
        gallery = build_gallery(emb, gallery_samples, spec)
        for s in gallery_samples:
            res = rank_of_query(emb.embed(s.visible), s.subject_id, gallery)
            assert res.rank == 1

    def test_ground_truth_visible_queries_identify_well(self):
        samples = synthesize_toy_dataset(8, 10, 64, seed=17)
        from t2vface.data import build_gallery_samples

        emb = toy_embedder(64)
        spec = GallerySpec("A")
        gallery = build_gallery(emb, build_gallery_samples(samples, spec, 0), spec)
        queries = [(emb.embed(s.visible), s.subject_id) for s in samples]
        assert rank_k_accuracy(queries, gallery, [1])[1] >= 0.9

    def test_resolution_check(self, toy_samples):
        emb = toy_embedder(128)
        with pytest.raises(ValueError):
            emb.embed(toy_samples[0].visible)


class TestExternalEmbedder:
    def _image(self, seed):
        rng = np.random.default_rng(seed)
        return ImageTensor(rng.uniform(-1, 1, (8, 8, 3)).astype("float32"))

    def test_file_lookup(self, tmp_path):
        images = [self._image(i) for i in range(3)]
        table = tmp_path / "emb.jsonl"
        with open(table, "w") as f:
            for i, img in enumerate(images):
                rec = {"sha256": image_content_hash(img), "embedding": [float(i), 1.0, 0.0]}
                f.write(json.dumps(rec) + "\n")
        emb = external_embedder(embedding_file=str(table))
        assert emb.d == 3
        assert emb.embed(images[1]).tolist() == [1.0, 1.0, 0.0]

    def test_unknown_image_without_command(self, tmp_path):
        table = tmp_path / "emb.jsonl"
        img = self._image(0)
        table.write_text(
            json.dumps({"sha256": image_content_hash(img), "embedding": [1.0, 0.0]}) + "\n"
        )
        emb = external_embedder(embedding_file=str(table))
        other = self._image(5)
        with pytest.raises(EmbedderLookupError) as err:
            emb.embed(other)
        assert image_content_hash(other) in str(err.value)

    def _write_endpoint(self, tmp_path, dims):
        script = tmp_path / "endpoint.py"
        script.write_text(
            "import sys, json\n"
            "from PIL import Image\n"
            "import numpy as np\n"
            "arr = np.asarray(Image.open(sys.argv[-1]).convert('RGB'), dtype=float)\n"
            f"print(json.dumps([float(arr.mean())] * {dims}))\n"
        )
        return [sys.executable, str(script)]

    def test_command_endpoint_round_trip(self, tmp_path):
        cmd = self._write_endpoint(tmp_path, 4)
        emb = external_embedder(command=cmd)
        img = self._image(1)
        vec = emb.embed(img)
        assert vec.shape == (4,)
        assert np.array_equal(vec, emb.embed(img))  # cached, stable

    def test_command_wrong_dimension(self, tmp_path):
        img = self._image(0)
        table = tmp_path / "emb.jsonl"
        table.write_text(
            json.dumps({"sha256": image_content_hash(img), "embedding": [1.0, 0.0, 0.5]}) + "\n"
        )
        cmd = self._write_endpoint(tmp_path, 5)
        emb = external_embedder(embedding_file=str(table), command=cmd)
        with pytest.raises(ValueError, match="dimension"):
            emb.embed(self._image(9))

    def test_failing_command(self, tmp_path):
        script = tmp_path / "bad.py"
        script.write_text("import sys; sys.exit(3)\n")
        emb = external_embedder(command=[sys.executable, str(script)])
        with pytest.raises(EmbedderLookupError, match="exit 3"):
            emb.embed(self._image(2))

    def test_needs_file_or_command(self):
        with pytest.raises(ValueError):
            external_embedder()

    def test_malformed_table(self, tmp_path):
        table = tmp_path / "emb.jsonl"
        table.write_text('{"sha256": "abc"}\n')
        with pytest.raises(ValueError):
            external_embedder(embedding_file=str(table))
