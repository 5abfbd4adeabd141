"""Closed-set identification: embed gallery and query images, match by
cosine nearest neighbor, and report rank-k accuracy and CMC curves.

The face embedding model is pluggable. A deterministic toy embedder keyed to
the toy dataset's identity glyphs supports desk-scale runs; an adapter
around precomputed embedding files (or an external command) plugs in a real
pretrained face network without this package ever shipping its weights.
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .data import GallerySpec, ImageTensor, image_content_hash, save_image
from .errors import EmbedderLookupError, GalleryError


def cosine_distance(a, b):
    """1 - cosine similarity, in [0, 2]; rejects zero vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for zero vectors")
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


@dataclass
class Gallery:
    entries: list  # of (subject_id, embedding)
    spec: GallerySpec

    @property
    def size(self):
        return len(self.entries)

    @property
    def dim(self):
        return len(self.entries[0][1])

    @property
    def subjects(self):
        return {s for s, _ in self.entries}


@dataclass
class RankResult:
    query_subject: str
    sorted_gallery_subjects: list
    rank: int


def build_gallery(embedder, gallery_samples, spec):
    """Embed the visible side of the selected gallery samples."""
    if not gallery_samples:
        raise GalleryError("cannot build an empty gallery")
    entries = []
    dim = None
    for s in gallery_samples:
        emb = np.asarray(embedder.embed(s.visible), dtype=np.float64)
        if dim is None:
            dim = emb.shape
        elif emb.shape != dim:
            raise GalleryError(
                f"embedder returned dimension {emb.shape} for subject {s.subject_id}, "
                f"expected {dim}"
            )
        entries.append((s.subject_id, emb))
    counts = {}
    for subj, _ in entries:
        counts[subj] = counts.get(subj, 0) + 1
    for subj, n in counts.items():
        if n != spec.images_per_subject:
            raise GalleryError(
                f"subject {subj} has {n} gallery entries, protocol {spec.protocol} "
                f"expects {spec.images_per_subject}"
            )
    return Gallery(entries=entries, spec=spec)


def rank_of_query(query_embedding, true_subject, gallery, subject_min=False):
    """Rank of the first correct-subject gallery entry under cosine NN.

    Ties with wrong-subject entries count against the query (pessimistic).
    With subject_min=True, gallery entries of one subject are first collapsed
    to their minimum distance and ranking happens over subjects.
    """
    subjects = [s for s, _ in gallery.entries]
    if true_subject not in subjects:
        raise ValueError(f"subject {true_subject!r} is not in the gallery")
    distances = [cosine_distance(query_embedding, e) for _, e in gallery.entries]

    if subject_min:
        best = {}
        for subj, d in zip(subjects, distances):
            if subj not in best or d < best[subj]:
                best[subj] = d
        items = sorted(best.items(), key=lambda kv: (kv[1], kv[0]))
        d_true = best[true_subject]
        closer = sum(1 for _, d in items if d < d_true)
        tied_wrong = sum(1 for s, d in items if d == d_true and s != true_subject)
        ordered = [s for s, _ in items]
    else:
        order = sorted(range(len(distances)), key=lambda i: (distances[i], i))
        d_true = min(d for s, d in zip(subjects, distances) if s == true_subject)
        closer = sum(1 for d in distances if d < d_true)
        tied_wrong = sum(
            1 for s, d in zip(subjects, distances) if d == d_true and s != true_subject
        )
        ordered = [subjects[i] for i in order]

    return RankResult(
        query_subject=true_subject,
        sorted_gallery_subjects=ordered,
        rank=1 + closer + tied_wrong,
    )


def rank_k_accuracy(queries, gallery, ks, subject_min=False):
    """Fraction of queries whose correct subject appears within rank k."""
    if not queries:
        raise ValueError("empty query set")
    ranks = [
        rank_of_query(emb, subject, gallery, subject_min=subject_min).rank
        for emb, subject in queries
    ]
    return {int(k): sum(r <= k for r in ranks) / len(ranks) for k in ks}


def cmc_curve(queries, gallery, subject_min=False):
    """Cumulative match curve over every rank 1..M."""
    if not queries:
        raise ValueError("empty query set")
    m = len({s for s, _ in gallery.entries}) if subject_min else gallery.size
    ranks = np.array(
        [
            rank_of_query(emb, subject, gallery, subject_min=subject_min).rank
            for emb, subject in queries
        ]
    )
    return np.array([(ranks <= k).mean() for k in range(1, m + 1)])


# ---------------------------------------------------------------------------
# embedders


class ToyEmbedder:
    """Deterministic stand-in for a pretrained face model at desk scale.

    Features: 4x4 spatial grid of per-channel means plus 48-bin per-channel
    histograms, each block L2-normalized, 192 dimensions total. Responds to
    the toy dataset's identity cues (glyph position and color).
    """

    GRID = 4
    BINS = 48

    def __init__(self, resolution):
        self.resolution = int(resolution)
        self.name = "toy-grid-hist"
        self.d = self.GRID * self.GRID * 3 + self.BINS * 3

    def embed(self, image):
        img = image.replicated() if image.channels == 1 else image
        if (img.h, img.w) != (self.resolution, self.resolution):
            raise ValueError(
                f"toy embedder built for {self.resolution}, got {img.h}x{img.w}"
            )
        data = img.data.astype(np.float64)
        g = self.GRID
        cell = self.resolution // g
        grid = data[: g * cell, : g * cell, :].reshape(g, cell, g, cell, 3).mean(axis=(1, 3))
        grid = grid.ravel()
        hists = []
        for c in range(3):
            h, _ = np.histogram(data[:, :, c], bins=self.BINS, range=(-1.0, 1.0))
            hists.append(h.astype(np.float64))
        hist = np.concatenate(hists)

        def unit(v):
            n = np.linalg.norm(v)
            return v / n if n > 0 else v

        return np.concatenate([unit(grid), unit(hist)])


def toy_embedder(resolution):
    return ToyEmbedder(resolution)


class ExternalEmbedder:
    """Embeddings resolved from a precomputed table and/or a command.

    The table is JSON-lines with records {"sha256": ..., "embedding": [...]},
    keyed by the canonical content hash of the 8-bit image (see
    image_content_hash). The optional command is invoked per unknown image
    with a PNG path appended as its last argument and must print the
    embedding as a JSON array on stdout.
    """

    def __init__(self, embedding_file=None, command=None, name=None):
        if embedding_file is None and command is None:
            raise ValueError("need an embedding file, a command, or both")
        self.name = name or "external"
        self.command = command
        self.d = None
        self._table = {}
        if embedding_file is not None:
            with open(embedding_file, encoding="utf-8") as f:
                for line_no, line in enumerate(f, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = json.loads(line)
                        key = rec["sha256"]
                        vec = np.asarray(rec["embedding"], dtype=np.float64)
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise ValueError(
                            f"{embedding_file}:{line_no}: bad embedding record: {exc}"
                        ) from exc
                    if self.d is None:
                        self.d = vec.size
                    elif vec.size != self.d:
                        raise ValueError(
                            f"{embedding_file}:{line_no}: dimension {vec.size} != {self.d}"
                        )
                    self._table[key] = vec

    def _run_command(self, image):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "query.png")
            save_image(image, path)
            proc = subprocess.run(
                list(self.command) + [path], capture_output=True, text=True
            )
        if proc.returncode != 0:
            raise EmbedderLookupError(
                image_content_hash(image),
                f"embedder command failed (exit {proc.returncode}): {proc.stderr.strip()}",
            )
        try:
            vec = np.asarray(json.loads(proc.stdout), dtype=np.float64)
        except (json.JSONDecodeError, ValueError) as exc:
            raise ValueError(f"embedder command produced invalid output: {exc}") from exc
        if vec.ndim != 1:
            raise ValueError("embedder command must print a flat JSON array")
        return vec

    def embed(self, image):
        key = image_content_hash(image)
        if key in self._table:
            return self._table[key]
        if self.command is None:
            raise EmbedderLookupError(key)
        vec = self._run_command(image)
        if self.d is None:
            self.d = vec.size
        elif vec.size != self.d:
            raise ValueError(
                f"embedder command returned dimension {vec.size}, expected {self.d}"
            )
        self._table[key] = vec
        return vec


def external_embedder(embedding_file=None, command=None):
    return ExternalEmbedder(embedding_file=embedding_file, command=command)
