"""End-to-end identification evaluation: transform held-out thermal queries,
embed everything, and score rank-k accuracy against a gallery covering all
subjects."""

from __future__ import annotations

from .data import GallerySpec, build_gallery_samples
from .recognition import build_gallery, cmc_curve, rank_k_accuracy
from .training import transform

DEFAULT_KS = (1, 3, 5, 7)


def evaluate_identification(
    dataset,
    split,
    model,
    embedder,
    protocol="A",
    ks=DEFAULT_KS,
    gallery_seed=0,
    subject_min=False,
    split_name=None,
    method=None,
):
    """Score one transformation model on one split.

    The gallery is built from visible images of every subject (train and
    test); queries are the transformed thermal images of test-split samples,
    with no augmentation anywhere. Returns a JSON-ready record.
    """
    ks = sorted(int(k) for k in ks)
    spec = GallerySpec(protocol)
    gallery_samples = build_gallery_samples(dataset, spec, seed=gallery_seed)
    gallery = build_gallery(embedder, gallery_samples, spec)

    test_samples = [s for s in dataset if s.subject_id in split.test_subjects]
    if not test_samples:
        raise ValueError("split has no test samples to use as queries")
    queries = []
    for s in test_samples:
        translated = transform(model, s.thermal)
        queries.append((embedder.embed(translated), s.subject_id))

    accuracies = rank_k_accuracy(queries, gallery, ks, subject_min=subject_min)
    curve = cmc_curve(queries, gallery, subject_min=subject_min)
    return {
        "method": method or model.kind,
        "protocol": protocol,
        "split": split_name or f"seed{split.seed}",
        "ks": ks,
        "accuracies": [[k, accuracies[k]] for k in ks],
        "cmc": [float(v) for v in curve],
        "n_queries": len(queries),
        "n_gallery": gallery.size,
    }
