"""Paired thermal/visible dataset handling.

Covers manifest loading, subject-disjoint and attribute splits, gallery
sample selection for the two evaluation protocols, paired training
augmentation, identity one-hot encoding, and a procedural toy dataset small
enough for desk-scale experiments.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DatasetError, GalleryError, PairMismatchError

CANONICAL_RANGE = (-1.0, 1.0)
DEFAULT_RESOLUTION = 256

# attribute tokens the pipeline knows how to act on; unknown tokens are kept
# but trigger a warning at load time
KNOWN_ATTRIBUTES = {"eyeglasses"}

AUGMENT_OPS = ("hflip", "rotate", "crop")
ROTATE_MAX_DEG = 10.0
CROP_MIN_KEEP = 0.875


@dataclass
class ImageTensor:
    """H x W x C float image with an explicit value range."""

    data: np.ndarray
    value_range: tuple = CANONICAL_RANGE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {self.data.shape}")

    @property
    def h(self):
        return self.data.shape[0]

    @property
    def w(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def validate(self):
        lo, hi = self.value_range
        if self.h <= 0 or self.w <= 0:
            raise ValueError("image has empty spatial extent")
        if self.channels not in (1, 3):
            raise ValueError(f"expected 1 or 3 channels, got {self.channels}")
        if not np.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")
        if self.data.min() < lo - 1e-6 or self.data.max() > hi + 1e-6:
            raise ValueError(
                f"pixel values outside declared range [{lo}, {hi}]: "
                f"min={self.data.min():.4f} max={self.data.max():.4f}"
            )
        return self

    def replicated(self):
        """Return a 3-channel view of this image (thermal -> network input)."""
        if self.channels == 3:
            return self
        return ImageTensor(np.repeat(self.data, 3, axis=2), self.value_range)


@dataclass
class PairedSample:
    """One aligned thermal/visible pair with identity and attribute tags."""

    thermal: ImageTensor
    visible: ImageTensor
    subject_id: str
    pose_tag: str = "frontal"
    attributes: frozenset = field(default_factory=frozenset)
    source_paths: tuple = ("", "")

    def __post_init__(self):
        self.attributes = frozenset(self.attributes)
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")
        if (self.thermal.h, self.thermal.w) != (self.visible.h, self.visible.w):
            raise PairMismatchError(
                f"thermal {self.thermal.h}x{self.thermal.w} vs visible "
                f"{self.visible.h}x{self.visible.w} for subject {self.subject_id}"
            )


@dataclass
class DatasetSplit:
    train_subjects: frozenset
    test_subjects: frozenset
    seed: int = 0

    def __post_init__(self):
        self.train_subjects = frozenset(self.train_subjects)
        self.test_subjects = frozenset(self.test_subjects)
        overlap = self.train_subjects & self.test_subjects
        if overlap:
            raise ValueError(f"split is not subject-disjoint: {sorted(overlap)}")


@dataclass
class IdentityEncoding:
    """Maps training subjects to indices 0..N-1; index N is reserved for
    generated images."""

    subject_to_index: dict

    @classmethod
    def from_subjects(cls, subjects):
        ordered = sorted(set(subjects))
        return cls({s: i for i, s in enumerate(ordered)})

    @property
    def n(self):
        return len(self.subject_to_index)

    @property
    def generated_class(self):
        return self.n

    def generated_one_hot(self):
        vec = np.zeros(self.n + 1, dtype=np.float32)
        vec[self.generated_class] = 1.0
        return vec


@dataclass
class GallerySpec:
    protocol: str  # "A" or "B"

    def __post_init__(self):
        if self.protocol not in ("A", "B"):
            raise ValueError(f"unknown protocol {self.protocol!r}")

    @property
    def images_per_subject(self):
        return 1 if self.protocol == "A" else 4

    @property
    def pose_policy(self):
        return "frontal-only" if self.protocol == "A" else "several pose angles"


# ---------------------------------------------------------------------------
# image file I/O


def _decode_image(path, mode, resolution):
    try:
        with Image.open(path) as im:
            raw_size = im.size  # (W, H) before resize
            im = im.convert(mode)
            im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except FileNotFoundError:
        raise DatasetError(f"image file not found: {path}") from None
    except OSError as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageTensor(arr / 127.5 - 1.0), raw_size


def to_uint8(image):
    """Quantize a canonical-range image to 8-bit."""
    lo, hi = image.value_range
    scaled = (image.data - lo) / (hi - lo) * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def save_image(image, path):
    arr = to_uint8(image)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def image_content_hash(image):
    """sha256 over the canonical 8-bit encoding of an image.

    The hash matches what one gets by re-reading a PNG written with
    save_image, so externally computed embedding tables can be keyed off
    exported files.
    """
    arr = to_uint8(image)
    h = hashlib.sha256()
    h.update(f"t2v1:{arr.shape[0]}x{arr.shape[1]}x{arr.shape[2]}:".encode())
    h.update(arr.tobytes(order="C"))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# manifest loading


@dataclass
class ManifestEntry:
    """Metadata view of one manifest row, without decoded pixels."""

    thermal_path: str
    visible_path: str
    subject_id: str
    pose_tag: str
    attributes: frozenset


def load_manifest_entries(manifest_path):
    """Parse manifest metadata only; no image files are touched."""
    try:
        with open(manifest_path, encoding="utf-8") as f:
            rows = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(rows, list):
        raise DatasetError(f"manifest {manifest_path} must be a JSON array")

    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    for i, row in enumerate(rows):
        try:
            entry = ManifestEntry(
                thermal_path=os.path.join(base, row["thermal"]),
                visible_path=os.path.join(base, row["visible"]),
                subject_id=str(row["subject"]),
                pose_tag=str(row.get("pose", "frontal")),
                attributes=frozenset(row.get("attributes", [])),
            )
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"manifest row {i} malformed: {exc}") from exc
        if not entry.subject_id:
            raise DatasetError(f"manifest row {i}: empty subject id")
        for token in sorted(entry.attributes - KNOWN_ATTRIBUTES):
            warnings.warn(f"manifest row {i}: unknown attribute token {token!r}")
        entries.append(entry)
    return entries


def load_paired_dataset(manifest_path, resolution=DEFAULT_RESOLUTION):
    """Load every pair listed in a JSON manifest.

    The manifest is an array of objects with keys "thermal", "visible",
    "subject", "pose" and optional "attributes"; image paths are relative to
    the manifest's directory. Images are resized to `resolution` and
    rescaled to [-1, 1]; thermal images are kept single-channel.
    """
    samples = []
    for i, entry in enumerate(load_manifest_entries(manifest_path)):
        try:
            thermal, thermal_size = _decode_image(entry.thermal_path, "L", resolution)
            visible, visible_size = _decode_image(entry.visible_path, "RGB", resolution)
        except DatasetError as exc:
            raise DatasetError(f"manifest row {i}: {exc}") from None
        if thermal_size != visible_size:
            raise PairMismatchError(
                f"manifest row {i}: thermal {thermal_size} vs visible "
                f"{visible_size} before resize"
            )
        samples.append(
            PairedSample(
                thermal=thermal,
                visible=visible,
                subject_id=entry.subject_id,
                pose_tag=entry.pose_tag,
                attributes=entry.attributes,
                source_paths=(entry.thermal_path, entry.visible_path),
            )
        )
    return samples


def export_dataset(samples, out_dir, manifest_name="manifest.json"):
    """Write samples as PNG pairs plus a manifest; returns the manifest path.

    Useful for materializing the toy dataset so the command-line pipeline can
    run on it end to end.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    counters = {}
    for s in samples:
        k = counters.setdefault(s.subject_id, 0)
        counters[s.subject_id] += 1
        tname = f"{s.subject_id}_{k:03d}_thermal.png"
        vname = f"{s.subject_id}_{k:03d}_visible.png"
        save_image(s.thermal, os.path.join(out_dir, tname))
        save_image(s.visible, os.path.join(out_dir, vname))
        rows.append(
            {
                "thermal": tname,
                "visible": vname,
                "subject": s.subject_id,
                "pose": s.pose_tag,
                "attributes": sorted(s.attributes),
            }
        )
    manifest_path = os.path.join(out_dir, manifest_name)
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=1)
    return manifest_path


def manifest_hash(manifest_path):
    with open(manifest_path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------------------
# splits


def make_subject_disjoint_split(samples, n_test_subjects, seed):
    """Randomly hold out `n_test_subjects` subjects, seeded and reproducible."""
    subjects = sorted({s.subject_id for s in samples})
    if n_test_subjects >= len(subjects):
        raise ValueError(
            f"cannot hold out {n_test_subjects} of {len(subjects)} subjects"
        )
    if n_test_subjects < 0:
        raise ValueError("n_test_subjects must be >= 0")
    rng = np.random.default_rng(seed)
    test = set(rng.choice(subjects, size=n_test_subjects, replace=False).tolist())
    train = set(subjects) - test
    return DatasetSplit(train_subjects=train, test_subjects=test, seed=seed)


def make_attribute_split(samples, attribute):
    """Send every subject carrying `attribute` to the test side."""
    tagged = {s.subject_id for s in samples if attribute in s.attributes}
    all_subjects = {s.subject_id for s in samples}
    if not tagged:
        raise ValueError(f"attribute {attribute!r} matches no subject")
    if tagged == all_subjects:
        raise ValueError(
            f"attribute {attribute!r} matches every subject; training split would be empty"
        )
    return DatasetSplit(train_subjects=all_subjects - tagged, test_subjects=tagged, seed=0)


def save_split(split, path):
    payload = {
        "seed": split.seed,
        "train": sorted(split.train_subjects),
        "test": sorted(split.test_subjects),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def load_split(path):
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        return DatasetSplit(
            train_subjects=payload["train"],
            test_subjects=payload["test"],
            seed=int(payload["seed"]),
        )
    except FileNotFoundError:
        raise DatasetError(f"split file not found: {path}") from None
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DatasetError(f"split file {path} malformed: {exc}") from exc


# ---------------------------------------------------------------------------
# gallery selection


def build_gallery_samples(samples, spec, seed=0):
    """Pick gallery images covering every subject.

    Protocol A takes the first frontal image of each subject; protocol B
    takes four images with distinct pose tags, chosen with a seeded RNG.
    """
    by_subject = {}
    for s in samples:
        by_subject.setdefault(s.subject_id, []).append(s)
    rng = np.random.default_rng(seed)
    chosen = []
    for subject in sorted(by_subject):
        group = sorted(by_subject[subject], key=lambda s: (s.pose_tag, s.source_paths))
        if spec.protocol == "A":
            frontals = [s for s in group if s.pose_tag == "frontal"]
            if not frontals:
                raise GalleryError(f"subject {subject} has no frontal image")
            chosen.append(frontals[0])
        else:
            poses = {}
            for s in group:
                poses.setdefault(s.pose_tag, s)
            if len(poses) < spec.images_per_subject:
                raise GalleryError(
                    f"subject {subject} has only {len(poses)} distinct poses, "
                    f"need {spec.images_per_subject}"
                )
            tags = sorted(poses)
            picked = rng.choice(tags, size=spec.images_per_subject, replace=False)
            chosen.extend(poses[t] for t in sorted(picked.tolist()))
    return chosen


# ---------------------------------------------------------------------------
# identity encoding


def encode_identity(subject_id, enc):
    """One-hot vector of length N+1 for a training subject."""
    if subject_id not in enc.subject_to_index:
        raise ValueError(
            f"subject {subject_id!r} is not in the training encoding; "
            "held-out subjects are never encoded"
        )
    vec = np.zeros(enc.n + 1, dtype=np.float32)
    vec[enc.subject_to_index[subject_id]] = 1.0
    return vec


# ---------------------------------------------------------------------------
# augmentation


def _resize_bilinear(arr, out_h, out_w):
    zoom = (out_h / arr.shape[0], out_w / arr.shape[1], 1.0)
    out = ndimage.zoom(arr, zoom, order=1, mode="nearest", grid_mode=True)
    assert out.shape[:2] == (out_h, out_w)
    return out.astype(np.float32)


def augment(sample, ops, seed):
    """Apply the selected geometric augmentations to both sides of a pair.

    The same parameters are drawn once per call and applied to thermal and
    visible alike so the pair stays aligned. Intended for training data only.
    """
    ops = frozenset(ops)
    unknown = ops - set(AUGMENT_OPS)
    if unknown:
        raise ValueError(f"unknown augment ops: {sorted(unknown)}")
    if not ops:
        return sample

    rng = np.random.default_rng(seed)
    do_flip = "hflip" in ops and rng.random() < 0.5
    angle = rng.uniform(-ROTATE_MAX_DEG, ROTATE_MAX_DEG) if "rotate" in ops else 0.0
    keep = rng.uniform(CROP_MIN_KEEP, 1.0) if "crop" in ops else 1.0
    # offsets drawn once so thermal and visible crop identically
    offsets = (rng.random(), rng.random()) if keep < 1.0 else (0.0, 0.0)

    def apply(arr):
        h, w = arr.shape[:2]
        out = arr
        if do_flip:
            out = out[:, ::-1, :]
        if angle != 0.0:
            out = ndimage.rotate(
                out, angle, axes=(1, 0), reshape=False, order=1, mode="nearest"
            )
        if keep < 1.0:
            ch = max(1, int(round(h * keep)))
            cw = max(1, int(round(w * keep)))
            oy = min(int(offsets[0] * (h - ch + 1)), h - ch) if h > ch else 0
            ox = min(int(offsets[1] * (w - cw + 1)), w - cw) if w > cw else 0
            out = out[oy : oy + ch, ox : ox + cw, :]
            out = _resize_bilinear(out, h, w)
        return np.ascontiguousarray(out, dtype=np.float32)

    return replace(
        sample,
        thermal=ImageTensor(apply(sample.thermal.data), sample.thermal.value_range),
        visible=ImageTensor(apply(sample.visible.data), sample.visible.value_range),
    )


# ---------------------------------------------------------------------------
# toy dataset


def _glyph_colormap(u):
    """Smooth, vivid RGB as a function of a scalar in [0, 1]."""
    r = 0.9 * np.sin(np.pi * u)
    g = 1.8 * u - 0.9
    b = 0.9 * np.cos(np.pi * u)
    return np.array([r, g, b], dtype=np.float32)


def _separated_points(rng, n, low=0.2, high=0.8, min_dist=0.22, tries=400):
    pts = []
    for _ in range(n):
        best, best_d = None, -1.0
        for _ in range(tries):
            cand = rng.uniform(low, high, size=2)
            d = min((np.hypot(*(cand - p)) for p in pts), default=np.inf)
            if d >= min_dist:
                best = cand
                break
            if d > best_d:
                best, best_d = cand, d
        pts.append(best)
    return pts


def synthesize_toy_dataset(n_subjects, n_per_subject, resolution, seed):
    """Procedural paired dataset for desk-scale experiments.

    Each subject is identified by a colored glyph: its image position and
    shape are subject-specific, and its color is a smooth function of the
    glyph's thermal intensity. The thermal side shows the same geometry
    collapsed to one blurred, contrast-remapped channel, so a translator can
    recover subject-specific appearance from thermal cues alone, including
    for subjects it never trained on.
    """
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    if resolution < 64 or (resolution & (resolution - 1)) != 0:
        raise ValueError("resolution must be a power of two >= 64")
    if n_per_subject < 1:
        raise ValueError("need at least 1 sample per subject")

    rng = np.random.default_rng(seed)
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float32)

    centers = _separated_points(rng, n_subjects, low=0.22, high=0.78, min_dist=0.26)
    warm_order = rng.permutation(n_subjects)
    samples = []
    for i in range(n_subjects):
        subject = f"toy{i:02d}"
        cx, cy = centers[i]
        u = warm_order[i] / max(n_subjects - 1, 1)
        glyph_temp = -0.25 + 0.6 * u  # thermal intensity carried by the glyph
        glyph_color = _glyph_colormap(u)
        shape = i % 3  # square / disc / diamond
        radius = r * (0.16 + 0.05 * ((i * 2) % 5) / 4.0)
        glasses = i % 3 == 0

        for j in range(n_per_subject):
            srng = np.random.default_rng(seed * 1_000_003 + i * 1_009 + j)
            if j == 0:
                dx = dy = 0.0
                pose = "frontal"
            else:
                dx, dy = srng.uniform(-0.04 * r, 0.04 * r, size=2)
                pose = f"pose{j:02d}"

            fx, fy = r / 2 + dx, r / 2 + dy
            face = ((xx - fx) / (0.34 * r)) ** 2 + ((yy - fy) / (0.44 * r)) ** 2 <= 1.0
            gx, gy = cx * r + dx, cy * r + dy
            if shape == 0:
                glyph = (np.abs(xx - gx) <= radius) & (np.abs(yy - gy) <= radius)
            elif shape == 1:
                glyph = (xx - gx) ** 2 + (yy - gy) ** 2 <= radius**2
            else:
                glyph = (np.abs(xx - gx) + np.abs(yy - gy)) <= radius * 1.3
            band = face & (np.abs(yy - (fy - 0.12 * r)) <= 0.045 * r) if glasses else None

            ramp = (yy / r).astype(np.float32)
            vis = np.empty((r, r, 3), dtype=np.float32)
            for c, (bg, fc) in enumerate(
                zip((-0.45, -0.55, -0.35), (0.62, 0.22, -0.08))
            ):
                ch = np.full((r, r), bg, dtype=np.float32) + 0.12 * ramp
                ch[face] = fc
                if band is not None:
                    ch[band] = -0.82
                ch[glyph] = glyph_color[c]
                vis[:, :, c] = ch

            th = np.full((r, r), -0.75, dtype=np.float32) + 0.1 * ramp
            th[face] = 0.55
            if band is not None:
                th[band] = -0.55
            th[glyph] = glyph_temp
            th = ndimage.gaussian_filter(th, sigma=r / 64.0)

            vis += srng.normal(0.0, 0.01, size=vis.shape).astype(np.float32)
            th += srng.normal(0.0, 0.02, size=th.shape).astype(np.float32)
            vis = np.clip(vis, -1.0, 1.0)
            th = np.clip(th, -1.0, 1.0)

            samples.append(
                PairedSample(
                    thermal=ImageTensor(th[:, :, None]),
                    visible=ImageTensor(vis),
                    subject_id=subject,
                    pose_tag=pose,
                    attributes=frozenset({"eyeglasses"}) if glasses else frozenset(),
                    source_paths=(f"toy://{subject}/{j}/thermal", f"toy://{subject}/{j}/visible"),
                )
            )
    return samples
