"""Training loops and inference-time transformation.

The adversarial trainer alternates one discriminator update and one
generator update per batch (Adam, batch size 1 by default). The patch
baseline trains a residual encoder-decoder on extracted patch pairs with a
squared-error objective, and the plain baseline is the identity mapping
with no training at all.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import (
    AUGMENT_OPS,
    IdentityEncoding,
    ImageTensor,
    augment,
    encode_identity,
)
from .errors import CheckpointError, TrainingDiverged
from .losses import (
    LossReport,
    LossWeights,
    discriminator_adv_loss,
    generator_adv_loss,
    identity_loss_discriminator,
    identity_loss_generator,
    l1_loss,
    mse_loss,
    tvgan_generator_total,
)
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    NetworkHandle,
    PatchNetSpec,
    batch_to_image,
    build_discriminator,
    build_generator,
    build_patch_transformer,
    generator_forward,
    image_to_batch,
    load_checkpoint,
    save_checkpoint,
)

MODEL_KINDS = ("tvgan", "pix2pix", "patch", "plain")
DEFAULT_EPOCHS = {"tvgan": 65, "pix2pix": 85, "patch": 108}


@dataclass
class TrainConfig:
    model_kind: str = "tvgan"
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    epochs: int | None = None  # default depends on model_kind
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    augmentation: frozenset = frozenset(AUGMENT_OPS)
    checkpoint_every: int = 10
    resolution: int = 256
    gen_depth: int | None = None  # default: log2(resolution), bottleneck 1x1
    gen_base_channels: int = 64
    disc_base_channels: int = 64
    disc_trunk_layers: int = 4
    realness_head: str = "patch"
    patch_size: int = 25
    patch_channels: int = 64
    patch_train_stride: int = 12
    include_fake_identity_term: bool = True

    def __post_init__(self):
        self.augmentation = frozenset(self.augmentation)
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        unknown = self.augmentation - set(AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augment ops: {sorted(unknown)}")

    @property
    def resolved_epochs(self):
        if self.epochs is not None:
            return self.epochs
        return DEFAULT_EPOCHS.get(self.model_kind, 1)

    def generator_spec(self):
        depth = self.gen_depth or int(math.log2(self.resolution))
        return GeneratorSpec(
            resolution=self.resolution, depth=depth, base_channels=self.gen_base_channels
        )

    def discriminator_spec(self, n_identities):
        return DiscriminatorSpec(
            resolution=self.resolution,
            n_identities=n_identities,
            trunk_layers=self.disc_trunk_layers,
            base_channels=self.disc_base_channels,
            realness_head=self.realness_head,
        )

    def patch_spec(self):
        return PatchNetSpec(patch_size=self.patch_size, channels=self.patch_channels)


@dataclass
class TransformModel:
    """A trained (or trivial) thermal-to-visible transformation."""

    kind: str
    handle: NetworkHandle | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "plain" and self.handle is not None:
            raise ValueError("the plain baseline carries no network")
        if self.kind in ("tvgan", "pix2pix") and (
            self.handle is None or self.handle.net_type != "generator"
        ):
            raise ValueError(f"model kind {self.kind} requires a generator handle")
        if self.kind == "patch" and (self.handle is None or self.handle.net_type != "patch"):
            raise ValueError("model kind patch requires a patch network handle")

    @classmethod
    def plain(cls):
        return cls(kind="plain", handle=None)

    @classmethod
    def from_checkpoint(cls, path):
        handle, meta = load_checkpoint(path)
        kind = meta.get("model_kind")
        if kind is None:
            kind = {"generator": "tvgan", "patch": "patch"}.get(handle.net_type)
        if kind not in ("tvgan", "pix2pix", "patch"):
            raise CheckpointError(f"{path}: checkpoint is not a transform network")
        return cls(kind=kind, handle=handle)

    @property
    def resolution(self):
        if self.handle is not None and hasattr(self.handle.spec, "resolution"):
            return self.handle.spec.resolution
        return None


def _finite_or_raise(named_losses, step):
    for term, value in named_losses.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise TrainingDiverged(f"non-finite loss term {term}={v} at step {step}")


def _step_seed(seed, step):
    return (int(seed) * 1_000_003 + int(step)) % 2**31


def _gan_step(G, D, samples, enc, cfg, step_seed, step_label=0):
    """One alternating update on a batch; returns the measured losses."""
    res = cfg.resolution
    xs = torch.cat([image_to_batch(s.thermal, res) for s in samples])
    ys = torch.cat([image_to_batch(s.visible, res) for s in samples])
    use_identity = cfg.model_kind == "tvgan"
    if use_identity:
        one_hots = torch.from_numpy(
            np.stack([encode_identity(s.subject_id, enc) for s in samples])
        )

    gen = torch.Generator().manual_seed(step_seed)
    fake = G.module(xs, dropout_gen=gen)

    opt_d = D.optimizer(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_g = G.optimizer(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    # discriminator first, on the real pair and the detached fake pair
    opt_d.zero_grad(set_to_none=True)
    realness_real, id_real = D.module(xs, ys)
    realness_fake, id_fake = D.module(xs, fake.detach())
    d_adv = discriminator_adv_loss(realness_real, realness_fake)
    if use_identity:
        d_id = identity_loss_discriminator(
            id_real, one_hots, id_fake, cfg.include_fake_identity_term
        )
    else:
        d_id = torch.zeros(())
    total_d = d_adv + d_id
    _finite_or_raise({"d_adv": d_adv, "d_id": d_id}, step_label)
    total_d.backward()
    opt_d.step()

    # generator second, against the updated discriminator
    opt_g.zero_grad(set_to_none=True)
    realness_fake2, id_fake2 = D.module(xs, fake)
    g_adv = generator_adv_loss(realness_fake2)
    l1 = l1_loss(ys, fake)
    g_id = identity_loss_generator(id_fake2, one_hots) if use_identity else torch.zeros(())
    lambda2 = cfg.weights.lambda2 if use_identity else 0.0
    weights = LossWeights(cfg.weights.lambda1, lambda2)
    total_g = tvgan_generator_total(g_adv, l1, g_id, weights)
    _finite_or_raise({"g_adv": g_adv, "l1": l1, "g_id": g_id}, step_label)
    total_g.backward()
    opt_g.step()

    def _f(x):
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    return LossReport(
        d_adv=_f(d_adv),
        g_adv=_f(g_adv),
        l1=_f(l1),
        d_id=_f(d_id),
        g_id=_f(g_id),
        total_g=_f(total_g),
        total_d=_f(total_d),
    )


def train_step_gan(G, D, sample, enc, cfg, step_seed):
    """Single-sample alternating update; the subject must be a training subject."""
    return _gan_step(G, D, [sample], enc, cfg, step_seed)


# ---------------------------------------------------------------------------
# patch extraction


def _as_array(image):
    return image.data if isinstance(image, ImageTensor) else np.asarray(image)


def extract_patches(image, patch_size, stride, cover_edges=False):
    """Cut aligned square patches at a fixed stride; positions returned for
    reassembly. With cover_edges=True extra patches snapped to the far edges
    guarantee full coverage."""
    arr = _as_array(image)
    h, w = arr.shape[:2]
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch size {patch_size} exceeds image {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = list(range(0, h - patch_size + 1, stride))
    cols = list(range(0, w - patch_size + 1, stride))
    if cover_edges:
        if rows[-1] != h - patch_size:
            rows.append(h - patch_size)
        if cols[-1] != w - patch_size:
            cols.append(w - patch_size)
    return [
        ((r, c), np.ascontiguousarray(arr[r : r + patch_size, c : c + patch_size, :]))
        for r in rows
        for c in cols
    ]


def reassemble_patches(patches, h, w):
    """Inverse of extract_patches: average overlapping patches onto an
    h x w canvas; any uncovered pixel is an error."""
    if not patches:
        raise ValueError("no patches to reassemble")
    channels = patches[0][1].shape[2]
    accum = np.zeros((h, w, channels), dtype=np.float64)
    count = np.zeros((h, w, 1), dtype=np.float64)
    for (r, c), patch in patches:
        ph, pw = patch.shape[:2]
        if r < 0 or c < 0 or r + ph > h or c + pw > w:
            raise ValueError(f"patch at ({r}, {c}) size {ph}x{pw} falls outside {h}x{w}")
        accum[r : r + ph, c : c + pw, :] += patch
        count[r : r + ph, c : c + pw, :] += 1.0
    uncovered = np.argwhere(count[:, :, 0] == 0)
    if len(uncovered):
        y, x = uncovered[0]
        raise ValueError(f"coverage gap at pixel ({y}, {x})")
    return ImageTensor((accum / count).astype(np.float32))


# ---------------------------------------------------------------------------
# inference


def transform(model, thermal, stochastic=False, seed=0):
    """Apply a transformation model to one thermal image."""
    if model.kind == "plain":
        return thermal.replicated()
    if model.handle is None:
        raise ValueError(f"model kind {model.kind} has no network attached")
    if model.kind in ("tvgan", "pix2pix"):
        return generator_forward(model.handle, thermal, stochastic=stochastic, seed=seed)
    if model.kind == "patch":
        spec = model.handle.spec
        stride = max(1, spec.patch_size // 2)
        x3 = thermal.replicated()
        patches = extract_patches(x3, spec.patch_size, stride, cover_edges=True)
        stacked = np.stack([p for _, p in patches]).transpose(0, 3, 1, 2)
        with torch.no_grad():
            out = model.handle.module(torch.from_numpy(np.ascontiguousarray(stacked)))
        out = out.numpy().transpose(0, 2, 3, 1)
        rebuilt = reassemble_patches(
            [(pos, out[i]) for i, (pos, _) in enumerate(patches)], x3.h, x3.w
        )
        return ImageTensor(np.clip(rebuilt.data, -1.0, 1.0))
    raise ValueError(f"unknown model kind {model.kind!r}")


# ---------------------------------------------------------------------------
# full training loop


def _config_record(cfg):
    rec = {
        "model_kind": cfg.model_kind,
        "learning_rate": cfg.learning_rate,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "adam_eps": cfg.adam_eps,
        "batch_size": cfg.batch_size,
        "epochs": cfg.resolved_epochs,
        "lambda1": cfg.weights.lambda1,
        "lambda2": cfg.weights.lambda2,
        "seed": cfg.seed,
        "augmentation": sorted(cfg.augmentation),
        "checkpoint_every": cfg.checkpoint_every,
        "resolution": cfg.resolution,
        "gen_depth": cfg.gen_depth,
        "gen_base_channels": cfg.gen_base_channels,
        "disc_base_channels": cfg.disc_base_channels,
        "disc_trunk_layers": cfg.disc_trunk_layers,
        "realness_head": cfg.realness_head,
        "patch_size": cfg.patch_size,
        "patch_channels": cfg.patch_channels,
        "patch_train_stride": cfg.patch_train_stride,
        "include_fake_identity_term": cfg.include_fake_identity_term,
    }
    return rec


def _check_no_leakage(train_samples, split):
    for s in train_samples:
        if s.subject_id in split.test_subjects:
            raise RuntimeError(
                f"training sample of subject {s.subject_id} leaks into the test split"
            )


def _augmented(sample, cfg, seed):
    if not cfg.augmentation:
        return sample
    return augment(sample, cfg.augmentation, seed)


def train(model_kind, dataset, split, cfg, out_dir=None, run_meta=None):
    """Train a transformation model on the training side of a split.

    Returns (TransformModel, history) where history holds one log record per
    step. When out_dir is given, checkpoints, a JSON-lines loss log, and a
    run manifest are written there.
    """
    if model_kind == "plain":
        raise ValueError("nothing to train: the plain baseline is the identity mapping")
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}")
    cfg = replace(cfg, model_kind=model_kind)

    train_samples = [s for s in dataset if s.subject_id in split.train_subjects]
    if not train_samples:
        raise ValueError("training split is empty")
    for s in train_samples:
        if (s.thermal.h, s.thermal.w) != (cfg.resolution, cfg.resolution):
            raise ValueError(
                f"sample {s.source_paths[0]} is {s.thermal.h}x{s.thermal.w}, "
                f"config expects {cfg.resolution}"
            )

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, f"{model_kind}_losses.jsonl"), "w")
    else:
        log_file = None

    def emit(record, history):
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")

    def maybe_checkpoint(handle, epoch, total_epochs):
        if out_dir is None:
            return
        if epoch % cfg.checkpoint_every == 0 or epoch == total_epochs:
            save_checkpoint(
                handle,
                os.path.join(out_dir, f"{model_kind}_epoch{epoch}.ckpt"),
                model_kind=model_kind,
            )

    rng = np.random.default_rng(cfg.seed)
    epochs = cfg.resolved_epochs
    history = []
    try:
        if model_kind in ("tvgan", "pix2pix"):
            enc = IdentityEncoding.from_subjects(s.subject_id for s in train_samples)
            G = build_generator(cfg.generator_spec(), cfg.seed)
            D = build_discriminator(cfg.discriminator_spec(enc.n), cfg.seed + 1)
            step = 0
            for epoch in range(1, epochs + 1):
                _check_no_leakage(train_samples, split)
                order = rng.permutation(len(train_samples))
                for start in range(0, len(order), cfg.batch_size):
                    batch_idx = order[start : start + cfg.batch_size]
                    step += 1
                    seed = _step_seed(cfg.seed, step)
                    batch = [
                        _augmented(train_samples[i], cfg, seed * 31 + k)
                        for k, i in enumerate(batch_idx)
                    ]
                    report = _gan_step(G, D, batch, enc, cfg, seed, step_label=step)
                    emit(report.log_record(step, epoch), history)
                G.assert_finite(f"after epoch {epoch}")
                D.assert_finite(f"after epoch {epoch}")
                maybe_checkpoint(G, epoch, epochs)
            model = TransformModel(kind=model_kind, handle=G)

        else:  # patch baseline
            net = build_patch_transformer(cfg.patch_spec(), cfg.seed)
            opt = net.optimizer(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            step = 0
            for epoch in range(1, epochs + 1):
                _check_no_leakage(train_samples, split)
                order = rng.permutation(len(train_samples))
                for i in order:
                    step += 1
                    seed = _step_seed(cfg.seed, step)
                    sample = _augmented(train_samples[i], cfg, seed)
                    t_patches = extract_patches(
                        sample.thermal.replicated(), cfg.patch_size, cfg.patch_train_stride
                    )
                    v_patches = extract_patches(
                        sample.visible, cfg.patch_size, cfg.patch_train_stride
                    )
                    xs = torch.from_numpy(
                        np.stack([p for _, p in t_patches]).transpose(0, 3, 1, 2).copy()
                    )
                    ys = torch.from_numpy(
                        np.stack([p for _, p in v_patches]).transpose(0, 3, 1, 2).copy()
                    )
                    opt.zero_grad(set_to_none=True)
                    loss = mse_loss(ys, net.module(xs))
                    _finite_or_raise({"mse": loss}, step)
                    loss.backward()
                    opt.step()
                    mse = float(loss.detach())
                    emit({"step": step, "epoch": epoch, "mse": mse, "total_g": mse}, history)
                net.assert_finite(f"after epoch {epoch}")
                maybe_checkpoint(net, epoch, epochs)
            model = TransformModel(kind="patch", handle=net)
    finally:
        if log_file is not None:
            log_file.close()

    if out_dir is not None:
        manifest = {
            "model_kind": model_kind,
            "config": _config_record(cfg),
            "split": {
                "seed": split.seed,
                "train": sorted(split.train_subjects),
                "test": sorted(split.test_subjects),
            },
            "n_train_samples": len(train_samples),
        }
        if run_meta:
            manifest.update(run_meta)
        with open(os.path.join(out_dir, f"{model_kind}_run.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)

    return model, history
