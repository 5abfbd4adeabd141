"""Network construction and inference.

Three architectures: a U-Net translator with skip connections between
mirrored encoder/decoder stages, a multi-task patch discriminator whose
realness and identity heads share one convolutional trunk, and a deep
residual encoder-decoder operating on small patches.

Conventions, mirroring the adopted image-to-image baseline: stride-2 4x4
convolutions, leaky rectifier (slope 0.2) on the encoder/trunk side,
rectifier in the decoder, per-channel (instance) normalization everywhere
except first/last/bottleneck layers, tanh output, and Gaussian(0, 0.02)
weight init. Randomness is supplied via explicit seeds, never global state.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageTensor
from .errors import CheckpointError

CHECKPOINT_FORMAT = "t2vface-checkpoint-v1"
INIT_STD = 0.02
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorSpec:
    resolution: int = 256
    in_channels: int = 3
    out_channels: int = 3
    depth: int = 8
    base_channels: int = 64
    max_channels: int = 512
    dropout_stages: tuple = (1, 2, 3)  # counted from the innermost decoder stage
    dropout_rate: float = 0.5

    def validate(self):
        if self.resolution < 2 or 2**self.depth > self.resolution:
            raise ValueError(
                f"depth {self.depth} needs resolution >= {2**self.depth}, got {self.resolution}"
            )
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        return self

    def channels(self, stage):
        return min(self.base_channels * 2**stage, self.max_channels)


@dataclass(frozen=True)
class DiscriminatorSpec:
    resolution: int = 256
    n_identities: int = 21  # N; the identity head emits N+1 logits
    trunk_layers: int = 4
    base_channels: int = 64
    max_channels: int = 512
    realness_head: str = "patch"  # "patch" score map or single "scalar"

    def validate(self):
        if self.n_identities < 1:
            raise ValueError("need at least one identity class")
        if self.trunk_layers < 1 or 2**self.trunk_layers > self.resolution:
            raise ValueError("trunk too deep for the input resolution")
        if self.realness_head not in ("patch", "scalar"):
            raise ValueError(f"unknown realness head {self.realness_head!r}")
        return self

    def channels(self, stage):
        return min(self.base_channels * 2**stage, self.max_channels)


@dataclass(frozen=True)
class PatchNetSpec:
    patch_size: int = 25
    layers: int = 20
    channels: int = 64
    in_channels: int = 3
    out_channels: int = 3

    def validate(self):
        if self.layers < 2 or self.layers % 2 != 0:
            raise ValueError("layer count must be even and >= 2")
        if self.patch_size < 1 or self.channels < 1:
            raise ValueError("patch_size and channels must be positive")
        return self


_SPEC_TYPES = {
    "generator": GeneratorSpec,
    "discriminator": DiscriminatorSpec,
    "patch": PatchNetSpec,
}


def seeded_dropout(x, rate, generator):
    """Inverted dropout with an explicit RNG; identity when generator is None."""
    if generator is None or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (torch.rand(x.shape, generator=generator, device=x.device) < keep).to(x.dtype)
    return x * mask / keep


class _UNet(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        d = spec.depth
        chs = [spec.channels(i) for i in range(d)]
        self.enc = nn.ModuleList()
        self.enc_norm = nn.ModuleList()
        in_ch = spec.in_channels
        for i in range(d):
            self.enc.append(nn.Conv2d(in_ch, chs[i], 4, stride=2, padding=1))
            # no normalization on the outermost layer or the bottleneck
            self.enc_norm.append(
                nn.InstanceNorm2d(chs[i], affine=True) if 0 < i < d - 1 else nn.Identity()
            )
            in_ch = chs[i]
        self.dec = nn.ModuleList()
        self.dec_norm = nn.ModuleList()
        for j in range(d - 1, 0, -1):
            in_ch = chs[j] if j == d - 1 else 2 * chs[j]
            self.dec.append(nn.ConvTranspose2d(in_ch, chs[j - 1], 4, stride=2, padding=1))
            self.dec_norm.append(nn.InstanceNorm2d(chs[j - 1], affine=True))
        out_in = 2 * chs[0] if d > 1 else chs[0]
        self.out = nn.ConvTranspose2d(out_in, spec.out_channels, 4, stride=2, padding=1)
        # decoder stages carrying dropout, as offsets from the innermost stage
        self.dropout_at = {
            k - 1 for k in spec.dropout_stages if 1 <= k <= max(d - 1, 0)
        }

    def forward(self, x, dropout_gen=None, zero_bottleneck=False, drop_skips=False):
        feats = []
        h = x
        for i, conv in enumerate(self.enc):
            h = conv(h if i == 0 else F.leaky_relu(h, LEAKY_SLOPE))
            h = self.enc_norm[i](h)
            feats.append(h)
        h = feats[-1]
        if zero_bottleneck:
            h = torch.zeros_like(h)
        for k, (deconv, norm) in enumerate(zip(self.dec, self.dec_norm)):
            h = norm(deconv(F.relu(h)))
            if k in self.dropout_at:
                h = seeded_dropout(h, self.spec.dropout_rate, dropout_gen)
            skip = feats[len(self.enc) - 2 - k]
            h = torch.cat([h, torch.zeros_like(skip) if drop_skips else skip], dim=1)
        return torch.tanh(self.out(F.relu(h)))


class _MultiTaskDiscriminator(nn.Module):
    """Shared trunk feeding a realness score map and an identity classifier."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.trunk = nn.ModuleList()
        self.trunk_norm = nn.ModuleList()
        in_ch = 6  # thermal and visible stacked channel-wise
        for i in range(spec.trunk_layers):
            ch = spec.channels(i)
            self.trunk.append(nn.Conv2d(in_ch, ch, 4, stride=2, padding=1))
            self.trunk_norm.append(
                nn.InstanceNorm2d(ch, affine=True) if i > 0 else nn.Identity()
            )
            in_ch = ch
        if spec.realness_head == "patch":
            self.real_head = nn.Conv2d(in_ch, 1, 3, stride=1, padding=1)
        else:
            self.real_head = nn.Linear(in_ch, 1)
        self.id_head = nn.Linear(in_ch, spec.n_identities + 1)

    def forward(self, x, y):
        h = torch.cat([x, y], dim=1)
        for conv, norm in zip(self.trunk, self.trunk_norm):
            h = F.leaky_relu(norm(conv(h)), LEAKY_SLOPE)
        pooled = h.mean(dim=(2, 3))
        if self.spec.realness_head == "patch":
            realness = torch.sigmoid(self.real_head(h))
        else:
            realness = torch.sigmoid(self.real_head(pooled))
        return realness, self.id_head(pooled)


class _PatchResNet(nn.Module):
    """Symmetric conv/deconv stack; the input of encoder layer i is added to
    the output of its mirrored decoder layer."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        half = spec.layers // 2
        self.enc = nn.ModuleList()
        in_ch = spec.in_channels
        for _ in range(half):
            self.enc.append(nn.Conv2d(in_ch, spec.channels, 3, stride=1, padding=1))
            in_ch = spec.channels
        self.dec = nn.ModuleList()
        for j in range(half):
            out_ch = spec.out_channels if j == half - 1 else spec.channels
            self.dec.append(nn.ConvTranspose2d(spec.channels, out_ch, 3, stride=1, padding=1))

    @property
    def skip_count(self):
        return self.spec.layers // 2

    def forward(self, x):
        skips = []  # inputs of encoder layers, outermost first
        h = x
        for conv in self.enc:
            skips.append(h)
            h = F.relu(conv(h))
        for j, deconv in enumerate(self.dec):
            h = deconv(h) + skips[len(skips) - 1 - j]
            if j < len(self.dec) - 1:
                h = F.relu(h)
        return h


class NetworkHandle:
    """A built network plus its spec; the unit that training and
    checkpointing operate on."""

    def __init__(self, module, spec, net_type, seed):
        self.module = module
        self.spec = spec
        self.net_type = net_type
        self.seed = seed
        self._optimizer = None
        self._optimizer_key = None

    @property
    def parameters(self):
        return dict(self.module.named_parameters())

    @property
    def parameter_count(self):
        return sum(p.numel() for p in self.module.parameters())

    def optimizer(self, learning_rate, beta1, beta2, eps):
        """Adam bound to this network; created once and reused across steps."""
        key = (learning_rate, beta1, beta2, eps)
        if self._optimizer is None or self._optimizer_key != key:
            self._optimizer = torch.optim.Adam(
                self.module.parameters(), lr=learning_rate, betas=(beta1, beta2), eps=eps
            )
            self._optimizer_key = key
        return self._optimizer

    def assert_finite(self, context=""):
        for name, p in self.module.named_parameters():
            if not torch.isfinite(p).all():
                raise RuntimeError(f"non-finite parameter {name} {context}".strip())
        return self


def _init_parameters(module, seed):
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                m.bias.zero_()
    return module


def build_generator(spec, seed):
    spec.validate()
    return NetworkHandle(_init_parameters(_UNet(spec), seed), spec, "generator", seed)


def build_discriminator(spec, seed):
    spec.validate()
    return NetworkHandle(
        _init_parameters(_MultiTaskDiscriminator(spec), seed), spec, "discriminator", seed
    )


def build_patch_transformer(spec, seed):
    spec.validate()
    return NetworkHandle(_init_parameters(_PatchResNet(spec), seed), spec, "patch", seed)


# ---------------------------------------------------------------------------
# tensor conversion


def image_to_batch(image, resolution=None, dtype=torch.float32):
    """ImageTensor -> (1, 3, H, W) tensor, replicating a thermal channel."""
    img = image.replicated() if image.channels == 1 else image
    if resolution is not None and (img.h, img.w) != (resolution, resolution):
        raise ValueError(f"expected {resolution}x{resolution} input, got {img.h}x{img.w}")
    arr = np.transpose(img.data, (2, 0, 1))[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def batch_to_image(batch):
    arr = batch.detach().cpu().numpy()[0].transpose(1, 2, 0)
    return ImageTensor(np.clip(arr, -1.0, 1.0))


def generator_forward(handle, image, stochastic=False, seed=0):
    """Run the translator on one image; dropout is active only when
    stochastic=True, seeded for reproducibility."""
    if handle.net_type != "generator":
        raise ValueError(f"expected a generator handle, got {handle.net_type}")
    x = image_to_batch(image, handle.spec.resolution)
    gen = torch.Generator().manual_seed(int(seed)) if stochastic else None
    with torch.no_grad():
        y = handle.module(x, dropout_gen=gen)
    return batch_to_image(y)


def discriminator_forward(handle, x_image, y_image):
    """Score a (thermal, visible) pair: patch realness map and identity logits."""
    if handle.net_type != "discriminator":
        raise ValueError(f"expected a discriminator handle, got {handle.net_type}")
    x = image_to_batch(x_image, handle.spec.resolution)
    y = image_to_batch(y_image, handle.spec.resolution)
    with torch.no_grad():
        realness, id_logits = handle.module(x, y)
    return realness.numpy()[0, 0], id_logits.numpy()[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(handle, path, model_kind=None, extra=None):
    """Archive of named float32 arrays plus the spec as JSON; atomic write."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "net_type": handle.net_type,
        "spec": asdict(handle.spec),
        "seed": handle.seed,
    }
    if model_kind is not None:
        meta["model_kind"] = model_kind
    if extra:
        meta.update(extra)
    arrays = {
        f"param/{name}": p.detach().cpu().numpy().astype("<f4")
        for name, p in handle.module.named_parameters()
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta)), **arrays)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf.getvalue())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path):
    """Rebuild a NetworkHandle from disk; returns (handle, meta)."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            if "__meta__" not in archive:
                raise CheckpointError(f"{path}: missing metadata entry")
            meta = json.loads(str(archive["__meta__"]))
            arrays = {
                k[len("param/") :]: archive[k] for k in archive.files if k.startswith("param/")
            }
    except CheckpointError:
        raise
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
    net_type = meta.get("net_type")
    if net_type not in _SPEC_TYPES:
        raise CheckpointError(f"{path}: unknown net type {net_type!r}")
    spec = _SPEC_TYPES[net_type](**{k: _detuple(v) for k, v in meta["spec"].items()})
    builder = {
        "generator": build_generator,
        "discriminator": build_discriminator,
        "patch": build_patch_transformer,
    }[net_type]
    handle = builder(spec, meta.get("seed", 0))
    state = handle.module.state_dict()
    if set(state) != set(arrays):
        missing = sorted(set(state) - set(arrays))
        surplus = sorted(set(arrays) - set(state))
        raise CheckpointError(
            f"{path}: parameter names do not match spec (missing {missing}, surplus {surplus})"
        )
    for name, arr in arrays.items():
        if tuple(state[name].shape) != arr.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: {arr.shape} vs {tuple(state[name].shape)}"
            )
        state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(state[name].dtype)
    handle.module.load_state_dict(state)
    return handle, meta


def _detuple(v):
    return tuple(v) if isinstance(v, list) else v
