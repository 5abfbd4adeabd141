"""Thermal-to-visible face translation with identity-preserving adversarial
training, plus a gallery/query rank-k identification evaluation harness."""

from .data import (
    DatasetSplit,
    GallerySpec,
    IdentityEncoding,
    ImageTensor,
    PairedSample,
    augment,
    build_gallery_samples,
    encode_identity,
    export_dataset,
    image_content_hash,
    load_paired_dataset,
    load_split,
    make_attribute_split,
    make_subject_disjoint_split,
    save_split,
    synthesize_toy_dataset,
)
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
    build_discriminator,
    build_generator,
    build_patch_transformer,
    discriminator_forward,
    generator_forward,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import evaluate_identification
from .recognition import (
    Gallery,
    RankResult,
    build_gallery,
    cmc_curve,
    cosine_distance,
    external_embedder,
    rank_k_accuracy,
    rank_of_query,
    toy_embedder,
)
from .training import (
    TrainConfig,
    TransformModel,
    extract_patches,
    reassemble_patches,
    train,
    train_step_gan,
    transform,
)

__version__ = "0.1.0"
