"""Report-conditional 3D CT synthesis with a latent rectified-flow model.

The pipeline: volumes are clipped/normalized and resampled (volumes), paired
with report text in a JSONL manifest (dataset), compressed 4x per axis by a
KL autoencoder (codec), and a 3D U-Net (unet) is trained with flow matching
on the scaled latents under classifier-free guidance dropout (diffusion).
Conditioning concatenates three frozen text encoders plus a spacing embedding
(conditioning). Evaluation is plane-wise 2.5D FID, CLIP-style cosine scores
and a phantom alignment oracle (metrics). The ctsynth CLI (cli) binds it all.
"""

from .codec import (
    LATENT_CHANNELS,
    SPATIAL_FACTOR,
    LatentVolume,
    PosteriorParams,
    VolumeCodec,
    load_codec_checkpoint,
    save_codec_checkpoint,
    scale_factor_from_latents,
    scale_latents,
    train_autoencoder,
    unscale_latents,
    vae_loss,
)
from .conditioning import (
    CONTEXT_DIM,
    CONTEXT_ROW_ORDER,
    NUM_CONTEXT_TOKENS,
    ConditioningTensor,
    EncoderSpec,
    RadiologyReport,
    SpacingEmbedding,
    build_conditioning,
    encode_section,
    masked_mean_pool,
    null_conditioning,
    spacing_embedding,
    tokenize,
)
from .config import (
    CodecConfig,
    DataConfig,
    DenoiserConfig,
    DiffusionConfig,
    EvalConfig,
    RunConfig,
    SamplingConfig,
    config_from_dict,
    desk_profile,
    load_config,
)
from .dataset import (
    DatasetManifest,
    ManifestEntry,
    PhantomSpec,
    default_phantom_specs,
    generate_phantom,
    load_manifest,
    save_manifest,
)
from .diffusion import (
    CfgParams,
    RFlowSchedule,
    cfg_combine,
    draw_initial_latent,
    drop_conditioning,
    evaluate_flow_loss,
    flow_matching_loss,
    forward_interpolate,
    load_diffusion_checkpoint,
    make_schedule,
    sample_latent,
    save_diffusion_checkpoint,
    train_latent_diffusion,
    training_step,
    velocity_target,
)
from .errors import (
    ConfigError,
    ContractError,
    CtSynthError,
    DomainError,
    InsufficientSamplesError,
    ManifestError,
    ShapeError,
    TrainingDivergedError,
    ValidationError,
)
from .metrics import (
    AlignmentResult,
    FeatureExtractorSpec,
    FidResult,
    GaussianStats,
    JointEmbedderSpec,
    alignment_accuracy,
    clip_scores,
    cosine_similarity,
    embed_report,
    embed_volume,
    extract_features_2p5d,
    fid_score,
    fit_gaussian,
    frechet_distance,
    phantom_alignment_score,
)
from .unet import ConditionalUNet3D, timestep_embedding
from .volumes import (
    HU_MAX,
    HU_MIN,
    CtVolume,
    Domain,
    Plane,
    clip_and_normalize,
    denormalize_to_hu,
    extract_plane_slices,
    load_volume,
    resample_to_grid,
    save_volume,
)

__version__ = "0.1.0"
