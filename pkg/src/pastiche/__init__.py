"""pastiche: paste a subject into a scene, then inpaint and harmonize it.

A desk-scale, end-to-end exemplar-driven image editing stack: pixel-space
paste tools, a self-supervised dataset builder, a small denoising U-Net with
text conditioning, an encoder-copy guidance module injected through
zero-initialized projections, training loops, samplers, evaluation metrics,
a CLI, and an HTTP editing service.
"""

from .imaging import (
    AlphaMatte,
    BBox,
    BinaryMask,
    Composite,
    Exemplar,
    RasterImage,
    extract_subject,
    fit_resize,
    make_mask,
    paste,
    threshold_matte,
)
from .datasetgen import (
    AugmentationConfig,
    DatasetManifest,
    TrainingSample,
    augment_subject,
    build_sample,
    build_synthetic_corpus,
    caption_for,
    irregularize_mask,
    materialize_training_set,
)
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    linear_schedule,
    q_sample,
    reverse_step,
    sample,
    sample_edit,
)
from .backbone import (
    BackboneParams,
    TextCondition,
    UNetSpec,
    encode_text,
    freeze,
    init_backbone,
    load_backbone,
    pretrain_backbone,
    save_backbone,
)
from .harmonizer import (
    ConditionFeatures,
    HarmonizerParams,
    InjectionGates,
    encode_condition,
    init_from_backbone,
    load_harmonizer,
    save_harmonizer,
    set_disconnect,
)
from .training import (
    LossRecord,
    TrainConfig,
    cfg_dropout,
    gradient_check,
    phd_loss,
    train_harmonizer,
)

__version__ = "0.1.0"
