"""Single-image super-resolution with HDR expansion via Retinex decomposition.

The package splits a low-resolution LDR image into illumination and
reflectance, super-resolves the reflectance with a trained network, enhances
the illumination analytically, and recombines the parts into a x2 HDR
irradiance estimate plus a tonemapped preview.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    DecodeError,
    FormatError,
    HdrsrError,
    ParameterError,
    RangeError,
    ShapeError,
    SizeError,
    SolverError,
    StateError,
    TrainingError,
    WriteError,
)
from .image import (
    bicubic_resize,
    decode_rgbe,
    encode_rgbe,
    gamma_map,
    luminance,
    read_hdr_image,
    read_ldr_image,
    rgb_to_ycbcr,
    write_hdr_image,
    write_ldr_image,
    ycbcr_to_rgb,
)
from .nn import Network, gradient_check, mae_loss
from .pipeline import (
    PipelineConfig,
    infer,
    linear_stretch,
    load_pipeline_config,
    reinhard_tonemap,
)
from .refnet import (
    RefNetConfig,
    apply_weights,
    build_discriminator,
    build_refnet,
    config_from_weights,
    load_weights,
    refnet_forward,
    save_weights,
)
from .retinex import (
    DecompositionResult,
    bound_reflectance,
    compute_reflectance,
    decompose,
    enhance_illumination,
    estimate_illumination,
    recombine,
    unbound_reflectance,
)
from .training import (
    PatchStore,
    TrainConfig,
    TrainingReport,
    apply_dihedral,
    invert_dihedral,
    load_patch_store,
    prepare_dataset,
    ragan_discriminator_loss,
    ragan_generator_loss,
    train,
    write_patch_store,
)
from .wls import (
    SparseFivePointSystem,
    WlsParams,
    assemble_system,
    compute_smoothness_weights,
    dense_oracle_solve,
    solve_wls,
)
