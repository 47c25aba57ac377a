"""Untrained-network MRI reconstruction on synthetic multi-coil phantoms.

The package fits a convolutional generator to a single undersampled
measurement (no training data), with total-variation and zero-filled
baselines, holdout-based hyperparameter selection, and full-reference
image quality metrics.
"""

from .autotune import HyperConfig, autotune, default_grid, holdout_split, score_config
from .decoders import (
    DecoderConfig,
    forward,
    init_decoder,
    layer_probe,
    load_params,
    param_count,
    save_params,
)
from .fitting import (
    FitConfig,
    ensemble_reconstruct,
    fit,
    reconstruct,
    reconstruct_full,
)
from .metrics import evaluate, ms_ssim, normalize, psnr, ssim, vif
from .mri import (
    CoilMeasurement,
    Mask,
    SensitivityMaps,
    apply_mask,
    data_consistency,
    fft2c,
    forward_multicoil,
    rss,
    zero_filled,
)
from .phantom import (
    MaskSpec,
    PhantomSpec,
    make_mask,
    make_phantom,
    make_sens_maps,
    read_array,
    simulate,
    write_array,
)
from .tensor import ParamStore, Tensor
from .tv import TVConfig, tv_norm, tv_reconstruct

__version__ = "0.1.0"
