"""Scale normalization of image gradients across bilinear image pyramids."""

from .channels import ChannelStack, compute_channels, cross_scale_variance, normalized_channel_pyramid
from .errors import (
    DegenerateDataError,
    GradNormError,
    IdentifiabilityError,
    ImageFormatError,
    SchemaError,
)
from .gradient import GradientStats, gradient_magnitude_field, image_gradient_stats
from .imageio import Image, load_image, write_csv
from .normfit import (
    NormalizationModel,
    PowerLawModel,
    ScaleSample,
    collect_samples,
    evaluate_rmse,
    fit_constrained,
    fit_power_law,
    load_model,
    save_model,
)
from .pyramid import Pyramid, ScaleSet, build_pyramid, resample_bilinear, upsample_integer_grid
from .variation import VariationModel, estimate_c, expected_gradient_finite, rho

__version__ = "0.1.0"
