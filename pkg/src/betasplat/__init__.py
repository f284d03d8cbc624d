"""betasplat: CPU radiance-field splatting with deformable bounded Beta kernels."""

__version__ = "0.1.0"

from .appearance import SbAppearance, ShAppearance, sb_eval, sh_eval  # noqa: F401
from .kernel import beta_eval, beta_grad, gaussian_reference  # noqa: F401
from .primitive import BetaPrimitive, Camera, PrimitiveSet  # noqa: F401
from .rasterizer import (  # noqa: F401
    GradientBuffer,
    RenderOutput,
    render_backward,
    render_masked,
    render_reference,
    render_tiled,
)
from .training import TrainConfig, psnr, ssim, train  # noqa: F401
