import numpy as np
import pytest

from betasplat import backend
from betasplat.appearance import fibonacci_directions
from betasplat.primitive import Camera, PrimitiveSet, logit


def toy_camera(width=32, height=32, fov=0.9, eye=(0.0, 0.0, -4.0)):
    return Camera.from_lookat(
        eye=eye, target=[0, 0, 0], up=[0, 1, 0], fov_x=fov, width=width, height=height
    )


def random_scene(rng, n, lobes=2, spread=0.8, scale_range=(0.05, 0.35),
                 opacity_range=(0.2, 0.8), lobe_color_scale=0.3):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    axes = fibonacci_directions(lobes)[None] * np.exp(
        rng.uniform(-0.3, 0.8, (n, lobes, 1))
    )
    return PrimitiveSet(
        positions=rng.uniform(-spread, spread, (n, 3)),
        opacity_raw=logit(rng.uniform(*opacity_range, n)),
        rotations=q,
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        shapes=rng.uniform(-1.5, 1.5, n),
        base_colors=rng.uniform(0.0, 1.0, (n, 3)),
        lobe_axes=axes,
        lobe_colors=rng.uniform(-0.2, 1.0, (n, lobes, 3)) * lobe_color_scale,
    )


@pytest.fixture(params=backend.available_backends())
def core(request):
    return backend.get_core(request.param)
