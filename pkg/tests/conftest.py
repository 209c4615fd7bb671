"""
Shared fixtures: small synthetic scenes with protocol-like slopes.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from scripts.config import PROTOCOL
from scripts.poldecomp import PolarisationImage
from scripts.synth import SceneConfig, make_albedo, make_surface, render_stack


def build_scene(size=32, albedo="uniform", channels=1, sigma=0.0, bit_depth=0, seed=0,
                invert=False, lights=None, surface="gaussian-peak", **surface_params):
    """Gaussian peak scaled like the full-size protocol scene (amplitude 20 at 128 px)."""
    shape = (size, size)
    if surface == "gaussian-peak":
        surface_params.setdefault("amplitude", PROTOCOL["amplitude"] * size / PROTOCOL["size"])
        surface_params.setdefault("width", PROTOCOL["width_fraction"] * size)
    surf = make_surface(surface, shape, invert=invert, **surface_params)
    if albedo == "uniform":
        grid = make_albedo("uniform", shape, channels, level=PROTOCOL["uniform_albedo"])
    else:
        grid = make_albedo("checkerboard", shape, channels, low=0.5, high=0.9, size=max(1, size // 8))
    if lights is None:
        lights = [np.array(PROTOCOL["light_s"]), np.array(PROTOCOL["light_t"])]
    cfg = SceneConfig(surface=surf, albedo=grid, lights=lights, noise_sigma=sigma,
                      bit_depth=bit_depth, seed=seed)
    return render_stack(cfg)


def exact_polarisation(stack):
    """Ground-truth polarisation image with light-major channels."""
    n_l, n_c, h, w = stack.i_un.shape
    return PolarisationImage(
        i_un=stack.i_un.reshape(n_l * n_c, h, w),
        rho=stack.rho,
        phi=stack.phi,
        mask=np.ones((h, w), dtype=bool),
    )


@pytest.fixture
def scene_factory():
    return build_scene


@pytest.fixture(scope="session")
def peak_scene():
    """Noiseless 32x32 gaussian peak, one colour, two lights."""
    return build_scene()


@pytest.fixture(scope="session")
def checker_scene():
    """Noiseless 32x32 gaussian peak with checkerboard albedo."""
    return build_scene(albedo="checkerboard")
