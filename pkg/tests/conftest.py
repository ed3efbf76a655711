import pytest
import sys
import os

import torch

# Add parent directory to path so the toolkit modules can be imported
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from classifier import build_classifier
from datasets import make_gaussian_mixture, make_shape_images
from diffusion import DiffusionModel, ImageEpsNet, PointEpsNet, make_schedule
from seeding import seeded_init


@pytest.fixture
def shapes_small():
    return make_shape_images(n_per_class=8, side=12, seed=0)


@pytest.fixture
def mixture_small():
    return make_gaussian_mixture(n_per_class=25, n_classes=4, spread=0.1, seed=0)


@pytest.fixture
def small_schedule():
    return make_schedule(10, 1e-3, 0.2)


@pytest.fixture
def point_diffusion(small_schedule):
    with seeded_init(0):
        net = PointEpsNet(2, width=16, depth=2)
    return DiffusionModel(small_schedule, net, (2,)).double()


@pytest.fixture
def image_diffusion(small_schedule):
    with seeded_init(0):
        net = ImageEpsNet(1, widths=(4, 8, 8))
    return DiffusionModel(small_schedule, net, (1, 12, 12)).double()


@pytest.fixture
def point_classifier():
    return build_classifier('mlp', (2,), 4, seed=0).double()


@pytest.fixture
def image_classifier():
    return build_classifier('small_conv', (1, 12, 12), 3, seed=0).double()


@pytest.fixture
def make_zero_eps_model():
    """Diffusion model whose noise prediction is identically zero."""
    def _create(schedule, shape=(2,)):
        net = PointEpsNet(shape[0], width=8, depth=1)
        for p in net.parameters():
            torch.nn.init.zeros_(p)
        return DiffusionModel(schedule, net, shape).double()
    return _create
