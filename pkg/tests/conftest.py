import numpy as np
import pytest
import torch

from resrecon.diffusion.schedule import build_schedule
from resrecon.diffusion.training import init_checkpoint
from resrecon.diffusion.unet import DenoiserConfig
from resrecon.volume import generate_phantom, synth_coil_maps

torch.set_num_threads(1)

TINY = dict(base_channels=8, channel_mults=(1, 2), attention_levels=(1,), groups=4)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture(scope="session")
def tiny_ckpt(schedule):
    return init_checkpoint(DenoiserConfig(**TINY), schedule, seed=0)


@pytest.fixture(scope="session")
def tiny_inf_ckpt(schedule):
    cfg = DenoiserConfig(arch="inf_unet", train_voxel_sizes=[(1.0, 1.0)], **TINY)
    return init_checkpoint(cfg, schedule, seed=0)


@pytest.fixture(scope="session")
def phantom16():
    return generate_phantom(3, (16, 16, 16))


@pytest.fixture(scope="session")
def maps16():
    return synth_coil_maps((16, 16, 16), 4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
