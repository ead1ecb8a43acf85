import numpy as np
import pytest
import torch

from dvst.config import toy_config
from dvst.model import DvstModel


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(12345)


@pytest.fixture()
def cfg():
    return toy_config()


@pytest.fixture()
def model(cfg):
    torch.manual_seed(7)
    m = DvstModel(cfg)
    m.eval()
    return m


@pytest.fixture()
def rng():
    return np.random.default_rng(99)


def write_png_dir(tmp_path, arrays, prefix="frame"):
    """Write float [0,1] HxWx3 arrays as a PNG frame directory."""
    from PIL import Image

    d = tmp_path
    d.mkdir(parents=True, exist_ok=True)
    for i, arr in enumerate(arrays):
        img = Image.fromarray((np.asarray(arr) * 255).round().astype(np.uint8))
        img.save(d / f"{prefix}_{i:05d}.png")
    return d
