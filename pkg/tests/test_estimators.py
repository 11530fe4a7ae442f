import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vshuffle import denoiser, textures, transfer
from vshuffle.estimators import StyleTransfer, check_images

TINY = dict(T=3, inner_steps=1, blocks=(12, 14))


@pytest.fixture(scope="module")
def toy_model():
    m = denoiser.init_model(seed=0)
    with torch.no_grad():
        m.conv_out.weight.normal_(0, 0.05, generator=torch.Generator().manual_seed(1))
    m.trained_steps = 1
    return m


def test_check_images():
    x = np.zeros((2, 3, 4, 4))
    assert check_images(x).dtype == torch.float32 and check_images(x[0]).shape == (1, 3, 4, 4)
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 4, 4), 2.0))
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 3, 4, 4)), size=8)


def test_params_roundtrip_and_clone(toy_model):
    est = StyleTransfer(toy_model, alpha=0.3)
    assert est.get_params()["alpha"] == 0.3
    c = clone(est)
    assert c.alpha == 0.3 and c.model.config == toy_model.config and not hasattr(c, "styles_")


def test_unfitted_and_missing_model(toy_model):
    with pytest.raises(NotFittedError):
        StyleTransfer(toy_model).transform(np.zeros((1, 3, 32, 32)))
    with pytest.raises(ValueError):
        StyleTransfer().fit(np.zeros((1, 3, 32, 32)))
    with pytest.raises(ValueError):
        StyleTransfer(toy_model, method="ad").fit(np.zeros((2, 3, 32, 32)))


def test_transform_matches_functional_run(toy_model):
    styles = textures.make_texture_dataset("blue-blobs", 2, 0)
    content = textures.make_texture_dataset("shapes", 2, 1)
    est = StyleTransfer(toy_model, **TINY).fit(styles)
    assert est.n_styles_ == 2 and est.config_.n == 2 and len(est.cache_) == 2
    out = est.transform(content)
    assert out.shape == (2, 3, 32, 32) and out.dtype == np.float32
    ref = transfer.run(toy_model, content[1], list(styles), est.config_).image.numpy()
    assert out[1].tobytes() == ref.tobytes()
