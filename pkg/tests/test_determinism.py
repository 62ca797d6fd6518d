import numpy as np
import pytest

from volsplat.config import settings
from volsplat.dataset import render_dataset
from volsplat.renderers import gradcheck_variant, render_variant
from volsplat.schemas import SyntheticParams, TrainConfig, Variant
from volsplat.synthetic import make_synthetic
from volsplat.training import fit


@pytest.fixture(scope="module")
def blob():
    return make_synthetic("blob_cloud", SyntheticParams(seed=3, count=12, views=4, resolution=(20, 20)))


@pytest.mark.parametrize("variant", list(Variant))
def test_render_bit_identical_across_workers(blob, variant, monkeypatch):
    scene, cameras = blob
    first = render_variant(scene, cameras[1], variant).radiance
    again = render_variant(scene, cameras[1], variant).radiance
    monkeypatch.setattr(settings, "threads", 4)
    threaded = render_variant(scene, cameras[1], variant).radiance
    np.testing.assert_array_equal(first, again)
    np.testing.assert_array_equal(first, threaded)


@pytest.mark.parametrize("variant", [Variant.OTS_SATN, Variant.GS3D_MARCHER])
def test_gradcheck_bit_identical_across_workers(variant, monkeypatch):
    single = gradcheck_variant(variant, 1, gaussians=[0])
    monkeypatch.setattr(settings, "threads", 4)
    threaded = gradcheck_variant(variant, 1, gaussians=[0])
    assert single.report == threaded.report


@pytest.mark.parametrize("variant", [Variant.GS3D_STP, Variant.OTS_MARCHER])
def test_fit_bit_identical_across_workers(blob, variant, monkeypatch):
    scene, cameras = blob
    dataset = render_dataset(scene, cameras, test_every=4)
    config = TrainConfig(variant=variant, gaussian_count=8, iterations=4, eval_interval=2, sh_degree=0, seed=5)
    single = fit(config, dataset)
    monkeypatch.setattr(settings, "threads", 4)
    threaded = fit(config, dataset)
    for name, value in single.scene.parameters().items():
        np.testing.assert_array_equal(threaded.scene.parameters()[name], value)
    assert [row["loss"] for row in single.trace] == [row["loss"] for row in threaded.trace]
