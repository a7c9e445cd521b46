import numpy as np
import pytest

from flow2stereo.scene_synth import SceneConfig, generate_scene, render_quadset


@pytest.fixture(scope="session")
def tiny_scene():
    """Small two-patch scene shared by tests that need a rendered quadset."""
    cfg = SceneConfig(width=48, height=32, patches=2, seed=7)
    scene, rig = generate_scene(cfg)
    quad, gt = render_quadset(scene, rig)
    return scene, rig, quad, gt


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
