import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import BackboneConfig, HeadConfig, LfbConfig, PipelineConfig, SamplingSpec, SyntheticSpec  # noqa: E402

TINY_BACKBONE = BackboneConfig(stage_channels=(4, 4, 8, 8), nonlocal_stage=2, seed=3)

TINY_SYNTH = SyntheticSpec(
    num_videos=4,
    video_seconds=3,
    fps=2,
    frame_h=32,
    frame_w=32,
    glyph_size=3,
    num_classes=4,
    actors_per_frame_range=(1, 2),
    seed=7,
)


def tiny_pipeline_config(**changes) -> PipelineConfig:
    base = PipelineConfig(
        sampling=SamplingSpec(num_frames=4, stride=2, neighborhood=8),
        crop_train=(32, 32),
        crop_test=(32, 32),
        scene_size=32,
        backbone=TINY_BACKBONE,
        lfb=LfbConfig(dim=16, window_seconds=3),
        head=HeadConfig(iters=40, batch_size=8, dropout=0.0),
        seed=5,
    )
    return replace(base, **changes)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def tiny_config():
    return tiny_pipeline_config()


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory):
    """A four-video synthetic dataset shared by the pipeline and CLI tests."""
    from synthetic import generate_synthetic
    root = str(tmp_path_factory.mktemp("toy"))
    generate_synthetic(TINY_SYNTH, root, num_workers=2)
    return root
