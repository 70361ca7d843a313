import numpy as np
import pytest
import torch

from gmmas.augment import Sample
from gmmas.volumes import CaseLabels, MultimodalVolume, SegmentationMask


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume(shape=(16, 16, 16), presence=(True, True, True, True), seed=0,
                case_id="case") -> MultimodalVolume:
    r = np.random.default_rng(seed)
    vox = r.uniform(0.05, 1.0, size=(4,) + tuple(shape)).astype(np.float32)
    for m, p in enumerate(presence):
        if not p:
            vox[m] = 0.0
    return MultimodalVolume(voxels=vox, modality_presence=presence, case_id=case_id)


def make_mask(shape=(16, 16, 16), seed=0, tumor_box=None) -> SegmentationMask:
    labels = np.zeros(shape, dtype=np.uint8)
    if tumor_box is None:
        r = np.random.default_rng(seed)
        labels = r.integers(0, 4, size=shape).astype(np.uint8)
    else:
        sl = tuple(slice(lo, hi) for lo, hi in tumor_box)
        labels[sl] = 2
    return SegmentationMask(labels=labels)


def make_sample(shape=(16, 16, 16), presence=(True,) * 4, seed=0, tumor_box=None,
                labels=None, case_id="case") -> Sample:
    return Sample(
        volume=make_volume(shape, presence, seed, case_id),
        mask=make_mask(shape, seed, tumor_box),
        labels=labels or CaseLabels(),
    )


@pytest.fixture
def small_sample():
    return make_sample(shape=(16, 16, 16), tumor_box=((5, 9), (6, 10), (4, 8)))
