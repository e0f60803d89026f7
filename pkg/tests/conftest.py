import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # expose tests/helpers.py

from dcfs.backbone import Checkpoint, build_backbone, pretrain_source
from dcfs.data import make_shape_dataset

# desk-scale source model shared by protocol and efficacy tests
SOURCE_SEED = 0
SOURCE_CLASSES = 10
SOURCE_TRAIN_SAMPLES = 4000
SOURCE_EPOCHS = 8


@pytest.fixture(scope="session")
def source_checkpoint(tmp_path_factory) -> Checkpoint:
    """Pretrained small CNN on the toy shape set, cached for the session."""
    torch.set_num_threads(max(1, torch.get_num_threads()))
    path = tmp_path_factory.mktemp("ckpt") / "source.npz"
    train = make_shape_dataset(SOURCE_TRAIN_SAMPLES, SOURCE_CLASSES, seed=100)
    backbone = build_backbone("small_cnn", SOURCE_CLASSES, seed=SOURCE_SEED)
    ckpt = pretrain_source(backbone, train, epochs=SOURCE_EPOCHS, seed=SOURCE_SEED)
    ckpt.save(path)
    return Checkpoint.load(path)
