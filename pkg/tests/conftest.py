import os

import pytest

from palnet.data import generate_dataset, manifest_path
from palnet.model import load_checkpoint
from palnet.train import TrainConfig, train


@pytest.fixture(scope="session")
def dataset_small(tmp_path_factory):
    """Shared 350/140 synthetic dataset (7 classes, 64x64)."""
    root = str(tmp_path_factory.mktemp("ds-small"))
    generate_dataset(root, seed=11, n=350, split="train")
    generate_dataset(root, seed=11, n=140, split="test")
    return {
        "root": root,
        "train": manifest_path(root, "train"),
        "test": manifest_path(root, "test"),
    }


@pytest.fixture(scope="session")
def trained_baseline(dataset_small, tmp_path_factory):
    """A short cross-entropy-only run shared by eval/export/occlusion tests."""
    out = str(tmp_path_factory.mktemp("baseline-run"))
    cfg = TrainConfig(
        train_manifest=dataset_small["train"],
        test_manifest=dataset_small["test"],
        method="none",
        epochs=12,
        seed=3,
        augment=False,
    )
    record = train(cfg, out)
    spec, params = load_checkpoint(record.checkpoint)
    return {"record": record, "spec": spec, "params": params,
            "config": cfg, "out": out, **dataset_small}
