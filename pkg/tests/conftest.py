import time

import numpy as np
import pytest

from stripereid.configs import RunConfig
from stripereid.data import generate_synthetic, load_market_layout
from stripereid.train import model_from_checkpoint, train

SYNTH_IDS = 8
SYNTH_IMGS_PER_ID = 16


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth") / "data"
    generate_synthetic(root, num_ids=SYNTH_IDS, imgs_per_id=SYNTH_IMGS_PER_ID,
                       image_size=(384, 128), seed=1)
    return root


@pytest.fixture(scope="session")
def dataset(synth_root):
    return load_market_layout(synth_root)


def overfit_config(dataset_root, output_dir, steps=200, seed=0) -> RunConfig:
    return RunConfig.from_dict({
        "dataset_root": str(dataset_root),
        "output_dir": str(output_dir),
        "model": {"backbone": "tiny", "reduced_dim": 32},
        "sampler": {"p": 4, "k": 4},
        "train": {"epochs": 1000, "max_steps": steps,
                  "lr_schedule": {"0": 0.01}, "seed": seed},
    })


@pytest.fixture(scope="session")
def trained_run(synth_root, tmp_path_factory):
    """One 200-step desk-scale training run, shared across test modules."""
    out = tmp_path_factory.mktemp("run")
    cfg = overfit_config(synth_root, out / "overfit", steps=200)
    t0 = time.time()
    result = train(cfg)
    return {"result": result, "config": cfg, "train_seconds": time.time() - t0}


@pytest.fixture(scope="session")
def trained_model(trained_run):
    model, sidecar = model_from_checkpoint(trained_run["result"].checkpoint)
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
