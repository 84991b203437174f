import pytest
import torch

from dirlat.config import from_dict
from dirlat.data import SyntheticSpec, generate_synthetic, split_dataset
from dirlat.train import TrainData

torch.set_num_threads(1)


def tiny_config(kind="dirichlet", seed=0, **train):
    t = {"epochs": {"recon": 1, "recon_kl": 1, "clf_init": 1, "joint": 1}, "batch_size": 16, "vae_lr": 1e-3,
         "clf_lr": 0.5, "kl_weight": 0.01}
    t.update(train)
    return from_dict({"seed": seed, "model": {"prior_kind": kind, "latent_dim": 4, "image_size": 8,
                                              "base_channels": 4, "max_channels": 8},
                      "train": t})


@pytest.fixture(scope="session")
def tiny_data():
    ds = generate_synthetic(SyntheticSpec(image_size=8), 48, 3)
    split = split_dataset(ds.rows, (0.75, 0.125, 0.125), 0)
    take = lambda part: ds.data.take([r.path for r in part])
    return TrainData(take(split.train), take(split.val))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
