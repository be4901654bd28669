import numpy as np
import pytest

from coarsematte import synthdata
from coarsematte.imagery import Rng
from coarsematte.nets import NetConfig
from coarsematte.train import TrainConfig, train_all

ACCEPTANCE_LINES = []

TINY = NetConfig(base_width=8, depth=2, low_res=(16, 16), high_res=(64, 64), grid_range=(64, 1024))

# desk-scale geometry: 128x128 images, 32x32 low-res masks (the 4x gap is kept)
DESK_SIZE = (128, 128)
DESK_CFG = TrainConfig(
    low_res=(32, 32), crop=(128, 128),
    mpn_width=8, mpn_depth=2, qun_width=8, qun_depth=2, mrn_width=8, mrn_depth=2,
    mpn_epochs=50, qun_epochs=60, mrn_epochs=1000, max_steps_mrn=1500, patience=0,
    grid_min=64, seed=0,
)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """64 fine + 64 coarse training foregrounds and 25 fine test foregrounds, one background each."""
    out = tmp_path_factory.mktemp("desk_data")
    r = Rng(2024)
    fgs = synthdata.procedural_foregrounds(64, 64, DESK_SIZE, r.split("fg"), n_test=25)
    bgs = synthdata.procedural_backgrounds(24, DESK_SIZE, r.split("bg"))
    return synthdata.build_dataset(fgs, bgs, 1, r, out)


@pytest.fixture(scope="session")
def desk_models(desk_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_models")
    bundle, results = train_all(desk_dataset, DESK_CFG, out, log_path=out / "train.log")
    return bundle, results, out
