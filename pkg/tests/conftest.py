import os
import sys

import numpy as np
import pytest
import torch

from tnrf.fields import FieldConfig, FieldModel
from tnrf.film_siren import FilmParams

torch.set_num_threads(1)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long training experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("TNRF_RUNSLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow training experiment; use --runslow or TNRF_RUNSLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


MICRO = FieldConfig(shape_dim=4, appearance_dim=4, width=8, trunk_depth=2, radiance_depth=1,
                    shape_depth=2, mapping_width=8, mapping_depth=2)


def randomize(model: FieldModel, seed: int = 0, scale: float = 0.3) -> FieldModel:
    """Give zero-initialised heads generic nonzero values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.reset_parameters(gen)
        for head in (model.deform_head, model.correction_head):
            head.weight.copy_(scale * torch.randn(head.weight.shape, generator=gen, dtype=head.weight.dtype))
            head.bias.copy_(0.1 * torch.randn(head.bias.shape, generator=gen, dtype=head.bias.dtype))
        for net in (model.shape_mapping, model.appearance_mapping):
            for p in net.head.parameters():
                p.copy_(0.2 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


@pytest.fixture
def micro_model():
    return FieldModel(MICRO).double().reset_parameters(torch.Generator().manual_seed(0))


@pytest.fixture
def random_micro_model():
    return randomize(FieldModel(MICRO).double())


def per_point(film: FilmParams, n: int) -> FilmParams:
    return film.take(torch.zeros(n, dtype=torch.long))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



# -- acceptance report ------------------------------------------------------------------

# criterion number -> result line, filled in by test_acceptance
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in module.CRITERIA.items():
        terminalreporter.write_line(ACCEPTANCE_LINES.get(number, f"criterion {number} ({title}): NOT RUN"))
