"""
Shared fixtures for the CSST test suite
"""

from pathlib import Path

import pytest

from csst.core.config.run_config import load_run_config
from csst.core.config.settings import settings
from csst.schemas.config import BackboneConfig, BackboneVariant, GraphConfig, SynthConfig
from csst.services.context import PipelineContext
from csst.services.data_io import generate_synthetic

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end reproduction")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True, scope="session")
def _quiet_progress():
    previous = settings.progress
    settings.progress = False
    yield
    settings.progress = previous


@pytest.fixture(scope="session")
def small_synth() -> SynthConfig:
    return SynthConfig(n_pois=200, n_labeled=100, extent_km=2.0, k=8, seed=5)


@pytest.fixture(scope="session")
def small_dataset(small_synth):
    """200 POIs in a 2 km square, half of them labeled."""
    return generate_synthetic(small_synth)


@pytest.fixture(scope="session")
def small_graph_cfg() -> GraphConfig:
    return GraphConfig(k=8, cutoff_m=500.0)


def tiny_backbone(variant: BackboneVariant, **overrides) -> BackboneConfig:
    fields = dict(variant=variant, hidden_dim=32, mlp_depth=2, conv_layers=1, sigma_m=300.0, hops=1,
                  max_neighbors=6)
    fields.update(overrides)
    return BackboneConfig(**fields)


@pytest.fixture(scope="session")
def stgnn_context(small_dataset, small_graph_cfg) -> PipelineContext:
    return PipelineContext.build(small_dataset, small_graph_cfg, tiny_backbone(BackboneVariant.STGNN))


@pytest.fixture(scope="session")
def msfnet_context(stgnn_context) -> PipelineContext:
    return stgnn_context.with_backbone(tiny_backbone(BackboneVariant.MSFNET))


@pytest.fixture
def tiny_config_path() -> Path:
    return CONFIG_DIR / "tiny.yaml"


@pytest.fixture
def tiny_config(tiny_config_path):
    return load_run_config(tiny_config_path)
