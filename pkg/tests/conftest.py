import numpy as np
import pytest

from coexsim.channel import PathlossModel, RateMap
from coexsim.experiments import ExperimentConfig, MacConfig, RegionConfig, TierConfig
from coexsim.geometry import LTE_SCHEDULED, WIFI_CONTENTION, Deployment, Region, TierSpec
from coexsim.mac import ChannelModels

LTE = TierSpec("lte", 3e-6, 40.0, 2.1e9, 84e6, LTE_SCHEDULED)
WIFI = TierSpec("wifi", 3e-4, 1.0, 2.4e9, 65e6, WIFI_CONTENTION)


def make_deployment(nodes, tiers=(LTE, WIFI), users=None, serving=None, region=None):
    """Hand-built deployment; ``nodes`` is a list of (x, y, tier index)."""
    region = region or Region(1000.0, 1000.0)
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 3)
    dep = Deployment(region, tuple(tiers), nodes[:, :2].copy(), nodes[:, 2].astype(int))
    if users is not None:
        dep = dep.with_users(users, serving)
    return dep


def table1_models(attenuation=0.75):
    return ChannelModels(PathlossModel(), (RateMap(84e6, attenuation=attenuation), RateMap(65e6, attenuation=attenuation)))


def tiny_config(**changes):
    """A small scene that simulates in well under a second per drop."""
    base = dict(
        seed=11,
        drops=4,
        frames_per_drop=2,
        load_grid=(0.0, 0.5, 1.0),
        region=RegionConfig(500.0, 500.0),
        tiers=(TierConfig("lte", 12.0, 40.0, 2100.0, 84.0, LTE_SCHEDULED, "sweep"),
               TierConfig("wifi", 40.0, 1.0, 2400.0, 65.0, WIFI_CONTENTION, 1.0)),
        mac=MacConfig(cs_threshold_dbm=-92.0),
    )
    base.update(changes)
    return ExperimentConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
