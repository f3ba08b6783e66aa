import numpy as np
import pytest
from click.testing import CliRunner

from fbgforce.preprocess import EpisodeWindows
from fbgforce.simulate import SimConfig


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def short_sim() -> SimConfig:
    """Four 6-second episodes: enough for a split, quick to generate."""
    return SimConfig(episodes=4, duration=6.0, seed=3)


@pytest.fixture
def toy_windows():
    """Factory for small random window sets with a constant 10 g target."""

    def make(n_episodes: int = 4, n_windows: int = 12, seed: int = 0, force: float = 10.0):
        rng = np.random.default_rng(seed)
        return [
            EpisodeWindows(
                x=rng.normal(0.0, 0.01, size=(n_windows, 100, 3)),
                y=np.full(n_windows, force),
                times=(100 * np.arange(n_windows) + 99) / 1000.0,
                index=i,
            )
            for i in range(n_episodes)
        ]

    return make
