import os
from typing import Iterator

import numpy as np
import pytest

from mfd.trial_data import TrialDataset


_ENV_KEYS = ("MFD_SEED", "MFD_JOBS", "MFD_OUTPUT_DIR", "LOG_LEVEL", "LOG_SERIALIZE")

# Saturated single-site table: four subjects per (z, g) cell.
SATURATED_CELLS = {
    (1, 1): [0, 1, 1, 2],
    (1, 0): [1, 2, 2, 3],
    (0, 1): [1, 1, 2, 2],
    (0, 0): [2, 3, 3, 4],
}


@pytest.fixture(autouse=True)
def _unit_env(request: pytest.FixtureRequest) -> Iterator[None]:
    """Run every test without MFD_* overrides leaking in from the shell."""
    prev = {k: os.environ.get(k) for k in _ENV_KEYS}
    try:
        for k in _ENV_KEYS:
            os.environ.pop(k, None)
        os.environ["LOG_LEVEL"] = "WARNING"
        yield
    finally:
        for k, v in prev.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def make_saturated() -> TrialDataset:
    site, z, g, y = [], [], [], []
    for (zz, gg), counts in SATURATED_CELLS.items():
        for c in counts:
            site.append("A")
            z.append(zz)
            g.append(gg)
            y.append(c)
    return TrialDataset.from_arrays(site, z, g, y=y)


def make_poisson_trial(
    sizes=(200,), prevalence=(0.3,), tau=0.5, nu=0.5, d=1, seed=7, base=1.5, beta=0.2
) -> TrialDataset:
    """Poisson counts with log-linear covariate effect; arms alternate within each site."""
    rng = np.random.default_rng(seed)
    site, z, g, x, y = [], [], [], [], []
    for j, (size, pg) in enumerate(zip(sizes, prevalence)):
        zj = np.arange(size) % 2
        gj = (rng.random(size) < pg).astype(int)
        xj = rng.standard_normal((size, d))
        mu = base * (1 - tau) ** zj * (1 - nu) ** gj * np.exp(beta * xj.sum(axis=1))
        site += [f"S{j + 1}"] * size
        z.append(zj)
        g.append(gj)
        x.append(xj)
        y.append(rng.poisson(mu))
    return TrialDataset.from_arrays(site, np.concatenate(z), np.concatenate(g), np.vstack(x), y=np.concatenate(y))


@pytest.fixture()
def saturated_ds() -> TrialDataset:
    return make_saturated()


@pytest.fixture()
def single_site_ds() -> TrialDataset:
    return make_poisson_trial(sizes=(400,), prevalence=(0.3,))


@pytest.fixture()
def multi_site_ds() -> TrialDataset:
    return make_poisson_trial(sizes=(120, 180, 240), prevalence=(0.25, 0.4, 0.3), seed=11)


@pytest.fixture()
def survival_ds() -> TrialDataset:
    from mfd.survival_mfd import SurvivalScenario, simulate_survival_trial

    return simulate_survival_trial(SurvivalScenario(n=2000), seed=3)
