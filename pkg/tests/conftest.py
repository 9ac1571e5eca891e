import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "main_classes"))

from MicrogridModel_module import (ConstantBdc, DesdParams, GridLimits, Horizon, MicrogridModel,  # noqa: E402
                                   PriceProfile, UserSpec, load_model)

DATA_DIR = os.path.join(ROOT, "main_classes", "data")


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture(scope="module")
def shipped_model():
    return load_model(os.path.join(DATA_DIR, "model.yaml"))


@pytest.fixture
def battery():
    def build(e0=2.0, e_min=0.0, e_max=4.0, p_max=1.0, kappa=1.0, c_d=0.0, bdc=None):
        return DesdParams(e0=e0, e_min=e_min, e_max=e_max, p_max=p_max, kappa=kappa,
                          bdc=bdc if bdc is not None else ConstantBdc(c_d))
    return build


@pytest.fixture
def make_model():
    """Small hand-built model; demands keyed by user id, sell defaults to 0.8 * buy."""
    def build(users, demands, buy, sell=None, p_g_max=100.0, edges=None, terminal_soc=False, dt=1.0):
        buy = np.asarray(buy, dtype=float)
        prices = PriceProfile(buy=buy, sell=0.8 * buy if sell is None else sell)
        return MicrogridModel(horizon=Horizon(steps=buy.size, dt=dt), users=tuple(users), demands=demands,
                              prices=prices, grid=GridLimits(p_g_max), edges=edges, terminal_soc=terminal_soc)
    return build


@pytest.fixture
def passive():
    return UserSpec.passive
