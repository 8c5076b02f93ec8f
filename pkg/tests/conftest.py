import numpy as np
import pytest

from gdatpred.data import AgentType, PredictionCase


def build_case(positions, history_len, dt=1.0, types=None, tag=""):
    pos = np.asarray(positions, dtype=float)
    n, t, _ = pos.shape
    vel = np.zeros_like(pos)
    vel[:, 1:] = np.diff(pos, axis=1) / dt
    vel[:, 0] = vel[:, 1]
    types = types or (AgentType.PEDESTRIAN,) * n
    heads = np.full((n, t), np.nan)
    for i, ty in enumerate(types):
        if ty is AgentType.VEHICLE:
            heads[i] = np.arctan2(vel[i, :, 1], vel[i, :, 0])
    return PredictionCase(tuple(f"a{i}" for i in range(n)), tuple(types), pos, vel, heads, history_len, dt, tag=tag)


@pytest.fixture
def make_case():
    return build_case
