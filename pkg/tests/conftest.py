import numpy as np
import pytest

from iscc.config import SimConfig


@pytest.fixture
def cfg():
    return SimConfig()


@pytest.fixture
def small_cfg():
    """Eight vehicles on a 200 m ring, short episodes."""
    return SimConfig(density_veh_per_km=40, n_vehicles=8, steps=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_actions(env, rng, **fixed):
    """Uniform feasible joint action; ``fixed`` pins cross-layer heads."""
    from iscc import mac
    from iscc.env import ActionVector
    out = []
    for m in env.masks:
        a = {}
        for h in mac.HEADS:
            if h in fixed:
                a[h] = fixed[h]
                continue
            dom = m.n_c_mask(a["n_s"]) if h == "n_c" else m.heads[h]
            a[h] = int(rng.choice(np.flatnonzero(dom)))
        out.append(ActionVector.from_dict(a))
    return out
