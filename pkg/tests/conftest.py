import numpy as np
import pytest

from mvar.model import HyperParams, init_params, normalized_coords


def tiny_hp(use_meteo=True, **kw):
    base = dict(N=4, D=3, C=2, H=8, W=8, L=2, d_in=12, d_pa=4, d_pm=4, d_t=4, heads=2,
                ffn_mult=2, ds_hidden=4, use_meteo=use_meteo, coord_origin=[39.0, 116.0],
                coord_scale=2.0, grid_lat0=38.0, grid_lon0=115.0, grid_dlat=0.25, grid_dlon=0.25)
    base.update(kw)
    return HyperParams(**base)


class Tiny:
    def __init__(self, use_meteo=True, seed=0, **kw):
        self.hp = tiny_hp(use_meteo, **kw)
        rng = np.random.default_rng(seed + 100)
        self.params = init_params(self.hp, seed)
        # non-trivial gains/biases so their gradients are exercised
        for k, v in self.params.items():
            if k.endswith("gain") or k.endswith("bias") or k.endswith(".b1") or k.endswith(".b2"):
                self.params[k] = v + rng.normal(scale=0.1, size=v.shape)
        self.latlon = np.stack([rng.uniform(38, 40, self.hp.N), rng.uniform(115, 117, self.hp.N)], axis=1)
        self.xy = normalized_coords(self.hp, self.latlon[:, 0], self.latlon[:, 1])
        self.states = rng.normal(size=(6, self.hp.N, self.hp.D))
        self.meteo = rng.normal(size=(5, self.hp.C, self.hp.H, self.hp.W))
        self.times = np.array(["2023-03-01T06", "2023-03-01T12", "2023-03-01T18", "2023-03-02T00"],
                              dtype="datetime64[s]")


@pytest.fixture
def tiny():
    return Tiny(use_meteo=True)


@pytest.fixture
def tiny_nometeo():
    return Tiny(use_meteo=False)
