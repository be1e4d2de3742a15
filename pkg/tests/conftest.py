import os

# single-threaded BLAS: deterministic and faster at these matrix sizes
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from meanflow.net import FlowNetConfig, init_params  # noqa: E402
from meanflow.rng import derive_rng  # noqa: E402
from meanflow.autodiff import Tensor  # noqa: E402


def tiny_config(**overrides) -> FlowNetConfig:
    base = dict(
        latent_dim=2, n_labels=3, n_mm_blocks=1, n_sm_blocks=1, hidden_dim=16,
        n_heads=2, max_seq_len=4, pseudo_token_count=2, time_embed_dim=8,
        time_freq_max=16.0,
    )
    base.update(overrides)
    return FlowNetConfig(**base)


def jittered_params(cfg, seed=0, dtype=np.float64, scale=0.05):
    """Initialized parameters nudged off their zero-modulation starting point."""
    params = init_params(cfg, seed, dtype=dtype)
    rng = derive_rng(seed, 1001)
    for name in params.names():
        base = params[name].numpy()
        params.replace(name, Tensor(base + rng.normal(0.0, scale, base.shape), dtype=base.dtype))
    return params


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny_cfg):
    return jittered_params(tiny_cfg)
