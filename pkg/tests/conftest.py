"""Shared test helpers: finite differences, relative error, tiny model builders."""

from __future__ import annotations

import numpy as np
import pytest

from vctc.ctc import Vocab
from vctc.models import ModelConfig, Variant, init_params
from vctc.numerics import Rng


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor of 1e-8."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-8)
    return float(np.max(np.abs(got - want) / denom))


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an ndarray."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        up = f(x)
        xf[i] = orig - h
        down = f(x)
        xf[i] = orig
        flat[i] = (up - down) / (2.0 * h)
    return grad


def param_central_diff(f, store, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of a scalar function evaluated at the store's
    current parameter values, perturbing one entry at a time in place."""
    grads = {}
    for name, tensor in store.items():
        data = tensor.data
        g = np.zeros_like(data)
        gf = g.reshape(-1)
        df = data.reshape(-1)
        for i in range(df.size):
            orig = df[i]
            df[i] = orig + h
            up = f()
            df[i] = orig - h
            down = f()
            df[i] = orig
            gf[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def tiny_config(variant: Variant, vocab_size: int = 2, d_in: int = 3,
                d_z: int = 2, d_hidden: int = 4) -> ModelConfig:
    return ModelConfig(
        d_in=d_in,
        vocab=Vocab.default(vocab_size),
        variant=variant,
        d_z=d_z,
        d_hidden=d_hidden,
    )


def tiny_model(variant: Variant, seed: int = 0, **kwargs):
    cfg = tiny_config(variant, **kwargs)
    params = init_params(cfg, Rng(seed))
    return cfg, params


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)
