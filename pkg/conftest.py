# conftest.py
"""Shared fixtures: tiny suites and models, seeded rngs, a finite-difference checker."""

from typing import Callable, Sequence

import numpy as np
import pytest

from proud.autodiff import Tensor, backward, no_grad
from proud.datagen import make_domain_suite
from proud.model import Model, forward_features, init_model
from proud.schemas import ExperimentConfig, GeneratorConfig, PretrainConfig, ProudHyper

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
LIVE_FEATURE_NORM = 1e-3


def live_inputs(m: Model, rng: np.random.Generator, n: int, max_rounds: int = 100) -> np.ndarray:
    """
    n standard-normal inputs whose feature vectors are clearly non-zero.

    Zero-bias models send every input with all hidden units inactive to the zero
    vector; those rows are redrawn.
    """
    x = rng.normal(size=(n, m.input_dim))
    for _ in range(max_rounds):
        with no_grad():
            dead = np.linalg.norm(forward_features(m, x).data, axis=1) < LIVE_FEATURE_NORM
        if not dead.any():
            return x
        x[dead] = rng.normal(size=(int(dead.sum()), m.input_dim))
    raise RuntimeError("could not draw inputs with live features")


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(param.data)
    for idx in np.ndindex(*param.data.shape):
        original = param.data[idx]
        param.data[idx] = original + step
        plus = loss_fn().item()
        param.data[idx] = original - step
        minus = loss_fn().item()
        param.data[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def assert_gradients_match(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> None:
    """Central differences against backward for every parameter; loss_fn must be deterministic."""
    grads = backward(loss_fn())
    for i, p in enumerate(params):
        analytic = grads.get(p, np.zeros_like(p.data))
        err = relative_error(analytic, numeric_gradient(loss_fn, p))
        assert err < FD_TOLERANCE, f"parameter {i} of shape {p.shape}: relative error {err:.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_gen_config():
    return GeneratorConfig(
        num_classes=3,
        input_dim=5,
        n_per_domain=60,
        class_separation=4.0,
        domain_rotation_degrees=[0, 15, 30, 45],
        domain_translation=[0, 0.25, 0.5, 0.75],
        noise_sigma=0.5,
        spurious_strength=0.5,
        seed=7,
    )


@pytest.fixture
def tiny_suite(tiny_gen_config):
    return make_domain_suite(tiny_gen_config)


@pytest.fixture
def tiny_model():
    return init_model(5, [8], 4, 3, seed=0)


@pytest.fixture
def tiny_experiment(tiny_gen_config):
    return ExperimentConfig(
        generator=tiny_gen_config,
        model={"hidden": [8], "feature_dim": 4},
        pretrain=PretrainConfig(epochs=3, lr=0.05, batch_size=16, early_stop_patience=2),
        proud=ProudHyper(epochs=2, batch_size=32, ensemble_size=2),
        seeds=[2022],
    )
