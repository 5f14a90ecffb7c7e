"""Shared fixtures and oracle helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from sparse_lab import (
    LabeledDataset,
    MlpArchitecture,
    ParamSet,
    init_params,
    loss_and_grad,
)


def finite_difference_grads(params, batch, labels, h=1e-5):
    """Independent oracle: central differences of the scalar loss.

    Treats loss_and_grad's loss output as a black-box function of the
    parameters; never touches the analytic gradients.
    """
    out = {}
    for name in params.names():
        flat = params[name].reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grad(params, None, batch, labels)
            flat[i] = orig - h
            lm, _ = loss_and_grad(params, None, batch, labels)
            flat[i] = orig
            g[i] = (lp - lm) / (2 * h)
        out[name] = g.reshape(params[name].shape)
    return out


def gradient_mismatch(analytic, numeric, names):
    """max |a - f| / max(|a|, |f|, 1e-3) over all parameters."""
    worst = 0.0
    for name in names:
        a, f = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-3)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst


def make_params(weight_rows, bias=None):
    """Single-layer ParamSet from an explicit weight matrix."""
    w = np.asarray(weight_rows, dtype=np.float64)
    params = ParamSet()
    params.add("fc1.weight", w, prunable=True)
    params.add("fc1.bias", np.zeros(w.shape[0]) if bias is None else np.asarray(bias, float), prunable=False)
    return params


@pytest.fixture
def tiny_dataset():
    """Two well-separated points, one per class."""
    feats = np.array([[0.0, 1.0], [1.0, 0.0]])
    labels = np.array([0, 1])
    return LabeledDataset(features=feats, labels=labels, num_classes=2, name="tiny")


@pytest.fixture
def small_arch():
    return MlpArchitecture([4, 5, 3])


@pytest.fixture
def small_net(small_arch):
    return init_params(small_arch, 7)
