"""Shared test utilities: flat-vector loss adapters and non-degeneracy guards."""
from __future__ import annotations

import numpy as np

from fedaug import nn
from fedaug.algorithms import ClientContext
from fedaug.data import LabeledDataset


def net_grads_to_vec(grads: nn.NetGrads) -> np.ndarray:
    return np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])


def tiny_model(seed: int, input_dim: int = 6, hidden=(8, 5), classes: int = 3, proj_layers: int = 3) -> nn.ModelParams:
    rng = np.random.default_rng(seed)
    return nn.build_model(rng, input_dim, list(hidden), classes, proj_layers=proj_layers)


def positive_batch(seed: int, n: int, dim: int) -> np.ndarray:
    """Batch resembling pixel data: strictly inside (0, 1]."""
    return np.random.default_rng(seed).uniform(0.05, 1.0, size=(n, dim))


def assert_kink_margin(net: nn.DenseNet, x: np.ndarray, margin: float = 1e-3) -> None:
    """Guard for finite-difference tests: no relu pre-activation near its kink."""
    _, cache = net.forward_cached(x)
    for layer, (_, pre) in zip(net.layers, cache):
        if layer.activation == "relu":
            gap = np.abs(pre).min()
            assert gap > margin, f"relu pre-activation too close to 0 ({gap}); pick another seed"


def assert_projection_nondegenerate(theta: nn.DenseNet, feats: np.ndarray, floor: float = 1e-3) -> None:
    z = theta.forward(feats)
    norms = np.linalg.norm(z, axis=1)
    assert norms.min() > floor, f"degenerate projection (norm {norms.min()}); pick another seed"


def make_context(client_id: int, features: np.ndarray, labels: np.ndarray, num_classes: int) -> ClientContext:
    ds = LabeledDataset(features, labels, num_classes)
    return ClientContext(client_id, ds, ds)


def params_equal(a: nn.ModelParams, b: nn.ModelParams) -> bool:
    for net_a, net_b in ((a.phi, b.phi), (a.omega, b.omega), (a.theta, b.theta)):
        for la, lb in zip(net_a.layers, net_b.layers):
            if not (np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)):
                return False
    return True


def max_param_diff(a: nn.ModelParams, b: nn.ModelParams) -> float:
    return float(np.abs(nn.params_to_vector(a) - nn.params_to_vector(b)).max())
