"""Small dense-network engine with hand-derived gradients.

Everything is float64 numpy. A model is three stacked dense networks: a
feature extractor, a linear classifier head, and a projection head used by
the contrastive algorithms. Gradients for every loss are derived per layer
and checked against central finite differences in the test suite; there is
no autodiff dependency.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12   # added to vector norms before dividing
LOG_FLOOR = 1e-12  # probabilities are clamped here before taking logs

ACTIVATIONS = ("relu", "identity")

# One (d_weight, d_bias) pair per layer.
NetGrads = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class DenseLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("layer weight/bias shapes are inconsistent")


@dataclass
class DenseNet:
    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != cur.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not match")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Forward pass keeping (input, pre-activation) per layer for backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"input width {x.shape[-1] if x.ndim else 0} does not match "
                f"network input dim {self.input_dim}"
            )
        cache = []
        for layer in self.layers:
            pre = x @ layer.weight + layer.bias
            cache.append((x, pre))
            x = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        return x, cache

    def backward(self, cache: list, grad_out: np.ndarray) -> tuple[NetGrads, np.ndarray]:
        """Backpropagate grad_out; returns per-layer grads and the input grad."""
        grads: NetGrads = [None] * len(self.layers)  # type: ignore[list-item]
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x_in, pre = cache[i]
            if layer.activation == "relu":
                g = g * (pre > 0.0)
            grads[i] = (x_in.T @ g, g.sum(axis=0))
            g = g @ layer.weight.T
        return grads, g

    def copy(self) -> "DenseNet":
        return DenseNet(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


@dataclass
class ModelParams:
    """Full model: feature extractor, classifier head, projection head."""

    phi: DenseNet
    omega: DenseNet
    theta: DenseNet

    def __post_init__(self) -> None:
        if self.omega.input_dim != self.phi.output_dim:
            raise ValueError("classifier input dim must equal feature dim")
        if self.theta.input_dim != self.phi.output_dim:
            raise ValueError("projection input dim must equal feature dim")

    def copy(self) -> "ModelParams":
        return ModelParams(self.phi.copy(), self.omega.copy(), self.theta.copy())

    def num_params(self) -> int:
        return sum(
            l.weight.size + l.bias.size
            for net in (self.phi, self.omega, self.theta)
            for l in net.layers
        )


@dataclass
class GradientSet:
    """Gradients mirroring ModelParams; None marks an untouched sub-network."""

    phi: NetGrads | None = None
    omega: NetGrads | None = None
    theta: NetGrads | None = None


# ---------------------------------------------------------------------------
# initialization

def init_dense_net(rng: np.random.Generator, dims: list[int], activations: list[str]) -> DenseNet:
    """He-style uniform fan-in init: W ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), b = 0."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for i, act in enumerate(activations):
        bound = math.sqrt(6.0 / dims[i])
        w = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
        layers.append(DenseLayer(w, np.zeros(dims[i + 1]), act))
    return DenseNet(layers)


def projection_dims(feature_dim: int, n_layers: int) -> list[int]:
    """Output dims of the projection head: hidden at feature width, final at half."""
    if n_layers < 1:
        raise ValueError("projection head needs at least one layer")
    return [feature_dim] * (n_layers - 1) + [max(1, feature_dim // 2)]


def build_model(
    rng: np.random.Generator,
    input_dim: int,
    hidden: list[int],
    num_classes: int,
    proj_layers: int = 3,
) -> ModelParams:
    """Build and initialize a full model; draw order is fixed: phi, omega, theta."""
    if not hidden:
        raise ValueError("feature extractor needs at least one hidden layer")
    phi = init_dense_net(rng, [input_dim] + list(hidden), ["relu"] * len(hidden))
    feat = hidden[-1]
    omega = init_dense_net(rng, [feat, num_classes], ["identity"])
    proj = projection_dims(feat, proj_layers)
    theta = init_dense_net(rng, [feat] + proj, ["relu"] * (len(proj) - 1) + ["identity"])
    return ModelParams(phi, omega, theta)


# ---------------------------------------------------------------------------
# basic ops

def forward_features(phi: DenseNet, x: np.ndarray) -> np.ndarray:
    """Feature extractor forward pass for a batch."""
    return phi.forward(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    p = softmax(logits)
    picked = p[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    logits = params.omega.forward(params.phi.forward(x))
    return logits.argmax(axis=1)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, with epsilon-guarded norms."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("vectors must be non-empty and of equal length")
    return float(cosine_rows(a[None, :], b[None, :])[0])


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1) + NORM_EPS
    nb = np.linalg.norm(b, axis=1) + NORM_EPS
    return (a * b).sum(axis=1) / (na * nb)


def cosine_rows_backward(
    a: np.ndarray, b: np.ndarray, dsim: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of row-wise cosine similarity wrt both argument batches."""
    na = np.linalg.norm(a, axis=1) + NORM_EPS
    nb = np.linalg.norm(b, axis=1) + NORM_EPS
    s = (a * b).sum(axis=1) / (na * nb)
    da = dsim[:, None] * (b / (na * nb)[:, None] - (s / (na * na))[:, None] * a)
    db = dsim[:, None] * (a / (na * nb)[:, None] - (s / (nb * nb))[:, None] * b)
    return da, db


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def pair_contrastive(
    sim_pos: np.ndarray, sim_neg: np.ndarray, tau1: float, tau2: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample two-pair contrastive loss and its gradients wrt both similarities.

    loss = -log(exp(sim_pos/tau1) / (exp(sim_pos/tau1) + exp(sim_neg/tau2)))
         = softplus(sim_neg/tau2 - sim_pos/tau1)
    """
    if tau1 <= 0.0 or tau2 <= 0.0:
        raise ValueError("temperatures must be positive")
    x = np.asarray(sim_neg) / tau2 - np.asarray(sim_pos) / tau1
    losses = np.logaddexp(0.0, x)
    s = _sigmoid(x)
    return losses, -s / tau1, s / tau2


# ---------------------------------------------------------------------------
# contrastive loss on projected features

def contrastive_terms(
    feat_pseudo_local: np.ndarray,
    feat_pseudo_global: np.ndarray,
    feat_real_local: np.ndarray,
    theta: DenseNet,
    tau1: float,
    tau2: float,
    need_theta_grads: bool = True,
    need_feature_grads: bool = True,
) -> tuple[float, NetGrads | None, np.ndarray | None, np.ndarray | None]:
    """Contrastive loss given feature batches, projecting through theta.

    Positive pair: (local pseudo features, global pseudo features); negative
    pair: (local pseudo features, local real features). The projection head is
    shared across all three branches, so its gradient collects all of them.
    Returns (loss, theta grads, grad wrt local pseudo feats, grad wrt real feats).
    """
    z, cz = theta.forward_cached(feat_pseudo_local)
    zg, czg = theta.forward_cached(feat_pseudo_global)
    zr, czr = theta.forward_cached(feat_real_local)
    sim_pos = cosine_rows(z, zg)
    sim_neg = cosine_rows(z, zr)
    per, dpos, dneg = pair_contrastive(sim_pos, sim_neg, tau1, tau2)
    n = per.shape[0]
    loss = float(per.mean())
    dpos = dpos / n
    dneg = dneg / n
    dz_pos, dzg = cosine_rows_backward(z, zg, dpos)
    dz_neg, dzr = cosine_rows_backward(z, zr, dneg)

    g_anchor, d_feat_pseudo = theta.backward(cz, dz_pos + dz_neg)
    g_real, d_feat_real = theta.backward(czr, dzr)
    theta_grads = None
    if need_theta_grads:
        g_global, _ = theta.backward(czg, dzg)
        theta_grads = add_net_grads(add_net_grads(g_anchor, g_real), g_global)
    if not need_feature_grads:
        return loss, theta_grads, None, None
    return loss, theta_grads, d_feat_pseudo, d_feat_real


def raw_contrastive_terms(
    feat_pseudo_local: np.ndarray,
    feat_pseudo_global: np.ndarray,
    feat_real_local: np.ndarray,
    tau1: float,
    tau2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Contrastive loss on raw (unprojected) features; no projection gradients."""
    sim_pos = cosine_rows(feat_pseudo_local, feat_pseudo_global)
    sim_neg = cosine_rows(feat_pseudo_local, feat_real_local)
    per, dpos, dneg = pair_contrastive(sim_pos, sim_neg, tau1, tau2)
    n = per.shape[0]
    loss = float(per.mean())
    d_pos_a, _ = cosine_rows_backward(feat_pseudo_local, feat_pseudo_global, dpos / n)
    d_neg_a, d_real = cosine_rows_backward(feat_pseudo_local, feat_real_local, dneg / n)
    return loss, d_pos_a + d_neg_a, d_real


def contrastive_loss(
    phi_local: DenseNet,
    phi_global: DenseNet,
    theta: DenseNet,
    x_real: np.ndarray,
    x_pseudo: np.ndarray,
    tau1: float,
    tau2: float,
) -> tuple[float, GradientSet]:
    """Contrastive loss over index-paired real/pseudo batches.

    Gradients are returned separately for the projection head (ascended in
    stage one) and the local feature extractor (descended in stage two). The
    global extractor is frozen and receives no gradient.
    """
    x_real = np.asarray(x_real, dtype=np.float64)
    x_pseudo = np.asarray(x_pseudo, dtype=np.float64)
    if x_real.shape[0] != x_pseudo.shape[0]:
        raise ValueError(
            f"real batch ({x_real.shape[0]}) and pseudo batch ({x_pseudo.shape[0]}) "
            "must have equal size"
        )
    h_real, c_real = phi_local.forward_cached(x_real)
    h_pseudo, c_pseudo = phi_local.forward_cached(x_pseudo)
    h_pseudo_global = phi_global.forward(x_pseudo)
    loss, theta_grads, d_hp, d_hr = contrastive_terms(
        h_pseudo, h_pseudo_global, h_real, theta, tau1, tau2
    )
    g_pseudo, _ = phi_local.backward(c_pseudo, d_hp)
    g_real, _ = phi_local.backward(c_real, d_hr)
    return loss, GradientSet(phi=add_net_grads(g_pseudo, g_real), theta=theta_grads)


# ---------------------------------------------------------------------------
# soft output-balancing loss on pseudo-data

def mean_output_terms(logits: np.ndarray, y_bar: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy between the batch-mean softmax output and y_bar, plus grads."""
    p = softmax(logits)
    p_bar = p.mean(axis=0)
    safe = np.maximum(p_bar, LOG_FLOOR)
    loss = float(-(y_bar * np.log(safe)).sum())
    # Clamped coordinates are flat, so their gradient is zero.
    d_bar = np.where(p_bar > LOG_FLOOR, -y_bar / safe, 0.0)
    dp = np.broadcast_to(d_bar / logits.shape[0], p.shape)
    inner = (p * dp).sum(axis=1, keepdims=True)
    return loss, p * (dp - inner)


def augmean_loss(
    model: ModelParams, x_pseudo: np.ndarray, y_bar: np.ndarray
) -> tuple[float, GradientSet]:
    """Loss pushing the mean softmax output on pseudo-data toward the prior y_bar."""
    x_pseudo = np.asarray(x_pseudo, dtype=np.float64)
    if x_pseudo.shape[0] == 0:
        raise ValueError("empty pseudo batch")
    y_bar = np.asarray(y_bar, dtype=np.float64)
    if y_bar.shape != (model.omega.output_dim,):
        raise ValueError("y_bar length must equal the number of classes")
    if abs(float(y_bar.sum()) - 1.0) > 1e-9 or (y_bar < 0).any():
        raise ValueError("y_bar must be a distribution summing to 1")
    h, c_phi = model.phi.forward_cached(x_pseudo)
    logits, c_omega = model.omega.forward_cached(h)
    loss, d_logits = mean_output_terms(logits, y_bar)
    omega_grads, dh = model.omega.backward(c_omega, d_logits)
    phi_grads, _ = model.phi.backward(c_phi, dh)
    return loss, GradientSet(phi=phi_grads, omega=omega_grads)


# ---------------------------------------------------------------------------
# parameter-space utilities

def add_net_grads(a: NetGrads, b: NetGrads, scale: float = 1.0) -> NetGrads:
    return [(aw + scale * bw, ab + scale * bb) for (aw, ab), (bw, bb) in zip(a, b)]


def scale_net_grads(g: NetGrads, scale: float) -> NetGrads:
    return [(scale * w, scale * b) for w, b in g]


def apply_net_grads_(net: DenseNet, grads: NetGrads, step: float) -> None:
    """In-place update W += step * dW per layer (step = -lr for descent)."""
    if len(grads) != len(net.layers):
        raise ValueError("gradient layer count does not match network")
    for layer, (dw, db) in zip(net.layers, grads):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise ValueError("gradient shape does not match parameter shape")
        layer.weight += step * dw
        layer.bias += step * db


def sgd_step(params: ModelParams, grads: GradientSet, lr: float, ascent: bool = False) -> ModelParams:
    """Functional SGD step p' = p -/+ lr * g; None grads leave a sub-network untouched."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    step = lr if ascent else -lr
    out = params.copy()
    for net, g in ((out.phi, grads.phi), (out.omega, grads.omega), (out.theta, grads.theta)):
        if g is not None:
            apply_net_grads_(net, g, step)
    return out


def weighted_average_params(entries: list[tuple[ModelParams, float]]) -> ModelParams:
    """Convex combination of models, reduced in list order for determinism."""
    if not entries:
        raise ValueError("nothing to average")
    weights = [w for _, w in entries]
    if any(w < 0 for w in weights):
        raise ValueError("weights must be non-negative")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1 (got {sum(weights)!r})")
    first = entries[0][0]
    out = first.copy()
    for net in (out.phi, out.omega, out.theta):
        for layer in net.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
    for params, w in entries:
        for net_out, net_in in ((out.phi, params.phi), (out.omega, params.omega), (out.theta, params.theta)):
            if len(net_out.layers) != len(net_in.layers):
                raise ValueError("model structures differ")
            for lo, li in zip(net_out.layers, net_in.layers):
                if lo.weight.shape != li.weight.shape:
                    raise ValueError("model shapes differ")
                lo.weight += w * li.weight
                lo.bias += w * li.bias
    return out


def net_to_vector(net: DenseNet) -> np.ndarray:
    parts = []
    for layer in net.layers:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias.ravel())
    return np.concatenate(parts)


def vector_to_net(template: DenseNet, vec: np.ndarray) -> DenseNet:
    out = template.copy()
    pos = 0
    for layer in out.layers:
        n = layer.weight.size
        layer.weight[:] = vec[pos : pos + n].reshape(layer.weight.shape)
        pos += n
        n = layer.bias.size
        layer.bias[:] = vec[pos : pos + n]
        pos += n
    if pos != vec.size:
        raise ValueError(f"vector length {vec.size} does not match network ({pos})")
    return out


def params_to_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate(
        [net_to_vector(params.phi), net_to_vector(params.omega), net_to_vector(params.theta)]
    )


def vector_to_params(template: ModelParams, vec: np.ndarray) -> ModelParams:
    sizes = [net_to_vector(n).size for n in (template.phi, template.omega, template.theta)]
    if vec.size != sum(sizes):
        raise ValueError(f"vector length {vec.size} does not match model ({sum(sizes)})")
    phi = vector_to_net(template.phi, vec[: sizes[0]])
    omega = vector_to_net(template.omega, vec[sizes[0] : sizes[0] + sizes[1]])
    theta = vector_to_net(template.theta, vec[sizes[0] + sizes[1] :])
    return ModelParams(phi, omega, theta)


def grads_to_vector(template: ModelParams, grads: GradientSet) -> np.ndarray:
    parts = []
    for net, g in ((template.phi, grads.phi), (template.omega, grads.omega), (template.theta, grads.theta)):
        if g is None:
            parts.append(np.zeros(net_to_vector(net).size))
        else:
            for dw, db in g:
                parts.append(dw.ravel())
                parts.append(db.ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(
    loss_fn,
    x0: np.ndarray,
    epsilon: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn maps a flat parameter vector to (loss, gradient vector). When the
    vector is longer than max_coords, a seeded random subset of coordinates is
    checked.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("epsilon must be in (0, 1e-2]")
    x0 = np.asarray(x0, dtype=np.float64)
    _, grad = loss_fn(x0)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x0.shape:
        raise ValueError("gradient shape does not match parameter vector")
    n = x0.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        coords = seed_coords(n, max_coords, seed)
    worst = 0.0
    for i in coords:
        xp = x0.copy()
        xp[i] += epsilon
        xm = x0.copy()
        xm[i] -= epsilon
        fd = (loss_fn(xp)[0] - loss_fn(xm)[0]) / (2.0 * epsilon)
        denom = max(abs(fd), abs(grad[i]), 1e-6)
        worst = max(worst, abs(fd - grad[i]) / denom)
    return worst


def seed_coords(n: int, k: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).choice(n, size=k, replace=False)
