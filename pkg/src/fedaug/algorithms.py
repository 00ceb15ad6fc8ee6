"""Per-client local update rules for one communication round.

Every rule takes the broadcast global model, runs local mini-batch SGD steps
on its own objective, and returns the updated parameters plus a loss trace.
All rules share the same real-batch schedule, so variants with their extra
terms switched off reproduce plain FedAvg exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import BatchIterator, LabeledDataset, PseudoDataset, sample_pseudo_batch

ALGORITHM_KINDS = (
    "fedavg",
    "fedprox",
    "scaffold",
    "fedmix",
    "moon",
    "augmean",
    "augca",
    "fedaug",
)

# Algorithms whose local objective consumes the shared pseudo pool.
PSEUDO_KINDS = ("fedmix", "augmean", "augca", "fedaug")


@dataclass
class AlgorithmSpec:
    """Which local-update rule clients run, plus its hyperparameters."""

    kind: str = "fedavg"
    mu: float = 1.0            # weight of the output-balancing loss
    lam: float = 1.0           # weight of the contrastive loss
    tau1: float = 0.5
    tau2: float = 0.5
    mu_prox: float = 0.01
    mu_moon: float = 1.0
    tau_moon: float = 0.5
    lam_mix: float = 0.2
    use_projection: bool = True
    theta_lr: float = 0.0      # 0 means: use the schedule learning rate

    def validate(self) -> None:
        if self.kind not in ALGORITHM_KINDS:
            raise ValueError(f"unknown algorithm kind {self.kind!r}")
        for name in ("mu", "lam", "mu_prox", "mu_moon", "theta_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("tau1", "tau2", "tau_moon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.lam_mix <= 1.0:
            raise ValueError("lam_mix must lie in [0, 1]")

    def uses_pseudo(self) -> bool:
        return self.kind in PSEUDO_KINDS

    def projection_layers(self) -> int:
        return 2 if self.kind == "moon" else 3


@dataclass
class LocalResult:
    params: nn.ModelParams
    delta_c: np.ndarray | None
    loss_trace: list[float]


@dataclass
class ClientContext:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset


def _classification_grads(
    params: nn.ModelParams, x: np.ndarray, y: np.ndarray
) -> tuple[float, nn.NetGrads, nn.NetGrads, np.ndarray, list]:
    """Cross-entropy loss/grads plus the feature cache for extra loss terms."""
    h, c_phi = params.phi.forward_cached(x)
    logits, c_omega = params.omega.forward_cached(h)
    loss, d_logits = nn.softmax_cross_entropy(logits, y)
    omega_grads, dh = params.omega.backward(c_omega, d_logits)
    phi_grads, _ = params.phi.backward(c_phi, dh)
    return loss, phi_grads, omega_grads, dh, c_phi


def local_update_fedavg(
    ctx: ClientContext,
    global_params: nn.ModelParams,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> LocalResult:
    """Plain local SGD on the classification loss."""
    return local_update_fedprox(ctx, global_params, steps, lr, batch_size, rng, mu_prox=0.0)


def local_update_fedprox(
    ctx: ClientContext,
    global_params: nn.ModelParams,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    mu_prox: float,
) -> LocalResult:
    """Local SGD with a proximal pull toward the round-start global model.

    With mu_prox = 0 the proximal term is skipped entirely, making the run
    bitwise identical to FedAvg on the same seed.
    """
    if mu_prox < 0:
        raise ValueError("mu_prox must be non-negative")
    params = global_params.copy()
    batches = BatchIterator(len(ctx.train), batch_size, rng)
    trace: list[float] = []
    for _ in range(steps):
        idx = batches.next_indices()
        x, y = ctx.train.features[idx], ctx.train.labels[idx]
        loss, phi_g, omega_g, _, _ = _classification_grads(params, x, y)
        if mu_prox > 0:
            penalty = 0.0
            for net, net0 in ((params.phi, global_params.phi), (params.omega, global_params.omega)):
                for layer, layer0 in zip(net.layers, net0.layers):
                    dw = layer.weight - layer0.weight
                    db = layer.bias - layer0.bias
                    penalty += float((dw * dw).sum() + (db * db).sum())
            phi_g = [
                (dw + mu_prox * (l.weight - l0.weight), db + mu_prox * (l.bias - l0.bias))
                for (dw, db), l, l0 in zip(phi_g, params.phi.layers, global_params.phi.layers)
            ]
            omega_g = [
                (dw + mu_prox * (l.weight - l0.weight), db + mu_prox * (l.bias - l0.bias))
                for (dw, db), l, l0 in zip(omega_g, params.omega.layers, global_params.omega.layers)
            ]
            loss += 0.5 * mu_prox * penalty
        nn.apply_net_grads_(params.phi, phi_g, -lr)
        nn.apply_net_grads_(params.omega, omega_g, -lr)
        trace.append(loss)
    return LocalResult(params, None, trace)


def local_update_scaffold(
    ctx: ClientContext,
    global_params: nn.ModelParams,
    c: np.ndarray,
    c_i: np.ndarray,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> LocalResult:
    """Variance-reduced local SGD: step direction g - c_i + c, then
    c_i <- c_i - c + (w_global - w_local) / (steps * lr)."""
    params = global_params.copy()
    w0 = nn.params_to_vector(global_params)
    correction = c - c_i
    batches = BatchIterator(len(ctx.train), batch_size, rng)
    trace: list[float] = []
    for _ in range(steps):
        idx = batches.next_indices()
        x, y = ctx.train.features[idx], ctx.train.labels[idx]
        loss, phi_g, omega_g, _, _ = _classification_grads(params, x, y)
        gv = nn.grads_to_vector(params, nn.GradientSet(phi=phi_g, omega=omega_g))
        wv = nn.params_to_vector(params) - lr * (gv + correction)
        params = nn.vector_to_params(params, wv)
        trace.append(loss)
    if lr > 0 and steps > 0:
        new_c_i = c_i - c + (w0 - nn.params_to_vector(params)) / (steps * lr)
    else:
        new_c_i = c_i
    return LocalResult(params, new_c_i - c_i, trace)


def local_update_fedmix(
    ctx: ClientContext,
    pseudo: PseudoDataset,
    global_params: nn.ModelParams,
    steps: int,
    lr: float,
    batch_size: int,
    lam_mix: float,
    rng: np.random.Generator,
    rng_pseudo: np.random.Generator,
) -> LocalResult:
    """Input-mixing with the shared pseudo pool: train on
    (1-lam)*x + lam*x_pseudo with the real label, loss weighted by (1-lam)."""
    if not 0.0 <= lam_mix <= 1.0:
        raise ValueError("lam_mix must lie in [0, 1]")
    params = global_params.copy()
    batches = BatchIterator(len(ctx.train), batch_size, rng)
    trace: list[float] = []
    for _ in range(steps):
        idx = batches.next_indices()
        x, y = ctx.train.features[idx], ctx.train.labels[idx]
        if lam_mix > 0:
            x_a = sample_pseudo_batch(pseudo, idx.size, rng_pseudo)
            x = (1.0 - lam_mix) * x + lam_mix * x_a
        loss, phi_g, omega_g, _, _ = _classification_grads(params, x, y)
        if lam_mix > 0:
            loss *= 1.0 - lam_mix
            phi_g = nn.scale_net_grads(phi_g, 1.0 - lam_mix)
            omega_g = nn.scale_net_grads(omega_g, 1.0 - lam_mix)
        nn.apply_net_grads_(params.phi, phi_g, -lr)
        nn.apply_net_grads_(params.omega, omega_g, -lr)
        trace.append(loss)
    return LocalResult(params, None, trace)


def moon_contrastive_terms(
    params: nn.ModelParams,
    global_params: nn.ModelParams,
    prev_params: nn.ModelParams,
    x: np.ndarray,
    h: np.ndarray,
    c_phi: list,
    tau: float,
) -> tuple[float, nn.NetGrads, nn.NetGrads]:
    """Model-contrastive loss on real data: pull projected features toward the
    global model's, push away from the previous local model's. Returns the
    loss and gradients for the local projection head and feature extractor."""
    z, c_theta = params.theta.forward_cached(h)
    z_glob = global_params.theta.forward(global_params.phi.forward(x))
    z_prev = prev_params.theta.forward(prev_params.phi.forward(x))
    sim_pos = nn.cosine_rows(z, z_glob)
    sim_neg = nn.cosine_rows(z, z_prev)
    per, dpos, dneg = nn.pair_contrastive(sim_pos, sim_neg, tau, tau)
    n = per.shape[0]
    loss = float(per.mean())
    dz_pos, _ = nn.cosine_rows_backward(z, z_glob, dpos / n)
    dz_neg, _ = nn.cosine_rows_backward(z, z_prev, dneg / n)
    theta_grads, dh = params.theta.backward(c_theta, dz_pos + dz_neg)
    phi_grads, _ = params.phi.backward(c_phi, dh)
    return loss, theta_grads, phi_grads


def local_update_moon(
    ctx: ClientContext,
    global_params: nn.ModelParams,
    prev_params: nn.ModelParams,
    steps: int,
    lr: float,
    batch_size: int,
    mu_moon: float,
    tau: float,
    rng: np.random.Generator,
) -> LocalResult:
    """Classification loss plus mu_moon times the model-contrastive loss."""
    params = global_params.copy()
    batches = BatchIterator(len(ctx.train), batch_size, rng)
    trace: list[float] = []
    for _ in range(steps):
        idx = batches.next_indices()
        x, y = ctx.train.features[idx], ctx.train.labels[idx]
        loss, phi_g, omega_g, _, c_phi = _classification_grads(params, x, y)
        if mu_moon > 0:
            h = params.phi.forward(x)
            l_con, theta_g, phi_con = moon_contrastive_terms(
                params, global_params, prev_params, x, h, c_phi, tau
            )
            loss += mu_moon * l_con
            phi_g = nn.add_net_grads(phi_g, phi_con, mu_moon)
            nn.apply_net_grads_(params.theta, theta_g, -lr * mu_moon)
        nn.apply_net_grads_(params.phi, phi_g, -lr)
        nn.apply_net_grads_(params.omega, omega_g, -lr)
        trace.append(loss)
    return LocalResult(params, None, trace)


# ---------------------------------------------------------------------------
# the unified two-stage rule

def _stage1_projection_ascent(
    params: nn.ModelParams,
    h_pseudo: np.ndarray,
    h_pseudo_global: np.ndarray,
    h_real: np.ndarray,
    theta_lr: float,
    tau1: float,
    tau2: float,
) -> float:
    """Train the projection head to expose the bias: gradient ascent on the
    contrastive loss, touching only theta."""
    loss, theta_grads, _, _ = nn.contrastive_terms(
        h_pseudo, h_pseudo_global, h_real, params.theta,
        tau1, tau2, need_theta_grads=True, need_feature_grads=False,
    )
    nn.apply_net_grads_(params.theta, theta_grads, theta_lr)
    return loss


def _stage2_model_descent(
    params: nn.ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    h_real_cache: tuple[np.ndarray, list],
    h_pseudo_cache: tuple[np.ndarray, list],
    h_pseudo_global: np.ndarray,
    lr: float,
    lam: float,
    mu: float,
    tau1: float,
    tau2: float,
    y_bar: np.ndarray,
    use_projection: bool,
) -> float:
    """Descend the feature extractor and classifier on the combined objective
    (classification + lam * contrastive + mu * output balancing) with the
    projection head frozen."""
    h_real, c_real = h_real_cache
    h_pseudo, c_pseudo = h_pseudo_cache
    logits, c_omega = params.omega.forward_cached(h_real)
    loss_c, d_logits = nn.softmax_cross_entropy(logits, y)
    omega_g, dh_real = params.omega.backward(c_omega, d_logits)

    dh_pseudo = None
    loss_r = 0.0
    if lam > 0:
        if use_projection:
            loss_r, _, d_hp, d_hr = nn.contrastive_terms(
                h_pseudo, h_pseudo_global, h_real, params.theta,
                tau1, tau2, need_theta_grads=False, need_feature_grads=True,
            )
        else:
            loss_r, d_hp, d_hr = nn.raw_contrastive_terms(
                h_pseudo, h_pseudo_global, h_real, tau1, tau2
            )
        dh_real = dh_real + lam * d_hr
        dh_pseudo = lam * d_hp

    loss_m = 0.0
    if mu > 0:
        logits_a, c_omega_a = params.omega.forward_cached(h_pseudo)
        loss_m, d_logits_a = nn.mean_output_terms(logits_a, y_bar)
        omega_g_a, dh_a = params.omega.backward(c_omega_a, d_logits_a)
        omega_g = nn.add_net_grads(omega_g, omega_g_a, mu)
        dh_pseudo = mu * dh_a if dh_pseudo is None else dh_pseudo + mu * dh_a

    phi_g, _ = params.phi.backward(c_real, dh_real)
    if dh_pseudo is not None:
        phi_pseudo, _ = params.phi.backward(c_pseudo, dh_pseudo)
        phi_g = nn.add_net_grads(phi_g, phi_pseudo)
    nn.apply_net_grads_(params.phi, phi_g, -lr)
    nn.apply_net_grads_(params.omega, omega_g, -lr)
    return loss_c + lam * loss_r + mu * loss_m


def fedaug_local(
    ctx: ClientContext,
    pseudo: PseudoDataset,
    global_params: nn.ModelParams,
    steps: int,
    lr: float,
    theta_lr: float,
    batch_size: int,
    lam: float,
    mu: float,
    tau1: float,
    tau2: float,
    y_bar: np.ndarray,
    rng: np.random.Generator,
    rng_pseudo: np.random.Generator,
    train_projection: bool = True,
    use_projection: bool = True,
) -> LocalResult:
    """Two-stage local updates on paired real/pseudo mini-batches.

    Per step: stage one ascends only the projection head on the contrastive
    loss; stage two descends only the feature extractor and classifier on the
    combined objective with the projection frozen. The feature extractor of
    the broadcast global model stays frozen for the whole round.
    """
    params = global_params.copy()
    phi_global = global_params.phi
    batches = BatchIterator(len(ctx.train), batch_size, rng)
    trace: list[float] = []
    for _ in range(steps):
        idx = batches.next_indices()
        x, y = ctx.train.features[idx], ctx.train.labels[idx]
        x_a = sample_pseudo_batch(pseudo, idx.size, rng_pseudo)
        h_real, c_real = params.phi.forward_cached(x)
        h_pseudo, c_pseudo = params.phi.forward_cached(x_a)
        h_pseudo_global = phi_global.forward(x_a)
        if train_projection and use_projection:
            _stage1_projection_ascent(
                params, h_pseudo, h_pseudo_global, h_real, theta_lr, tau1, tau2
            )
        loss = _stage2_model_descent(
            params, x, y, (h_real, c_real), (h_pseudo, c_pseudo), h_pseudo_global,
            lr, lam, mu, tau1, tau2, y_bar, use_projection,
        )
        trace.append(loss)
    return LocalResult(params, None, trace)


def augca_no_adversarial(
    ctx: ClientContext,
    pseudo: PseudoDataset,
    global_params: nn.ModelParams,
    steps: int,
    lr: float,
    batch_size: int,
    lam: float,
    tau1: float,
    tau2: float,
    rng: np.random.Generator,
    rng_pseudo: np.random.Generator,
) -> LocalResult:
    """Ablation: contrastive alignment on raw features, no projection training."""
    y_bar = np.full(ctx.train.num_classes, 1.0 / ctx.train.num_classes)
    return fedaug_local(
        ctx, pseudo, global_params, steps, lr, 0.0, batch_size,
        lam, 0.0, tau1, tau2, y_bar, rng, rng_pseudo,
        train_projection=False, use_projection=False,
    )
