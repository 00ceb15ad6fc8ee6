"""Round orchestration: broadcast, local updates, weighted aggregation, eval.

Clients within a round are independent given the broadcast snapshot; the
aggregation reduces in client-index order, so a parallel execution would
produce the same result as this sequential one.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import algorithms as alg_mod
from . import nn
from .algorithms import AlgorithmSpec, ClientContext, LocalResult
from .config import RunConfig, config_to_dict
from .data import (
    LabeledDataset,
    PartitionSpec,
    PseudoDataset,
    build_pseudo_data,
    lda_partition,
    load_idx,
    rotate_images,
    split_train_test,
    synthetic_blobs,
)
from .errors import ConfigError, DataError
from .metrics import RoundMetrics, RunReport, build_summary
from .seeding import seed_stream

ROTATION_STEP_DEGREES = 15.0
ROTATION_ENVIRONMENTS = 6


@dataclass
class RoundState:
    t: int
    params: nn.ModelParams
    weights: np.ndarray
    c: np.ndarray | None = None                    # server control variate
    c_i: list[np.ndarray] | None = None            # per-client control variates
    moon_prev: list[nn.ModelParams] | None = None  # per-client previous local models
    mean_train_loss: float = float("nan")


def load_base_dataset(cfg: RunConfig) -> LabeledDataset:
    d = cfg.dataset
    seed = cfg.schedule.seed
    if d.kind == "synthetic":
        ds = synthetic_blobs(d.n_per_class, d.classes, d.input_dim, d.spread, seed)
    else:
        for path in (d.images, d.labels):
            if not path:
                raise ConfigError(f"dataset.kind={d.kind} requires dataset.images and dataset.labels")
            if not os.path.exists(path):
                raise DataError(f"dataset file not found: {path}")
        ds = load_idx(d.images, d.labels)
    if d.subset and d.subset < len(ds):
        rng = seed_stream(seed, "subset")
        ds = ds.take(rng.choice(len(ds), size=d.subset, replace=False))
    return ds


def build_clients(cfg: RunConfig, ds: LabeledDataset) -> tuple[list[ClientContext], np.ndarray]:
    """Partition, per-client rotation for the rotated kind, then train/test split."""
    seed = cfg.schedule.seed
    parts = lda_partition(ds, PartitionSpec(cfg.partition.clients, cfg.partition.alpha, seed))
    if cfg.dataset.kind == "rotated_mnist":
        parts = [
            rotate_images(p, (i % ROTATION_ENVIRONMENTS) * ROTATION_STEP_DEGREES)
            for i, p in enumerate(parts)
        ]
    contexts = []
    for i, part in enumerate(parts):
        if len(part) < 2:
            raise DataError(f"client {i} received only {len(part)} sample(s); cannot split")
        train, test = split_train_test(part, cfg.partition.test_fraction, seed_stream(seed, "split", i))
        contexts.append(ClientContext(i, train, test))
    sizes = np.array([len(c.train) for c in contexts], dtype=np.float64)
    return contexts, sizes / sizes.sum()


def build_pseudo_pool(cfg: RunConfig, clients: list[ClientContext]) -> PseudoDataset | None:
    if not cfg.algorithm.uses_pseudo():
        return None
    m = cfg.dataset.pseudo_m
    k = cfg.dataset.pseudo_k
    largest_batch = max(min(cfg.schedule.batch_size, len(c.train)) for c in clients)
    if k == 0:
        mean_size = sum(len(c.train) for c in clients) / len(clients)
        k = max(1, math.ceil(mean_size / m), math.ceil(largest_batch / len(clients)))
    trains = [c.train for c in clients]
    try:
        pool = build_pseudo_data(trains, k, m, cfg.schedule.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if largest_batch > len(pool):
        raise ConfigError(
            f"pseudo pool ({len(pool)}) is smaller than the largest batch ({largest_batch}); "
            "raise dataset.pseudo_k"
        )
    return pool


def init_model(cfg: RunConfig, input_dim: int, num_classes: int) -> nn.ModelParams:
    rng = seed_stream(cfg.schedule.seed, "init")
    return nn.build_model(
        rng, input_dim, list(cfg.model.hidden), num_classes,
        proj_layers=cfg.algorithm.projection_layers(),
    )


def init_state(params: nn.ModelParams, weights: np.ndarray, spec: AlgorithmSpec) -> RoundState:
    state = RoundState(t=0, params=params, weights=weights)
    if spec.kind == "scaffold":
        dim = nn.params_to_vector(params).size
        state.c = np.zeros(dim)
        state.c_i = [np.zeros(dim) for _ in range(weights.size)]
    if spec.kind == "moon":
        state.moon_prev = [params.copy() for _ in range(weights.size)]
    return state


def _run_client(
    ctx: ClientContext,
    state: RoundState,
    pseudo: PseudoDataset | None,
    spec: AlgorithmSpec,
    cfg: RunConfig,
    t: int,
) -> LocalResult:
    sched = cfg.schedule
    rng = seed_stream(sched.seed, "batch", t, ctx.client_id)
    rng_pseudo = seed_stream(sched.seed, "pseudo", t, ctx.client_id)
    theta_lr = spec.theta_lr if spec.theta_lr > 0 else sched.lr
    common = (ctx, state.params, sched.local_steps, sched.lr, sched.batch_size)
    if spec.kind == "fedavg":
        return alg_mod.local_update_fedavg(*common, rng)
    if spec.kind == "fedprox":
        return alg_mod.local_update_fedprox(*common, rng, mu_prox=spec.mu_prox)
    if spec.kind == "scaffold":
        return alg_mod.local_update_scaffold(
            ctx, state.params, state.c, state.c_i[ctx.client_id],
            sched.local_steps, sched.lr, sched.batch_size, rng,
        )
    if spec.kind == "fedmix":
        return alg_mod.local_update_fedmix(
            ctx, pseudo, state.params, sched.local_steps, sched.lr,
            sched.batch_size, spec.lam_mix, rng, rng_pseudo,
        )
    if spec.kind == "moon":
        return alg_mod.local_update_moon(
            ctx, state.params, state.moon_prev[ctx.client_id],
            sched.local_steps, sched.lr, sched.batch_size,
            spec.mu_moon, spec.tau_moon, rng,
        )
    num_classes = ctx.train.num_classes
    y_bar = np.full(num_classes, 1.0 / num_classes)
    lam = spec.lam
    mu = spec.mu
    train_projection = spec.use_projection
    if spec.kind == "augmean":
        lam, train_projection = 0.0, False
    elif spec.kind == "augca":
        mu = 0.0
    return alg_mod.fedaug_local(
        ctx, pseudo, state.params, sched.local_steps, sched.lr, theta_lr,
        sched.batch_size, lam, mu, spec.tau1, spec.tau2, y_bar, rng, rng_pseudo,
        train_projection=train_projection, use_projection=spec.use_projection,
    )


def run_round(
    state: RoundState,
    clients: list[ClientContext],
    pseudo: PseudoDataset | None,
    spec: AlgorithmSpec,
    cfg: RunConfig,
) -> RoundState:
    """One communication round: local updates on the broadcast snapshot, then
    the weighted average of everything the clients send back (projection head
    included)."""
    t = state.t + 1
    results: list[LocalResult] = []
    for ctx in clients:
        try:
            results.append(_run_client(ctx, state, pseudo, spec, cfg, t))
        except Exception as exc:
            raise RuntimeError(f"round {t}: client {ctx.client_id} failed: {exc}") from exc
    weights = state.weights
    new_params = nn.weighted_average_params(
        [(res.params, float(w)) for res, w in zip(results, weights)]
    )
    new_state = RoundState(t=t, params=new_params, weights=weights)
    if spec.kind == "scaffold":
        new_state.c_i = [
            ci + res.delta_c for ci, res in zip(state.c_i, results)
        ]
        delta = np.zeros_like(state.c)
        for w, res in zip(weights, results):
            delta += w * res.delta_c
        new_state.c = state.c + delta
    if spec.kind == "moon":
        new_state.moon_prev = [res.params for res in results]
    new_state.mean_train_loss = float(
        sum(w * (sum(res.loss_trace) / len(res.loss_trace)) for w, res in zip(weights, results))
    )
    return new_state


def evaluate_global(
    params: nn.ModelParams, clients: list[ClientContext]
) -> tuple[np.ndarray, float]:
    """Per-client test accuracy and the test-size-weighted mean."""
    accs = []
    sizes = []
    for ctx in clients:
        if len(ctx.test) == 0:
            raise ConfigError(f"client {ctx.client_id} has an empty test split")
        preds = nn.predict(params, ctx.test.features)
        accs.append(float((preds == ctx.test.labels).mean()))
        sizes.append(len(ctx.test))
    accs = np.asarray(accs)
    sizes = np.asarray(sizes, dtype=np.float64)
    return accs, float((accs * sizes).sum() / sizes.sum())


def run_simulation(cfg: RunConfig) -> RunReport:
    """Run the configured experiment end to end; deterministic per seed."""
    start = time.perf_counter()
    spec = cfg.algorithm
    spec.validate()
    ds = load_base_dataset(cfg)
    clients, weights = build_clients(cfg, ds)
    pseudo = build_pseudo_pool(cfg, clients)
    params = init_model(cfg, ds.input_dim, ds.num_classes)
    state = init_state(params, weights, spec)

    rounds: list[RoundMetrics] = []

    def record(t: int, mean_train_loss: float) -> None:
        accs, mean_acc = evaluate_global(state.params, clients)
        rounds.append(
            RoundMetrics(
                t=t,
                client_accs=[float(a) for a in accs],
                mean_acc=mean_acc,
                worst_acc=float(accs.min()),
                mean_train_loss=mean_train_loss,
            )
        )

    total = cfg.schedule.rounds
    if total == 0:
        record(0, float("nan"))
    for t in range(1, total + 1):
        state = run_round(state, clients, pseudo, spec, cfg)
        if t % cfg.schedule.eval_every == 0 or t == total:
            record(t, state.mean_train_loss)

    summary = build_summary(rounds, cfg.output.threshold_acc, cfg.output.threshold_worst)
    return RunReport(
        config=config_to_dict(cfg),
        rounds=rounds,
        summary=summary,
        duration_sec=time.perf_counter() - start,
    )
