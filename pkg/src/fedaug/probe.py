"""Quantifies how local-only training biases features and classifiers.

Trains one model on a class-restricted slice of a dataset and one on the
full dataset from the same initialization, then measures (a) how often the
restricted model predicts held-out samples from unseen classes into its own
classes, and (b) how feature similarities compare between the two models.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import BatchIterator, LabeledDataset, split_train_test
from .errors import DataError
from .seeding import seed_stream


@dataclass
class ProbeReport:
    classifier_bias: float       # fraction of unseen-class samples predicted into seen classes
    s_cross: float               # mean cos(local(x), global(x)) over seen-class inputs
    s_local: float               # mean cos(local(x1), local(x2)) over cross-side pairs
    histogram: list[int]         # predicted-class counts on the unseen-class side
    class_set: list[int]
    epochs: int
    n_pairs: int
    notes: dict[str, str]


@dataclass
class ProbeArtifacts:
    local_model: nn.ModelParams
    global_model: nn.ModelParams
    x1_held: LabeledDataset
    x2_held: LabeledDataset


def split_by_classes(ds: LabeledDataset, class_set) -> tuple[LabeledDataset, LabeledDataset]:
    """Split into the listed classes and their complement; both must be non-empty."""
    class_set = sorted(set(int(c) for c in class_set))
    if not class_set:
        raise ValueError("class_set must not be empty")
    mask = np.isin(ds.labels, class_set)
    if not mask.any() or mask.all():
        raise ValueError(
            f"class split {class_set} leaves one side empty (classes present: "
            f"{sorted(set(ds.labels.tolist()))})"
        )
    return ds.take(np.flatnonzero(mask)), ds.take(np.flatnonzero(~mask))


def _train(
    params: nn.ModelParams,
    ds: LabeledDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> nn.ModelParams:
    params = params.copy()
    if epochs == 0:
        return params
    batches = BatchIterator(len(ds), batch_size, rng)
    steps_per_epoch = -(-len(ds) // batches.batch_size)
    for _ in range(epochs * steps_per_epoch):
        idx = batches.next_indices()
        h, c_phi = params.phi.forward_cached(ds.features[idx])
        logits, c_omega = params.omega.forward_cached(h)
        _, d_logits = nn.softmax_cross_entropy(logits, ds.labels[idx])
        omega_g, dh = params.omega.backward(c_omega, d_logits)
        phi_g, _ = params.phi.backward(c_phi, dh)
        nn.apply_net_grads_(params.phi, phi_g, -lr)
        nn.apply_net_grads_(params.omega, omega_g, -lr)
    return params


def run_probe(
    ds: LabeledDataset,
    class_set,
    epochs: int,
    lr: float,
    seed: int,
    hidden: tuple[int, ...] = (128, 64),
    batch_size: int = 32,
    holdout: float = 0.2,
    n_pairs: int = 10000,
) -> tuple[ProbeReport, ProbeArtifacts]:
    """Train local (restricted) and global (full-data) models from one seed
    and measure the resulting bias on held-out data."""
    x1, x2 = split_by_classes(ds, class_set)
    x1_train, x1_held = split_train_test(x1, holdout, seed_stream(seed, "probe-split", 0))
    x2_train, x2_held = split_train_test(x2, holdout, seed_stream(seed, "probe-split", 1))

    init = nn.build_model(
        seed_stream(seed, "probe-init"), ds.input_dim, list(hidden), ds.num_classes
    )
    local_model = _train(init, x1_train, epochs, lr, batch_size, seed_stream(seed, "probe-batch", 0))
    union = LabeledDataset(
        np.concatenate([x1_train.features, x2_train.features]),
        np.concatenate([x1_train.labels, x2_train.labels]),
        ds.num_classes,
    )
    global_model = _train(init, union, epochs, lr, batch_size, seed_stream(seed, "probe-batch", 1))

    class_list = sorted(set(int(c) for c in class_set))
    preds = nn.predict(local_model, x2_held.features)
    bias = float(np.isin(preds, class_list).mean())
    histogram = np.bincount(preds, minlength=ds.num_classes).tolist()

    f1_x1 = local_model.phi.forward(x1_held.features)
    fg_x1 = global_model.phi.forward(x1_held.features)
    f1_x2 = local_model.phi.forward(x2_held.features)
    rng = seed_stream(seed, "probe-pairs")
    pick1 = rng.choice(len(x1_held), size=n_pairs, replace=True)
    pick2 = rng.choice(len(x2_held), size=n_pairs, replace=True)
    s_cross = float(nn.cosine_rows(f1_x1[pick1], fg_x1[pick1]).mean())
    s_local = float(nn.cosine_rows(f1_x1[pick1], f1_x2[pick2]).mean())

    report = ProbeReport(
        classifier_bias=bias,
        s_cross=s_cross,
        s_local=s_local,
        histogram=histogram,
        class_set=class_list,
        epochs=epochs,
        n_pairs=n_pairs,
        notes={
            "classifier_bias": "fraction of held-out samples from unseen classes that the "
            "restricted model predicts into its training classes",
            "s_cross": "mean cosine similarity between restricted-model and full-data-model "
            "features of the same seen-class inputs",
            "s_local": "mean cosine similarity between restricted-model features of seen-class "
            "and unseen-class inputs, over the same number of sampled pairs",
            "thresholds": "any pass/fail cutoffs applied to these statistics are desk-scale "
            "operationalizations chosen by this artifact, not externally defined values",
        },
    )
    return report, ProbeArtifacts(local_model, global_model, x1_held, x2_held)


def export_features(phi: nn.DenseNet, ds: LabeledDataset, path: str) -> None:
    """Dump features as CSV: header label,f0..f{d-1}, one row per sample."""
    feats = phi.forward(ds.features) if len(ds) else np.zeros((0, phi.output_dim))
    header = "label," + ",".join(f"f{i}" for i in range(phi.output_dim))
    lines = [header]
    for label, row in zip(ds.labels, feats):
        lines.append(str(int(label)) + "," + ",".join(repr(float(v)) for v in row))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
