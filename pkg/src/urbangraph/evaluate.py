"""Frozen-embedding downstream evaluation.

Linear probes only: a multinomial classifier for entity classification,
ridge regression for inflow/outflow, a learned bilinear scorer for OD
counts, and a k-means clustering-consistency study scored with NMI/ARS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.metrics import (
    adjusted_rand_score,
    f1_score,
    normalized_mutual_info_score,
)
from sklearn.model_selection import KFold

from .entities import MapBundle


class EvaluationError(Exception):
    pass


@dataclass
class RegressionMetrics:
    mae: float
    rmse: float

    def __post_init__(self):
        # power-mean inequality; violated only by a bug
        if self.mae > self.rmse + 1e-9:
            raise EvaluationError("MAE exceeded RMSE")


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    fold_metrics: list[dict[str, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "task": self.task, "metrics": self.metrics,
            "fold_metrics": self.fold_metrics, "config": self.config,
        }, indent=2)


def split_trajectories(bundle: MapBundle, ratios=(0.6, 0.2, 0.2)):
    """Chronological train/validation/test split (id order is time order)."""
    n = len(bundle.trajectories)
    a = int(n * ratios[0])
    b = a + int(n * ratios[1])
    ts = bundle.trajectories
    return ts[:a], ts[a:b], ts[b:]


def derive_flow_and_od(trajectories, assigned_parcel: np.ndarray | None,
                       entity_type: str, n_entities: int):
    """Inflow/outflow counts and the OD matrix for a trajectory split.

    Convention: every traversed entity contributes to both its inflow and
    outflow except the endpoints (origin: outflow only, destination: inflow
    only). OD counts use the first and last entity of each trajectory.
    """
    inflow = np.zeros(n_entities)
    outflow = np.zeros(n_entities)
    od = np.zeros((n_entities, n_entities))
    for t in trajectories:
        seq = list(t.segment_ids)
        if entity_type == "parcel":
            mapped = [int(assigned_parcel[s]) for s in seq]
            seq = [p for i, p in enumerate(mapped) if i == 0 or p != mapped[i - 1]]
        if not seq:
            continue
        outflow[seq[0]] += 1
        inflow[seq[-1]] += 1
        for e in seq[1:-1]:
            inflow[e] += 1
            outflow[e] += 1
        od[seq[0], seq[-1]] += 1
    return inflow, outflow, od


def classify(embeddings: np.ndarray, labels: np.ndarray, folds: int = 5,
             seed: int = 0) -> EvalReport:
    """5-fold CV multinomial linear probe; reports micro/macro F1."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise EvaluationError("classification needs at least two classes")
    fold_metrics = []
    for train_idx, test_idx in KFold(folds, shuffle=True, random_state=seed) \
            .split(embeddings):
        clf = LogisticRegression(max_iter=2000)
        clf.fit(embeddings[train_idx], labels[train_idx])
        pred = clf.predict(embeddings[test_idx])
        fold_metrics.append({
            "micro_f1": float(f1_score(labels[test_idx], pred, average="micro")),
            "macro_f1": float(f1_score(labels[test_idx], pred, average="macro")),
        })
    mean = {k: float(np.mean([m[k] for m in fold_metrics])) for k in fold_metrics[0]}
    return EvalReport("classification", mean, fold_metrics,
                      {"folds": folds, "seed": seed})


def predict_flow(embeddings: np.ndarray, inflow: np.ndarray, outflow: np.ndarray,
                 folds: int = 5, seed: int = 0, alpha: float = 1.0) -> EvalReport:
    """Ridge regression per fold; MAE/RMSE averaged over inflow and outflow."""
    if inflow.sum() == 0 and outflow.sum() == 0:
        raise EvaluationError("flow targets are empty; no trajectories in split")
    fold_metrics = []
    for train_idx, test_idx in KFold(folds, shuffle=True, random_state=seed) \
            .split(embeddings):
        errs = []
        for target in (inflow, outflow):
            model = Ridge(alpha=alpha)
            model.fit(embeddings[train_idx], target[train_idx])
            errs.append(model.predict(embeddings[test_idx]) - target[test_idx])
        err = np.concatenate(errs)
        m = RegressionMetrics(float(np.abs(err).mean()),
                              float(np.sqrt((err**2).mean())))
        fold_metrics.append({"mae": m.mae, "rmse": m.rmse})
    mean = {k: float(np.mean([m[k] for m in fold_metrics])) for k in fold_metrics[0]}
    return EvalReport("flow_prediction", mean, fold_metrics,
                      {"folds": folds, "seed": seed, "alpha": alpha})


def fit_bilinear(emb_src: np.ndarray, emb_dst: np.ndarray, targets: np.ndarray,
                 pairs: np.ndarray, steps: int = 500, lr: float = 0.01,
                 seed: int = 0) -> np.ndarray:
    """Fit W of score(i, j) = h_i^T W h_j by Adam on squared error."""
    torch.manual_seed(seed)
    hs = torch.as_tensor(emb_src, dtype=torch.float64)
    hd = torch.as_tensor(emb_dst, dtype=torch.float64)
    y = torch.as_tensor(targets, dtype=torch.float64)
    src = torch.as_tensor(pairs[:, 0], dtype=torch.long)
    dst = torch.as_tensor(pairs[:, 1], dtype=torch.long)
    w = torch.zeros(hs.shape[1], hd.shape[1], dtype=torch.float64,
                    requires_grad=True)
    opt = torch.optim.Adam([w], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        pred = ((hs[src] @ w) * hd[dst]).sum(dim=1)
        loss = ((pred - y) ** 2).mean()
        loss.backward()
        opt.step()
    return w.detach().numpy()


def bilinear_scores(emb_src, emb_dst, w, pairs):
    return ((emb_src[pairs[:, 0]] @ w) * emb_dst[pairs[:, 1]]).sum(axis=1)


def predict_od(embeddings: np.ndarray, od: np.ndarray, folds: int = 5,
               seed: int = 0, steps: int = 500) -> EvalReport:
    """Bilinear OD probe over observed (origin, destination) pairs."""
    pairs = np.argwhere(od > 0)
    if len(pairs) == 0:
        raise EvaluationError("OD matrix is empty")
    targets = od[pairs[:, 0], pairs[:, 1]]
    folds = min(folds, len(pairs))
    if folds < 2:
        raise EvaluationError("too few OD pairs for cross-validation")
    fold_metrics = []
    for train_idx, test_idx in KFold(folds, shuffle=True, random_state=seed) \
            .split(pairs):
        w = fit_bilinear(embeddings, embeddings, targets[train_idx],
                         pairs[train_idx], steps=steps, seed=seed)
        err = bilinear_scores(embeddings, embeddings, w, pairs[test_idx]) \
            - targets[test_idx]
        m = RegressionMetrics(float(np.abs(err).mean()),
                              float(np.sqrt((err**2).mean())))
        fold_metrics.append({"mae": m.mae, "rmse": m.rmse})
    mean = {k: float(np.mean([m[k] for m in fold_metrics])) for k in fold_metrics[0]}
    return EvalReport("od_prediction", mean, fold_metrics,
                      {"folds": folds, "seed": seed, "steps": steps})


def cluster_consistency(segment_embeddings: np.ndarray,
                        parcel_embeddings: np.ndarray,
                        assigned_parcel: np.ndarray, k: int = 5,
                        seed: int = 0, n_restarts: int = 10) -> tuple[float, float]:
    """NMI/ARS between segment clusters and parcel-induced segment clusters.

    Parcels are clustered with k-means; each segment inherits its assigned
    parcel's cluster as the ideal labeling, compared against k-means run
    directly on the segment embeddings.
    """
    if k < 2:
        raise EvaluationError("k must be >= 2")
    if len(segment_embeddings) < k or len(parcel_embeddings) < k:
        raise EvaluationError("fewer entities than clusters")
    seg_labels = KMeans(n_clusters=k, n_init=n_restarts, random_state=seed) \
        .fit_predict(segment_embeddings)
    par_labels = KMeans(n_clusters=k, n_init=n_restarts, random_state=seed) \
        .fit_predict(parcel_embeddings)
    ideal = par_labels[assigned_parcel]
    return (float(normalized_mutual_info_score(seg_labels, ideal)),
            float(adjusted_rand_score(seg_labels, ideal)))
