"""Full-graph pretraining loop, checkpointing, and embedding export."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .contrastive import (
    AugmentationConfig,
    BilinearDiscriminator,
    LossWeights,
    ProjectionHead,
    augment,
    city_loss,
    compute_importance,
    corrupt_segment_features,
    intra_entity_loss,
    sample_negative_parcels,
    segment_parcel_loss,
    total_loss,
)
from .encoder import EncoderConfig, MapEncoder, full_edge_set
from .graphs import MapGraph

LOSS_NAMES = ("intra_segment", "intra_parcel", "segment_parcel", "city")


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 1000
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    fake_through_hgt: bool = False  # pass corrupted reps through HGT too

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


class PretrainModel(nn.Module):
    """Encoder plus projection heads and the two discriminators."""

    def __init__(self, cfg: TrainConfig, graph: MapGraph):
        super().__init__()
        self.encoder = MapEncoder(cfg.encoder, graph)
        self.segment_head = ProjectionHead(cfg.encoder.dim)
        self.parcel_head = ProjectionHead(cfg.encoder.dim)
        self.sr_discriminator = BilinearDiscriminator(cfg.encoder.dim)
        self.city_discriminator = BilinearDiscriminator(cfg.encoder.dim)
        self.double()


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict
    epoch: int
    rng_state: torch.Tensor
    config: TrainConfig
    loss_history: list[dict]
    graph_signature: dict

    def save(self, path) -> None:
        torch.save({
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "config": dataclasses.asdict(self.config),
            "loss_history": self.loss_history,
            "graph_signature": self.graph_signature,
        }, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        blob = torch.load(path, weights_only=False)
        return cls(
            model_state=blob["model_state"],
            optimizer_state=blob["optimizer_state"],
            epoch=blob["epoch"],
            rng_state=blob["rng_state"],
            config=train_config_from_dict(blob["config"]),
            loss_history=blob["loss_history"],
            graph_signature=blob["graph_signature"],
        )


def train_config_from_dict(d: dict) -> TrainConfig:
    from .contrastive import ViewConfig
    enc = EncoderConfig(**d["encoder"])
    aug = AugmentationConfig(
        view1=ViewConfig(**d["augmentation"]["view1"]),
        view2=ViewConfig(**d["augmentation"]["view2"]),
        p_truncate=d["augmentation"]["p_truncate"])
    lw = LossWeights(**d["loss_weights"])
    rest = {k: v for k, v in d.items()
            if k not in ("encoder", "augmentation", "loss_weights")}
    return TrainConfig(encoder=enc, augmentation=aug, loss_weights=lw, **rest)


def graph_signature(graph: MapGraph) -> dict:
    return {
        "n_segments": graph.n_segments,
        "n_parcels": graph.n_parcels,
        "segment_features": [f.name for f in graph.segment_schema.fields],
        "parcel_features": [f.name for f in graph.parcel_schema.fields],
    }


def fake_parcel_reps(model: PretrainModel, graph: MapGraph,
                     seg_feats: torch.Tensor, par_feats: torch.Tensor,
                     edges: dict, generator: torch.Generator,
                     through_hgt: bool) -> torch.Tensor:
    """Corruption-derived parcel representations for the city objective.

    Segment raw features are row-permuted and re-encoded through the JFE
    stage (and optionally the HGT stack)."""
    enc = model.encoder
    if enc.cfg.use_feature_encoding:
        fake_feats = torch.as_tensor(
            corrupt_segment_features(graph.segment_features, generator),
            dtype=torch.float64)
        hs, hr = enc.joint_feature_encoding(fake_feats, par_feats)
    else:
        perm = torch.randperm(enc.n_segments, generator=generator)
        xs = enc.free_segment[perm]
        xr = enc.free_parcel
        if enc.cfg.use_shape_attention and enc.n_segments:
            xr = enc.shape_attention(xs, xr, enc.assigned_parcel,
                                     enc.sr_distance, enc.sr_angle)
        hs, hr = xs, xr
    if through_hgt:
        for layer in enc.layers:
            hs, hr = layer(hs, hr, edges)
    return hr


def compute_losses(model: PretrainModel, graph: MapGraph, cfg: TrainConfig,
                   generator: torch.Generator,
                   fixed_views: tuple | None = None,
                   fixed_negatives: torch.Tensor | None = None,
                   fixed_fake_perm: bool = False) -> dict[str, torch.Tensor]:
    """One full forward pass: two augmented views plus the clean graph.

    ``fixed_views``/``fixed_negatives`` freeze the stochastic draws so the
    loss becomes a deterministic function of the parameters (used by the
    gradient check).
    """
    seg_feats = torch.as_tensor(graph.segment_features, dtype=torch.float64)
    par_feats = torch.as_tensor(graph.parcel_features, dtype=torch.float64)
    clean_edges = full_edge_set(graph)

    if fixed_views is None:
        importance = compute_importance(model.encoder, graph)
        aug = cfg.augmentation
        view1 = augment(graph, aug.view1, aug.p_truncate, generator, importance)
        view2 = augment(graph, aug.view2, aug.p_truncate, generator, importance)
    else:
        view1, view2 = fixed_views

    components: dict[str, torch.Tensor] = {}
    qs, qr = {}, {}
    for name, view in (("v1", view1), ("v2", view2)):
        hs, hr = model.encoder(
            seg_feats, par_feats, view.edge_tensors_with_sr(graph),
            seg_mask=view.segment_mask, par_mask=view.parcel_mask)
        qs[name] = model.segment_head(hs)
        qr[name] = model.parcel_head(hr)
    tau = cfg.loss_weights.temperature
    components["intra_segment"] = intra_entity_loss(qs["v1"], qs["v2"], tau)
    components["intra_parcel"] = intra_entity_loss(qr["v1"], qr["v2"], tau)

    hc_s, hc_r = model.encoder(seg_feats, par_feats, clean_edges)
    negatives = fixed_negatives if fixed_negatives is not None else \
        sample_negative_parcels(graph.n_parcels, generator)
    components["segment_parcel"] = segment_parcel_loss(
        hc_s, hc_r, model.encoder.assigned_parcel, model.sr_discriminator,
        negatives)
    fake_gen = generator
    if fixed_fake_perm:
        fake_gen = torch.Generator().manual_seed(cfg.seed)
    fake_r = fake_parcel_reps(model, graph, seg_feats, par_feats, clean_edges,
                              fake_gen, cfg.fake_through_hgt)
    components["city"] = city_loss(hc_r, fake_r, model.city_discriminator)
    return components


def pretrain(graph: MapGraph, cfg: TrainConfig,
             resume_from: Checkpoint | None = None,
             metrics_path=None, checkpoint_dir=None) -> Checkpoint:
    """Train the encoder with the fused contrastive objective.

    Single-threaded and deterministic given the seed. Returns the final
    checkpoint; per-epoch loss components are recorded in the checkpoint's
    loss history and optionally in a metrics CSV.
    """
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    model = PretrainModel(cfg, graph)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    start_epoch = 0
    history: list[dict] = []
    if resume_from is not None:
        if resume_from.graph_signature != graph_signature(graph):
            raise TrainingError("checkpoint does not match this graph")
        model.load_state_dict(resume_from.model_state)
        optimizer.load_state_dict(resume_from.optimizer_state)
        torch.set_rng_state(resume_from.rng_state)
        start_epoch = resume_from.epoch
        history = list(resume_from.loss_history)

    generator = torch.default_generator
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        optimizer.zero_grad()
        components = compute_losses(model, graph, cfg, generator)
        for name in LOSS_NAMES:
            if not torch.isfinite(components[name]):
                raise TrainingError(
                    f"non-finite loss component {name!r} at epoch {epoch + 1}")
        loss = total_loss(components, cfg.loss_weights)
        loss.backward()
        optimizer.step()
        record = {name: float(components[name].detach()) for name in LOSS_NAMES}
        record["total"] = float(loss.detach())
        record["epoch"] = epoch + 1
        history.append(record)
        if checkpoint_dir and cfg.checkpoint_every and \
                (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < cfg.epochs:
            _make_checkpoint(model, optimizer, epoch + 1, cfg, history, graph) \
                .save(Path(checkpoint_dir) / f"checkpoint_{epoch + 1:06d}.pt")

    if metrics_path is not None:
        write_metrics(history, metrics_path)
    return _make_checkpoint(model, optimizer, cfg.epochs, cfg, history, graph)


def _make_checkpoint(model, optimizer, epoch, cfg, history, graph) -> Checkpoint:
    return Checkpoint(
        model_state={k: v.clone() for k, v in model.state_dict().items()},
        optimizer_state=optimizer.state_dict(),
        epoch=epoch,
        rng_state=torch.get_rng_state(),
        config=cfg,
        loss_history=[dict(r) for r in history],
        graph_signature=graph_signature(graph),
    )


def write_metrics(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *LOSS_NAMES, "total"])
        for rec in history:
            w.writerow([rec["epoch"]] + [repr(rec[k]) for k in (*LOSS_NAMES, "total")])


def restore_model(checkpoint: Checkpoint, graph: MapGraph) -> PretrainModel:
    if checkpoint.graph_signature != graph_signature(graph):
        raise TrainingError("checkpoint does not match this graph")
    torch.manual_seed(checkpoint.config.seed)
    model = PretrainModel(checkpoint.config, graph)
    model.load_state_dict(checkpoint.model_state)
    model.eval()
    return model


def compute_embeddings(model: PretrainModel, graph: MapGraph) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode forward on the un-augmented graph."""
    model.eval()
    with torch.no_grad():
        hs, hr = model.encoder(
            torch.as_tensor(graph.segment_features, dtype=torch.float64),
            torch.as_tensor(graph.parcel_features, dtype=torch.float64),
            full_edge_set(graph))
    return hs.numpy(), hr.numpy()


def export_embeddings(checkpoint: Checkpoint, graph: MapGraph, path) -> None:
    """Write the embedding table as CSV: entity_type, id, e_0..e_{D-1}."""
    model = restore_model(checkpoint, graph)
    hs, hr = compute_embeddings(model, graph)
    dim = hs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["entity_type", "id"] + [f"e_{i}" for i in range(dim)])
        for i, row in enumerate(hs):
            w.writerow(["segment", i] + [repr(float(v)) for v in row])
        for i, row in enumerate(hr):
            w.writerow(["parcel", i] + [repr(float(v)) for v in row])


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    seg, par = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vec = [float(v) for k, v in row.items() if k.startswith("e_")]
            (seg if row["entity_type"] == "segment" else par).append(
                (int(row["id"]), vec))
    seg.sort()
    par.sort()
    return (np.array([v for _, v in seg]), np.array([v for _, v in par]))


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_group: dict[str, float]


def grad_check(graph: MapGraph, cfg: TrainConfig, step: float = 1e-4,
               entries_per_group: int = 3) -> GradCheckReport:
    """Analytic gradients of the fused loss vs central finite differences.

    Augmentation draws and negative samples are frozen once so the loss is a
    smooth deterministic function of the parameters. Dropout is disabled
    (eval mode) for the same reason.
    """
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    model = PretrainModel(cfg, graph)
    model.eval()
    gen = torch.Generator().manual_seed(cfg.seed)
    importance = compute_importance(model.encoder, graph)
    aug = cfg.augmentation
    views = (augment(graph, aug.view1, aug.p_truncate, gen, importance),
             augment(graph, aug.view2, aug.p_truncate, gen, importance))
    negatives = sample_negative_parcels(graph.n_parcels, gen)

    def loss_value() -> torch.Tensor:
        comps = compute_losses(model, graph, cfg, gen, fixed_views=views,
                               fixed_negatives=negatives, fixed_fake_perm=True)
        return total_loss(comps, cfg.loss_weights)

    model.zero_grad()
    loss_value().backward()

    rng = np.random.default_rng(cfg.seed)
    per_group: dict[str, float] = {}
    for name, param in model.named_parameters():
        grad = param.grad
        flat = param.data.view(-1)
        n = flat.numel()
        idxs = rng.choice(n, size=min(entries_per_group, n), replace=False)
        worst = 0.0
        for idx in idxs:
            idx = int(idx)
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + step
                up = float(loss_value())
                flat[idx] = orig - step
                down = float(loss_value())
                flat[idx] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = float(grad.view(-1)[idx]) if grad is not None else 0.0
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
        per_group[name] = worst
    return GradCheckReport(max(per_group.values(), default=0.0), per_group)
