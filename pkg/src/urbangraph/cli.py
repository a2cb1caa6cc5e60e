"""Command-line orchestration: synth | build-graph | pretrain | export |
evaluate | ablate | pipeline."""

from __future__ import annotations

import dataclasses
import json
import sys
import typing
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import evaluate as ev
from .contrastive import AugmentationConfig, ViewConfig
from .entities import BundleLoadError, BundleValidationError, load_bundle, save_bundle
from .graphs import GraphAssemblyError, GraphConfig, assemble_graph, load_graph, save_graph
from .synth import SynthSpec, generate_synthetic_city
from .train import (
    Checkpoint,
    TrainConfig,
    export_embeddings,
    load_embeddings,
    pretrain,
)

EXIT_VALIDATION = 2
EXIT_RUNTIME = 1

_VALIDATION_ERRORS = (BundleLoadError, BundleValidationError, GraphAssemblyError,
                      ValueError, KeyError, TypeError)


class ConfigError(Exception):
    pass


def dataclass_from_dict(cls, data: dict):
    """Strict dataclass construction: unknown keys are rejected, nested
    dataclass fields recurse."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints.get(f.name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = dataclass_from_dict(hint, value)
        elif hint is tuple or typing.get_origin(hint) is tuple:
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def apply_overrides(data: dict, overrides: tuple[str, ...]) -> dict:
    """Apply ``a.b.c=value`` overrides (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return data


def load_config_file(path, overrides=()) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    return apply_overrides(data, tuple(overrides))


def _fail(exc: Exception) -> "typing.NoReturn":
    click.echo(f"error: {exc}", err=True)
    code = EXIT_VALIDATION if isinstance(exc, (ConfigError, *_VALIDATION_ERRORS)) \
        else EXIT_RUNTIME
    sys.exit(code)


@click.group()
def main():
    """Joint road-segment / land-parcel representation learning pipeline."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--override", multiple=True, help="key=value config override")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def synth(config_path, override, seed, out_dir):
    """Generate a synthetic city bundle."""
    try:
        data = load_config_file(config_path, override).get("synth", {}) \
            if config_path else apply_overrides({}, override).get("synth", {})
        if seed is not None:
            data["seed"] = seed
        spec = dataclass_from_dict(SynthSpec, data)
        bundle = generate_synthetic_city(spec)
        save_bundle(bundle, out_dir)
        (Path(out_dir) / "synth_spec.json").write_text(
            json.dumps(dataclasses.asdict(spec), indent=2), encoding="utf-8")
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _fail(exc)
    click.echo(f"wrote bundle to {out_dir}")


@main.command("build-graph")
@click.argument("bundle_dir", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--override", multiple=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def build_graph(bundle_dir, config_path, override, out_dir):
    """Assemble the heterogeneous graph from a bundle directory."""
    try:
        data = load_config_file(config_path, override).get("graph", {})
        cfg = dataclass_from_dict(GraphConfig, data)
        graph = assemble_graph(load_bundle(bundle_dir), cfg)
        content_hash = save_graph(graph, out_dir)
    except Exception as exc:
        _fail(exc)
    click.echo(f"wrote graph to {out_dir} (hash {content_hash[:12]})")


def _train_config(config_path, override, seed) -> TrainConfig:
    data = load_config_file(config_path, override).get("train", {})
    if seed is not None:
        data["seed"] = seed
    return dataclass_from_dict(TrainConfig, data)


@main.command("pretrain")
@click.argument("graph_dir", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--override", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def pretrain_cmd(graph_dir, config_path, override, seed, out_dir):
    """Pretrain the encoder on a built graph."""
    try:
        cfg = _train_config(config_path, override, seed)
        graph = load_graph(graph_dir)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint = pretrain(graph, cfg, metrics_path=out / "metrics.csv",
                              checkpoint_dir=out)
        checkpoint.save(out / "checkpoint.pt")
        (out / "config.json").write_text(
            json.dumps(dataclasses.asdict(cfg), indent=2), encoding="utf-8")
    except Exception as exc:
        _fail(exc)
    final = checkpoint.loss_history[-1]["total"]
    click.echo(f"pretrained {cfg.epochs} epochs; final loss {final:.6f}")


@main.command()
@click.argument("checkpoint_path", type=click.Path(exists=True))
@click.argument("graph_dir", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), required=True)
def export(checkpoint_path, graph_dir, out_path):
    """Export embeddings from a checkpoint as CSV."""
    try:
        export_embeddings(Checkpoint.load(checkpoint_path), load_graph(graph_dir),
                          out_path)
    except Exception as exc:
        _fail(exc)
    click.echo(f"wrote embeddings to {out_path}")


TASKS = ("classify_segments", "classify_parcels", "flow_segments", "flow_parcels",
         "od_segments", "od_parcels", "cluster_consistency")


def run_tasks(embeddings_path, bundle_dir, tasks, seed=0, folds=5, k=5) -> dict:
    seg_emb, par_emb = load_embeddings(embeddings_path)
    bundle = load_bundle(bundle_dir)
    graph = assemble_graph(bundle)
    _, _, test = ev.split_trajectories(bundle)
    report: dict[str, dict] = {}
    for task in tasks:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
        if task == "classify_segments":
            labels = np.array([s.raw_features[0] for s in bundle.segments], int)
            r = ev.classify(seg_emb, labels, folds, seed)
        elif task == "classify_parcels":
            labels = np.array([p.raw_features[0] for p in bundle.parcels], int)
            r = ev.classify(par_emb, labels, folds, seed)
        elif task in ("flow_segments", "od_segments"):
            inflow, outflow, od = ev.derive_flow_and_od(
                test, None, "segment", bundle.n_segments)
            r = ev.predict_flow(seg_emb, inflow, outflow, folds, seed) \
                if task == "flow_segments" else ev.predict_od(seg_emb, od, folds, seed)
        elif task in ("flow_parcels", "od_parcels"):
            inflow, outflow, od = ev.derive_flow_and_od(
                test, graph.assigned_parcel, "parcel", bundle.n_parcels)
            r = ev.predict_flow(par_emb, inflow, outflow, folds, seed) \
                if task == "flow_parcels" else ev.predict_od(par_emb, od, folds, seed)
        else:
            nmi, ars = ev.cluster_consistency(seg_emb, par_emb,
                                              graph.assigned_parcel, k, seed)
            r = ev.EvalReport("cluster_consistency", {"nmi": nmi, "ars": ars},
                              config={"k": k, "seed": seed})
        report[task] = {"metrics": r.metrics, "fold_metrics": r.fold_metrics}
    return report


@main.command("evaluate")
@click.argument("embeddings_path", type=click.Path(exists=True))
@click.argument("bundle_dir", type=click.Path(exists=True))
@click.option("--task", "tasks", multiple=True, required=True,
              help=f"one of {', '.join(TASKS)}")
@click.option("--seed", type=int, default=0)
@click.option("--folds", type=int, default=5)
@click.option("--out", "out_path", type=click.Path(), default=None)
def evaluate_cmd(embeddings_path, bundle_dir, tasks, seed, folds, out_path):
    """Evaluate frozen embeddings on downstream tasks."""
    try:
        report = run_tasks(embeddings_path, bundle_dir, tasks, seed, folds)
    except Exception as exc:
        _fail(exc)
    text = json.dumps({"seed": seed, "folds": folds, "tasks": report}, indent=2)
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    click.echo(text)


ABLATION_VARIANTS = ("full", "wo_rfe", "wo_psa", "wo_bias", "wo_hgt",
                     "wo_intra", "wo_inter", "wo_f_aug", "wo_e_aug")


def ablation_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Config for one ablation toggle of the base training config."""
    enc, aug, lw = base.encoder, base.augmentation, base.loss_weights
    if variant == "full":
        return base
    if variant == "wo_rfe":
        return replace(base, encoder=replace(enc, use_feature_encoding=False))
    if variant == "wo_psa":
        return replace(base, encoder=replace(enc, use_shape_attention=False))
    if variant == "wo_bias":
        return replace(base, encoder=replace(enc, use_attention_bias=False))
    if variant == "wo_hgt":
        return replace(base, encoder=replace(enc, n_layers=0))
    if variant == "wo_intra":
        return replace(base, loss_weights=replace(lw, intra_segment=0.0,
                                                  intra_parcel=0.0))
    if variant == "wo_inter":
        return replace(base, loss_weights=replace(lw, segment_parcel=0.0,
                                                  city=0.0))
    if variant == "wo_f_aug":
        return replace(base, augmentation=replace(
            aug, view1=replace(aug.view1, p_feature=0.0),
            view2=replace(aug.view2, p_feature=0.0)))
    if variant == "wo_e_aug":
        return replace(base, augmentation=replace(
            aug, view1=replace(aug.view1, p_edge=0.0),
            view2=replace(aug.view2, p_edge=0.0)))
    raise ConfigError(f"unknown ablation variant {variant!r}")


def run_ablation(graph_dir, bundle_dir, base: TrainConfig,
                 variants=ABLATION_VARIANTS, tasks=("classify_parcels",),
                 out_dir=None) -> dict:
    if len(set(variants)) != len(variants):
        raise ConfigError("duplicate ablation variants requested")
    graph = load_graph(graph_dir)
    results = {}
    for variant in variants:
        cfg = ablation_config(base, variant)
        checkpoint = pretrain(graph, cfg)
        emb_path = Path(out_dir or graph_dir) / f"embeddings_{variant}.csv"
        export_embeddings(checkpoint, graph, emb_path)
        results[variant] = run_tasks(emb_path, bundle_dir, tasks, seed=cfg.seed)
    return results


@main.command("ablate")
@click.argument("graph_dir", type=click.Path(exists=True))
@click.argument("bundle_dir", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--override", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--variant", "variants", multiple=True, default=ABLATION_VARIANTS)
@click.option("--task", "tasks", multiple=True, default=("classify_parcels",))
@click.option("--out", "out_dir", type=click.Path(), required=True)
def ablate(graph_dir, bundle_dir, config_path, override, seed, variants, tasks,
           out_dir):
    """Pretrain and evaluate each ablation variant."""
    try:
        base = _train_config(config_path, override, seed)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        results = run_ablation(graph_dir, bundle_dir, base, variants, tasks, out_dir)
        (Path(out_dir) / "ablation_report.json").write_text(
            json.dumps(results, indent=2), encoding="utf-8")
    except Exception as exc:
        _fail(exc)
    click.echo(f"wrote {len(results)}-variant ablation report to {out_dir}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--override", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--task", "tasks", multiple=True,
              default=("classify_parcels", "cluster_consistency"))
def pipeline(config_path, override, seed, out_dir, tasks):
    """Run synth, build-graph, pretrain, export and evaluate end to end."""
    try:
        data = load_config_file(config_path, override)
        if seed is not None:
            data.setdefault("synth", {})["seed"] = seed
            data.setdefault("train", {})["seed"] = seed
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        spec = dataclass_from_dict(SynthSpec, data.get("synth", {}))
        bundle = generate_synthetic_city(spec)
        save_bundle(bundle, out / "bundle")
        graph = assemble_graph(
            bundle, dataclass_from_dict(GraphConfig, data.get("graph", {})))
        save_graph(graph, out / "graph")
        cfg = dataclass_from_dict(TrainConfig, data.get("train", {}))
        checkpoint = pretrain(graph, cfg, metrics_path=out / "metrics.csv")
        checkpoint.save(out / "checkpoint.pt")
        export_embeddings(checkpoint, graph, out / "embeddings.csv")
        report = run_tasks(out / "embeddings.csv", out / "bundle", tasks,
                           seed=cfg.seed)
        (out / "report.json").write_text(json.dumps(report, indent=2),
                                         encoding="utf-8")
    except Exception as exc:
        _fail(exc)
    click.echo(f"pipeline complete; outputs in {out_dir}")


if __name__ == "__main__":
    main()
