"""Acceptance gate: ten criteria, one test (and one pass/fail line) each.

Criteria 1-5 check formulas, losses, gradients, normalization invariants and
augmentation statistics against independent oracles on small instances.
Criteria 6-9 are directional training results on an 8x8 planted city shared
through a module-scoped fixture (5 seeds x 6 model variants; this fixture
dominates the suite's runtime). Criterion 10 checks end-to-end determinism.

Criterion 6 is a known failure: the pinned training protocol reaches an
attraction/repulsion equilibrium whose fused loss sits at ~54% of the
epoch-1 value (51% even with the epoch budget tripled), above the <50%
bar; the assertion is kept unchanged rather than weakened. See the test's
own comment for the measured evidence.

Pinned tolerances:
  1. formula vs brute-force oracle        max abs err < 1e-9, < 10 s
  2. loss vs double-loop oracle           max abs err < 1e-9
  3. analytic vs central-difference grad  max rel err < 1e-4, < 60 s
  4. softmax sums                         |sum - 1| < 1e-6
  5. Monte-Carlo frequencies (10k draws)  within +/- 0.02
  6. final loss < 50% of epoch-1 loss     < 600 s
  7. parcel Mi-F1 >= majority + 0.15 and >= untrained, >= 4/5 seeds
  8. joint NMI and ARS > single-entity,   >= 4/5 seeds
  9. full Mi-F1 >= w/o message passing and >= w/o shape attention, >= 4/5 seeds
 10. byte-identical reruns and resume equivalence
"""

import dataclasses
import filecmp
import time
from unittest import mock

import numpy as np
import pytest
import torch

from urbangraph import (
    EncoderConfig,
    GraphConfig,
    LossWeights,
    TrainConfig,
    assemble_graph,
    compute_embeddings,
    export_embeddings,
    generate_synthetic_city,
    grad_check,
    pretrain,
    restore_model,
    save_bundle,
    save_graph,
)
from urbangraph import contrastive, encoder, evaluate as ev, graphs
from urbangraph.synth import SynthSpec
from urbangraph.train import Checkpoint, PretrainModel

from .conftest import small_train_config
from . import oracles

SEEDS = tuple(range(5))
EPOCHS = 300


def report(criterion: int, detail: str) -> None:
    print(f"criterion {criterion:2d}: PASS — {detail}")


# ---------------------------------------------------------------------------
# Shared planted city and pretraining runs (criteria 6-9)
# ---------------------------------------------------------------------------

CITY_ENCODER = EncoderConfig(dim=32, n_heads=8, feature_dim=8, bias_dim=8)


@pytest.fixture(scope="module")
def city():
    spec = SynthSpec(grid_w=8, grid_h=8, n_pois=400, n_trajectories=200,
                     n_function_classes=4, seed=0)
    bundle = generate_synthetic_city(spec)
    # The planted class is the probe label, so it is excluded from the raw
    # feature matrices to keep the downstream comparison non-trivial.
    graph = assemble_graph(bundle, GraphConfig(
        exclude_segment_features=("category",),
        exclude_parcel_features=("function",)))
    labels = np.array([p.raw_features[0] for p in bundle.parcels], int)
    return bundle, graph, labels


def variant_config(variant: str, seed: int) -> TrainConfig:
    base = TrainConfig(epochs=EPOCHS, encoder=CITY_ENCODER, seed=seed)
    if variant in ("full", "untrained"):
        return base
    if variant == "wo_hgt":
        return dataclasses.replace(
            base, encoder=dataclasses.replace(CITY_ENCODER, n_layers=0))
    if variant == "wo_psa":
        return dataclasses.replace(
            base, encoder=dataclasses.replace(CITY_ENCODER,
                                              use_shape_attention=False))
    if variant == "seg_only":
        return dataclasses.replace(
            base, loss_weights=LossWeights(0.25, 0.0, 0.0, 0.0))
    if variant == "par_only":
        return dataclasses.replace(
            base, loss_weights=LossWeights(0.0, 0.25, 0.0, 0.0))
    raise ValueError(variant)


@pytest.fixture(scope="module")
def training_runs(city):
    """Embeddings (and histories) for every variant x seed; trained once."""
    _, graph, _ = city
    runs = {}
    for variant in ("full", "untrained", "wo_hgt", "wo_psa",
                    "seg_only", "par_only"):
        for seed in SEEDS:
            cfg = variant_config(variant, seed)
            start = time.monotonic()
            if variant == "untrained":
                torch.manual_seed(seed)
                model = PretrainModel(cfg, graph)
                history = None
            else:
                checkpoint = pretrain(graph, cfg)
                model = restore_model(checkpoint, graph)
                history = checkpoint.loss_history
            seg, par = compute_embeddings(model, graph)
            runs[variant, seed] = {
                "seg": seg, "par": par, "history": history,
                "seconds": time.monotonic() - start,
            }
    return runs


def parcel_f1(runs, variant, seed, labels):
    return ev.classify(runs[variant, seed]["par"], labels,
                       folds=5, seed=0).metrics["micro_f1"]


# ---------------------------------------------------------------------------
# Criterion 1: graph-construction and augmentation formulas vs brute force
# ---------------------------------------------------------------------------

def test_criterion_01_formula_oracles(small_bundle, small_graph):
    import shapely

    start = time.monotonic()
    tol = 1e-9
    errs = []

    # Inverse-distance geographic weights (segments): recompute midpoints
    # and distances with shapely, normalize with the reference min-max.
    lines = [shapely.LineString(s.polyline) for s in small_bundle.segments]
    mids = [line.interpolate(0.5, normalized=True) for line in lines]
    view = small_graph.segment_graph.views["s_geo"]
    raw = np.array([1.0 / (mids[a].distance(mids[b]) + 1.0)
                    for a, b in zip(view.src, view.dst)])
    errs.append(np.abs(oracles.minmax_reference(raw) - view.weight).max())

    # Inverse-distance geographic weights (parcels) via shapely centroids.
    polys = [shapely.Polygon(p.polygon) for p in small_bundle.parcels]
    cents = [p.centroid for p in polys]
    rview = small_graph.parcel_graph.views["r_geo"]
    raw = np.array([1.0 / (cents[a].distance(cents[b]) + 1.0)
                    for a, b in zip(rview.src, rview.dst)])
    errs.append(np.abs(oracles.minmax_reference(raw) - rview.weight).max())

    # TF-IDF vectors per parcel, with POI-to-parcel containment recomputed
    # via shapely and the tf-idf formula recomputed by the reference.
    docs = {p.id: [] for p in small_bundle.parcels}
    for poi in small_bundle.pois:
        pt = shapely.Point(poi.location)
        hit = next((p.id for p, poly in zip(small_bundle.parcels, polys)
                    if poly.covers(pt)), None)
        if hit is None:
            hit = int(np.argmin([pt.distance(c) for c in cents]))
        docs[hit].append(poi.category)
    vocab = len(small_bundle.poi_category_vocab)
    expected = oracles.tfidf_reference(docs, small_bundle.n_parcels, vocab)
    got = graphs.compute_tfidf("parcel", small_bundle).vectors
    errs.append(np.abs(expected - got).max())

    # Function-graph cosine weights vs a dense cosine matrix.
    sim = oracles.cosine_matrix_reference(got)
    fview = small_graph.parcel_graph.views["r_fun"]
    if len(fview):
        errs.append(np.abs(sim[fview.src, fview.dst] - fview.weight).max())

    # Mobility transition probabilities vs direct counting.
    trans = oracles.transition_reference(
        [t.segment_ids for t in small_bundle.trajectories],
        small_bundle.n_segments)
    mview = small_graph.segment_graph.views["s_mob"]
    errs.append(max(abs(trans[a, b] - w) for a, b, w in
                    zip(mview.src, mview.dst, mview.weight)))

    # Augmentation probability formulas vs scalar loops.
    w = np.linspace(0.0, 1.0, 11)
    expected = np.array([min((1 - wi) * 0.9, 0.7) for wi in w])
    errs.append(np.abs(
        contrastive.edge_removal_probs(w, 0.9, 0.7) - expected).max())
    x = np.abs(np.sin(np.arange(20, dtype=float))).reshape(5, 4)
    deg = np.arange(1.0, 6.0)
    c = np.array([sum(abs(x[i, k]) * deg[i] for i in range(5))
                  for k in range(4)])
    expected = oracles.minmax_reference(c)
    got_c = contrastive.feature_importance(x, deg)
    errs.append(np.abs(expected - got_c).max())
    expected = np.array([min((1 - ci) * 0.8, 0.7) for ci in got_c])
    errs.append(np.abs(
        contrastive.feature_mask_probs(got_c, 0.8, 0.7) - expected).max())

    elapsed = time.monotonic() - start
    assert max(errs) < tol
    assert elapsed < 10.0
    report(1, f"max abs err {max(errs):.2e} < 1e-9 in {elapsed:.1f}s < 10s")


# ---------------------------------------------------------------------------
# Criterion 2: loss values vs naive double-loop references
# ---------------------------------------------------------------------------

def test_criterion_02_loss_oracles():
    tol = 1e-9
    gen = torch.Generator().manual_seed(5)
    q1 = torch.randn(8, 6, generator=gen, dtype=torch.float64)
    q2 = torch.randn(8, 6, generator=gen, dtype=torch.float64)
    errs = []

    got = contrastive.intra_entity_loss(q1, q2, temperature=0.4)
    errs.append(abs(float(got) - oracles.ntxent_reference(
        q1.numpy(), q2.numpy(), 0.4)))

    h_seg = torch.randn(8, 6, generator=gen, dtype=torch.float64)
    h_par = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    assigned = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    disc = contrastive.BilinearDiscriminator(6)
    negatives = torch.tensor([1, 2, 3, 0])
    got = contrastive.segment_parcel_loss(h_seg, h_par, assigned, disc,
                                          negatives).detach()
    errs.append(abs(float(got) - oracles.segment_parcel_reference(
        h_seg.numpy(), h_par.numpy(), assigned.numpy(),
        disc.w.detach().numpy(), negatives.numpy())))

    fake = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    cdisc = contrastive.BilinearDiscriminator(6)
    got = contrastive.city_loss(h_par, fake, cdisc).detach()
    errs.append(abs(float(got) - oracles.city_reference(
        h_par.numpy(), fake.numpy(), cdisc.w.detach().numpy())))

    parts = {
        "intra_segment": torch.tensor(1.25, dtype=torch.float64),
        "intra_parcel": torch.tensor(0.5, dtype=torch.float64),
        "segment_parcel": torch.tensor(2.0, dtype=torch.float64),
        "city": torch.tensor(0.25, dtype=torch.float64),
    }
    weights = LossWeights(0.1, 0.2, 0.3, 0.4)
    got = contrastive.total_loss(parts, weights)
    expected = 0.1 * 1.25 + 0.2 * 0.5 + 0.3 * 2.0 + 0.4 * 0.25
    errs.append(abs(float(got) - expected))

    assert max(errs) < tol
    report(2, f"max abs err {max(errs):.2e} < 1e-9")


# ---------------------------------------------------------------------------
# Criterion 3: analytic gradients vs central finite differences
# ---------------------------------------------------------------------------

def test_criterion_03_gradient_check(tiny_graph):
    start = time.monotonic()
    cfg = small_train_config(
        encoder=EncoderConfig(dim=8, n_heads=2, feature_dim=4, bias_dim=4,
                              n_dist_buckets=5, n_angle_buckets=8,
                              dropout=0.0))
    result = grad_check(tiny_graph, cfg)
    elapsed = time.monotonic() - start
    assert result.max_relative_error < 1e-4
    assert elapsed < 60.0
    report(3, f"max rel err {result.max_relative_error:.2e} < 1e-4 "
              f"in {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# Criterion 4: normalization invariants
# ---------------------------------------------------------------------------

def test_criterion_04_normalization_invariants(small_graph):
    tol = 1e-6
    worst = 0.0

    # Every grouped softmax the encoder evaluates sums to 1 per group:
    # record each call (shape attention and per-head message-passing
    # attention) during a real forward pass.
    calls = []
    real = encoder.segment_softmax

    def recording(scores, index, n):
        out = real(scores, index, n)
        calls.append((index.clone(), out.detach().clone(), n))
        return out

    torch.manual_seed(0)
    cfg = EncoderConfig(dim=16, n_heads=4, feature_dim=4, bias_dim=4,
                        dropout=0.0)
    model = encoder.MapEncoder(cfg, small_graph).eval()
    with mock.patch.object(encoder, "segment_softmax", recording):
        model(torch.as_tensor(small_graph.segment_features),
              torch.as_tensor(small_graph.parcel_features),
              encoder.full_edge_set(small_graph))
    assert len(calls) >= 1 + cfg.n_layers * cfg.n_heads
    for index, att, n in calls:
        sums = np.zeros(n)
        np.add.at(sums, index.numpy(), att.numpy())
        present = np.unique(index.numpy())
        worst = max(worst, np.abs(sums[present] - 1.0).max())

    # Mobility graphs are row-stochastic over sources with outgoing edges.
    for view in (small_graph.segment_graph.views["s_mob"],
                 small_graph.parcel_graph.views["r_mob"]):
        sums = {}
        for a, w in zip(view.src, view.weight):
            sums[a] = sums.get(a, 0.0) + w
        worst = max(worst, max(abs(s - 1.0) for s in sums.values()))

    # Min-max normalized quantities stay in [0, 1].
    for view in (small_graph.segment_graph.views["s_geo"],
                 small_graph.parcel_graph.views["r_geo"]):
        assert view.weight.min() >= -tol and view.weight.max() <= 1.0 + tol
    imp = contrastive.compute_importance(model, small_graph)
    for scores in imp.values():
        assert scores.min() >= -tol and scores.max() <= 1.0 + tol

    assert worst < tol
    report(4, f"{len(calls)} softmax groups, mobility rows and min-max "
              f"ranges: worst deviation {worst:.2e} < 1e-6")


# ---------------------------------------------------------------------------
# Criterion 5: Monte-Carlo augmentation statistics
# ---------------------------------------------------------------------------

def test_criterion_05_augmentation_statistics(tiny_graph):
    draws = 10_000
    gen = torch.Generator().manual_seed(123)
    # p_edge=0.9 with min-max weights guarantees some probabilities hit the
    # 0.7 truncation ceiling; the flat feature-mask probability does too.
    view_cfg = contrastive.ViewConfig(p_edge=0.9, p_feature=1.0)

    removal_counts = {rel: np.zeros(len(view)) for rel, view
                      in tiny_graph.intra_views().items() if len(view)}
    mask_counts = np.zeros(tiny_graph.segment_features.shape[1])
    for _ in range(draws):
        aug = contrastive.augment(tiny_graph, view_cfg, 0.7, gen)
        for rel in removal_counts:
            removal_counts[rel] += aug.removed[rel]
        mask_counts += aug.segment_mask

    worst = 0.0
    truncated = 0
    for rel, counts in removal_counts.items():
        view = tiny_graph.intra_views()[rel]
        expected = contrastive.edge_removal_probs(view.weight, 0.9, 0.7)
        truncated += int((expected == 0.7).sum())
        worst = max(worst, np.abs(counts / draws - expected).max())
    assert truncated > 0  # the ceiling case is exercised

    expected_mask = np.full_like(mask_counts, min(1.0, 0.7))
    worst = max(worst, np.abs(mask_counts / draws - expected_mask).max())

    assert worst < 0.02
    report(5, f"{draws} draws: worst frequency deviation {worst:.3f} < 0.02 "
              f"({truncated} edge probabilities at the 0.7 ceiling)")


# ---------------------------------------------------------------------------
# Criterion 6: training descent on the 8x8 planted city
# ---------------------------------------------------------------------------

def test_criterion_06_training_descent(training_runs):
    # Known red: at these pinned settings the fused loss is dominated by the
    # two full-batch NT-Xent terms, which start near ln(2n-1) and settle at
    # an attraction/repulsion equilibrium around 65-70% of that value; the
    # measured final/epoch-1 ratio is ~0.54 across every free-parameter
    # variation tried (and ~0.51 even at 1000 epochs, so it is the
    # equilibrium, not convergence speed). The bar is asserted unchanged.
    run = training_runs["full", 0]
    first = run["history"][0]["total"]
    final = run["history"][-1]["total"]
    ratio = final / first
    assert run["seconds"] < 600.0
    verdict = "PASS" if ratio < 0.5 else "FAIL"
    print(f"criterion  6: {verdict} — loss {first:.3f} -> {final:.3f} "
          f"(ratio {ratio:.1%}, bar < 50%) in {run['seconds']:.0f}s < 600s")
    assert final < 0.5 * first


# ---------------------------------------------------------------------------
# Criterion 7: downstream signal over majority and untrained baselines
# ---------------------------------------------------------------------------

def test_criterion_07_downstream_signal(city, training_runs):
    _, _, labels = city
    majority = np.bincount(labels).max() / len(labels)
    wins = 0
    pairs = []
    for seed in SEEDS:
        trained = parcel_f1(training_runs, "full", seed, labels)
        untrained = parcel_f1(training_runs, "untrained", seed, labels)
        pairs.append((trained, untrained))
        if trained >= majority + 0.15 and trained >= untrained:
            wins += 1
    assert wins >= 4
    detail = ", ".join(f"{t:.2f}/{u:.2f}" for t, u in pairs)
    report(7, f"trained/untrained Mi-F1 per seed: {detail}; "
              f"majority {majority:.2f}; {wins}/5 seeds clear both bars")


# ---------------------------------------------------------------------------
# Criterion 8: joint vs single-entity clustering consistency
# ---------------------------------------------------------------------------

def test_criterion_08_consistency_study(city, training_runs):
    _, graph, _ = city
    nmi_wins = ars_wins = 0
    rows = []
    for seed in SEEDS:
        joint = ev.cluster_consistency(
            training_runs["full", seed]["seg"],
            training_runs["full", seed]["par"],
            graph.assigned_parcel, k=4, seed=0)
        single = ev.cluster_consistency(
            training_runs["seg_only", seed]["seg"],
            training_runs["par_only", seed]["par"],
            graph.assigned_parcel, k=4, seed=0)
        rows.append((joint, single))
        nmi_wins += joint[0] > single[0]
        ars_wins += joint[1] > single[1]
    assert nmi_wins >= 4
    assert ars_wins >= 4
    detail = ", ".join(f"{j[0]:.2f}>{s[0]:.2f}" for j, s in rows)
    report(8, f"joint NMI beats single-entity in {nmi_wins}/5 seeds "
              f"({detail}); ARS in {ars_wins}/5")


# ---------------------------------------------------------------------------
# Criterion 9: ablation direction on classification
# ---------------------------------------------------------------------------

def test_criterion_09_ablation_direction(city, training_runs):
    _, _, labels = city
    hgt_wins = psa_wins = 0
    rows = []
    for seed in SEEDS:
        full = parcel_f1(training_runs, "full", seed, labels)
        wo_hgt = parcel_f1(training_runs, "wo_hgt", seed, labels)
        wo_psa = parcel_f1(training_runs, "wo_psa", seed, labels)
        rows.append((full, wo_hgt, wo_psa))
        hgt_wins += full >= wo_hgt
        psa_wins += full >= wo_psa
    assert hgt_wins >= 4
    assert psa_wins >= 4
    detail = ", ".join(f"{f:.2f}/{h:.2f}/{p:.2f}" for f, h, p in rows)
    report(9, f"full / w-o message passing / w-o shape attention Mi-F1 "
              f"per seed: {detail}; full wins {hgt_wins}/5 and {psa_wins}/5")


# ---------------------------------------------------------------------------
# Criterion 10: determinism and resume equivalence
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tiny_bundle, tiny_graph, tmp_path):
    spec = SynthSpec(grid_w=3, grid_h=3, n_pois=40, n_trajectories=20,
                     n_function_classes=2, seed=21)
    for d in ("a", "b"):
        save_bundle(generate_synthetic_city(spec), tmp_path / d)
    match, mismatch, errors = filecmp.cmpfiles(
        tmp_path / "a", tmp_path / "b",
        [p.name for p in (tmp_path / "a").iterdir()], shallow=False)
    assert not mismatch and not errors

    hashes = {save_graph(assemble_graph(generate_synthetic_city(spec)),
                         tmp_path / f"g{i}") for i in range(2)}
    assert len(hashes) == 1

    cfg = small_train_config(epochs=4)
    for name in ("e1.csv", "e2.csv"):
        export_embeddings(pretrain(tiny_graph, cfg), tiny_graph,
                          tmp_path / name)
    assert (tmp_path / "e1.csv").read_bytes() == \
        (tmp_path / "e2.csv").read_bytes()

    cfg = small_train_config(epochs=6, checkpoint_every=3)
    full = pretrain(tiny_graph, cfg, checkpoint_dir=tmp_path)
    mid = Checkpoint.load(tmp_path / "checkpoint_000003.pt")
    resumed = pretrain(tiny_graph, cfg, resume_from=mid)
    assert resumed.loss_history == full.loss_history
    for key in full.model_state:
        assert torch.equal(resumed.model_state[key], full.model_state[key])

    report(10, "byte-identical bundle/graph/embedding reruns; "
               "resume reproduces the uninterrupted run exactly")
