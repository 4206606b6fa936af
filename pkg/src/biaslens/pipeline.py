"""End-to-end stage orchestration behind the command line.

Each ``run_*`` function loads what it needs from disk, executes one pipeline
stage, writes deterministic artifacts (JSON carries a quarantined
``provenance.run`` block; binary bundles carry none), and returns a summary
dictionary for display.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from . import storage
from .grounding import (
    GroundingError,
    apply_visual_grounding,
    compute_heatmaps,
    ground_dataset,
    load_grounded_images,
    resize_heatmap,
)
from .keywords import KeywordReport, rank_keywords
from .manifest import DatasetManifest, conflicting_slice_members, load_manifest
from .metrics import compute_grouped_metrics
from .mitigation import (
    MitigationError,
    infer_groups_zero_shot,
    erm_train,
    groupdro_train,
    jtt_train,
    zero_shot_eval,
)
from .overlap import load_mask_dir, overlap_audit
from .providers.logistic import StatMapClassifier, load_classifier, save_classifier
from .providers.synthetic import (
    NoisyZeroShot,
    OracleZeroShot,
    RegionStatsEmbedder,
    SalienceCaptioner,
    StatPromptZeroShot,
)
from .report import build_provenance, emit_report
from .slicing import amplify_bias, discover_slices, precision_at_k
from .synthdata import generate_spurious_dataset, plant_heatmaps
from .types import BiasLensError, GroundingConfig, Heatmap
from .world import SyntheticWorld


class PipelineError(BiasLensError):
    """Raised when a stage cannot be assembled from the given artifacts."""


DEFAULT_TRAIN_PARAMS = {
    "grid": 4,
    "learning_rate": 0.5,
    "steps": 400,
    "weight_decay": 1e-3,
    "random_state": 0,
}


def world_from_manifest(manifest: DatasetManifest) -> Optional[SyntheticWorld]:
    block = manifest.extra.get("synthetic_world")
    return None if block is None else SyntheticWorld.from_dict(block)


def require_world(manifest: DatasetManifest) -> SyntheticWorld:
    world = world_from_manifest(manifest)
    if world is None:
        raise PipelineError(
            "this stage needs text-capable providers; the manifest lacks a "
            "synthetic_world block and no external provider adapter was given"
        )
    return world


def make_embedder(manifest: DatasetManifest, grid: int = 4, seed: int = 0) -> RegionStatsEmbedder:
    return RegionStatsEmbedder(world=world_from_manifest(manifest), grid=grid, seed=seed)


def make_captioner(manifest: DatasetManifest, seed: int = 0) -> SalienceCaptioner:
    return SalienceCaptioner(world=require_world(manifest), seed=seed)


def make_zeroshot(
    manifest: DatasetManifest, kind: str = "statistics", flip_rate: float = 0.1, seed: int = 0
):
    world = require_world(manifest)
    if kind == "statistics":
        return StatPromptZeroShot(world=world, seed=seed)
    if kind == "oracle":
        return OracleZeroShot(world=world, seed=seed)
    if kind == "noisy-oracle":
        return NoisyZeroShot(OracleZeroShot(world=world, seed=seed), flip_rate=flip_rate, seed=seed)
    raise PipelineError(f"unknown zero-shot provider kind {kind!r}")


def load_split_arrays(
    manifest: DatasetManifest, split: str
) -> Tuple[list, np.ndarray, np.ndarray, list]:
    """(ids, images, labels, groups) for one split, in manifest order."""
    records = manifest.split(split)
    if not records:
        raise PipelineError(f"split {split!r} is empty")
    ids = [r.id for r in records]
    images = np.stack([storage.load_image(manifest.image_path(r)) for r in records])
    labels = np.asarray([r.label for r in records], dtype=np.int64)
    groups = [r.group for r in records]
    return ids, images, labels, groups


def _grounded_view(
    manifest: DatasetManifest,
    classifier: StatMapClassifier,
    ids: Sequence[str],
    images: np.ndarray,
    config: GroundingConfig,
    heatmaps: Optional[Mapping[str, Heatmap]] = None,
) -> np.ndarray:
    """Grounded copies of the given images (heatmaps from the classifier unless given)."""
    image_of = {sid: images[i] for i, sid in enumerate(ids)}
    if heatmaps is None:
        predicted = classifier.predict(images)
        targets = {sid: int(p) for sid, p in zip(ids, predicted)}
        heatmaps = compute_heatmaps(classifier, image_of, targets)
    out = []
    for sid in ids:
        hm = resize_heatmap(heatmaps[sid], image_of[sid].shape[:2], method=config.interpolation)
        out.append(apply_visual_grounding(image_of[sid], hm, config.tau, fill=config.fill))
    return np.stack(out)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_synth(out_dir, **kwargs) -> dict:
    manifest = generate_spurious_dataset(out_dir, **kwargs)
    return {
        "manifest": str(Path(out_dir) / "manifest.csv"),
        "n_samples": len(manifest),
        "groups": list(manifest.group_table.group_ids()),
    }


def run_train(
    dataset,
    out_dir,
    params: Optional[Mapping] = None,
    *,
    select_on_val: bool = True,
) -> dict:
    """Train the baseline task model and persist model plus predictions."""
    manifest = load_manifest(dataset)
    merged = dict(DEFAULT_TRAIN_PARAMS)
    merged.update(params or {})
    merged["n_classes"] = len(manifest.class_names)
    ids, images, labels, groups = load_split_arrays(manifest, "train")
    val_data = None
    if select_on_val and manifest.split("val") and all(g is not None for g in groups):
        v_ids, v_images, v_labels, v_groups = load_split_arrays(manifest, "val")
        if all(g is not None for g in v_groups):
            val_data = (v_images, v_labels, v_groups)
    clf, info = erm_train(images, labels, merged, val_data=val_data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_classifier(out / "model.blz", clf)

    all_records = []
    split_of = {}
    true_labels = {}
    for split in ("train", "val", "test"):
        records = manifest.split(split)
        if not records:
            continue
        s_ids = [r.id for r in records]
        s_images = np.stack([storage.load_image(manifest.image_path(r)) for r in records])
        s_labels = [r.label for r in records]
        all_records.extend(clf.predict_records(s_ids, s_images, s_labels))
        split_of.update({sid: split for sid in s_ids})
        true_labels.update({sid: y for sid, y in zip(s_ids, s_labels)})
    storage.save_predictions(
        out / "predictions.json",
        all_records,
        split_of=split_of,
        true_labels=true_labels,
        meta={"provenance": build_provenance({"stage": "train", "params": merged})},
    )
    train_acc = float(np.mean([r.correct for r in all_records if split_of[r.sample_id] == "train"]))
    return {
        "model": str(out / "model.blz"),
        "predictions": str(out / "predictions.json"),
        "train_accuracy": round(train_acc, 4),
        "selected_step": info.selected_step,
    }


def run_ground(
    dataset,
    model,
    out_dir,
    config: GroundingConfig,
    *,
    heatmap_store=None,
    planted: Optional[str] = None,
    sharpness: float = 8.0,
    target: str | int = "predicted",
    splits: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> dict:
    """Produce grounding artifacts from a model, a heatmap store, or planted maps."""
    manifest = load_manifest(dataset)
    heatmaps = None
    classifier = None
    if planted is not None:
        heatmaps = plant_heatmaps(manifest, target=planted, sharpness=sharpness)
    elif heatmap_store is not None:
        heatmaps, _ = storage.load_heatmap_store(heatmap_store)
    elif model is not None:
        classifier = load_classifier(model)
    else:
        raise PipelineError("grounding needs a model, a heatmap store, or planted heatmaps")
    result = ground_dataset(
        manifest,
        config,
        out_dir,
        classifier=classifier,
        heatmaps=heatmaps,
        target=target,
        splits=splits,
        jobs=jobs,
    )
    summary = result.to_dict()
    storage.save_json(
        Path(out_dir) / "grounding_summary.json",
        {**summary, "provenance": build_provenance({"stage": "ground", "config": config.to_dict()})},
    )
    return summary


def run_audit_overlap(
    dataset,
    out_dir,
    *,
    heatmap_store=None,
    planted: Optional[str] = None,
    sharpness: float = 8.0,
    model=None,
    tau: float = 0.7,
    split: Optional[str] = "val",
    mask_features: Sequence[str] = ("core", "spurious"),
) -> dict:
    """Overlap audit of heatmaps against annotated region masks."""
    manifest = load_manifest(dataset)
    if planted is not None:
        heatmaps = plant_heatmaps(manifest, target=planted, sharpness=sharpness, split=split)
    elif heatmap_store is not None:
        heatmaps, _ = storage.load_heatmap_store(heatmap_store)
    elif model is not None:
        clf = load_classifier(model)
        records = manifest.records if split is None else manifest.split(split)
        ids = [r.id for r in records]
        images = {r.id: storage.load_image(manifest.image_path(r)) for r in records}
        predicted = clf.predict(np.stack([images[i] for i in ids]))
        heatmaps = compute_heatmaps(clf, images, {i: int(p) for i, p in zip(ids, predicted)})
    else:
        raise PipelineError("overlap audit needs heatmaps: a store, a model, or planted maps")
    if manifest.root is None:
        raise PipelineError("manifest must be rooted on disk to locate masks")
    masks = load_mask_dir(manifest, manifest.root / "masks", mask_features)
    report = overlap_audit(manifest, heatmaps, masks, tau=tau, split=split)
    payload = report.to_dict()
    payload["provenance"] = build_provenance(
        {"stage": "audit-overlap", "tau": tau, "split": split, "features": list(mask_features)}
    )
    out_path = Path(out_dir) / "overlap.json"
    storage.save_json(out_path, payload)
    overall = {
        feature: stats["mean"] for feature, stats in payload["strata"]["overall"].items()
    }
    return {
        "report": str(out_path),
        "tau": tau,
        "n_samples": len(payload["per_sample"]),
        "n_excluded": len(payload["excluded"]),
        "overall_mean": overall,
    }


def _discovery_inputs(
    manifest: DatasetManifest,
    classifier: StatMapClassifier,
    split: str,
    grounding: GroundingConfig,
    embedder: RegionStatsEmbedder,
):
    ids, images, labels, groups = load_split_arrays(manifest, split)
    pred_probs = classifier.predict_proba(images)
    view = images
    if grounding.enabled:
        view = _grounded_view(manifest, classifier, ids, images, grounding)
    embeddings = embedder.embed_images(view)
    return ids, labels, groups, pred_probs, embeddings


def run_discover(
    dataset,
    model,
    out_dir,
    *,
    method: str = "domino",
    grounding: GroundingConfig,
    split: str = "val",
    n_slices: Optional[int] = None,
    gamma_y: float = 10.0,
    gamma_yhat: float = 10.0,
    seed: int = 0,
    top_k: int = 10,
    amplified_weight_decay: Optional[float] = None,
    embed_grid: int = 4,
    pca_components: Optional[int] = 16,
) -> dict:
    """Slice discovery; ``method`` picks the stage model.

    ``domino`` slices the task model's errors directly; ``facts`` first
    retrains with amplified weight decay and slices that model's errors.
    With grounding enabled, embeddings (and the heatmaps behind them) come
    from the stage model itself.
    """
    manifest = load_manifest(dataset)
    baseline = load_classifier(model)
    if method == "domino":
        stage_model = baseline
    elif method == "facts":
        t_ids, t_images, t_labels, _ = load_split_arrays(manifest, "train")
        params = baseline.get_params()
        stage_model = amplify_bias(
            t_images, t_labels, params, lam_high=amplified_weight_decay
        )
    else:
        raise PipelineError(f"unknown discovery method {method!r}; expected domino or facts")

    embedder = make_embedder(manifest, grid=embed_grid)
    ids, labels, groups, pred_probs, embeddings = _discovery_inputs(
        manifest, stage_model, split, grounding, embedder
    )
    result = discover_slices(
        ids,
        embeddings,
        labels,
        pred_probs,
        n_slices=n_slices,
        n_groups_hint=manifest.group_table.n_groups or None,
        gamma_y=gamma_y,
        gamma_yhat=gamma_yhat,
        seed=seed,
        class_names=manifest.class_names,
        top_k=top_k,
        pca_components=pca_components,
    )
    payload = result.to_dict()
    payload["method"] = method
    payload["grounding"] = grounding.to_dict()
    payload["split"] = split
    payload["k"] = top_k
    truth = conflicting_slice_members(manifest, split=split)
    payload["precision_at_k"] = (
        float(precision_at_k(result.assignment, truth, k=top_k)) if truth else None
    )
    payload["provenance"] = build_provenance(
        {"stage": "discover", "method": method, "seed": seed, "grounding": grounding.to_dict()}
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    storage.save_json(out / "slices.json", payload)
    storage.save_array_bundle(
        out / "responsibilities.blz",
        {"responsibilities": result.assignment.responsibilities},
        {"kind": "slice_responsibilities", "sample_ids": list(result.assignment.sample_ids)},
    )
    return payload


def run_keywords(
    dataset,
    model,
    out_dir,
    *,
    grounding: GroundingConfig,
    split: str = "val",
    top_n: int = 20,
    min_frequency: float = 2,
    embed_grid: int = 4,
) -> dict:
    """Caption the error sets and rank bias keywords per class."""
    manifest = load_manifest(dataset)
    clf = load_classifier(model)
    captioner = make_captioner(manifest)
    embedder = make_embedder(manifest, grid=embed_grid)
    ids, images, labels, _ = load_split_arrays(manifest, split)
    predicted = clf.predict(images)
    view = images
    if grounding.enabled:
        view = _grounded_view(manifest, clf, ids, images, grounding)
    embeddings = embedder.embed_images(view)

    captions_by_class = {}
    wrong_by_class = {}
    correct_by_class = {}
    all_emb = {}
    all_ok = {}
    all_ids = {}
    for ci, cls in enumerate(manifest.class_names):
        members = np.flatnonzero(labels == ci)
        if members.size == 0:
            continue
        ok = predicted[members] == ci
        wrong_idx = members[~ok]
        correct_idx = members[ok]
        captions_by_class[cls] = captioner.caption(view[wrong_idx]) if wrong_idx.size else []
        wrong_by_class[cls] = embeddings[wrong_idx]
        correct_by_class[cls] = embeddings[correct_idx]
        all_emb[cls] = embeddings[members]
        all_ok[cls] = [bool(v) for v in ok]
        all_ids[cls] = [ids[i] for i in members]

    report = rank_keywords(
        manifest.class_names,
        captions_by_class,
        wrong_by_class,
        correct_by_class,
        embedder,
        all_embeddings_by_class=all_emb,
        all_correct_by_class=all_ok,
        all_ids_by_class=all_ids,
        top_n=top_n,
        min_frequency=min_frequency,
    )
    payload = report.to_dict()
    payload["split"] = split
    payload["grounding"] = grounding.to_dict()
    payload["provenance"] = build_provenance(
        {"stage": "keywords", "split": split, "grounding": grounding.to_dict()}
    )
    storage.save_json(Path(out_dir) / "keywords.json", payload)
    return payload


def top_keywords_from_artifact(path, per_class: int = 1) -> dict:
    payload = storage.load_json(path)
    out = {}
    for cls, scores in payload.get("per_class", {}).items():
        out[cls] = [s["keyword"] for s in scores[:per_class]]
    return out


def run_mitigate(
    dataset,
    out_dir,
    *,
    method: str = "erm",
    params: Optional[Mapping] = None,
    groups_source: str = "annotated",
    keywords_artifact=None,
    keywords_per_class: int = 1,
    zeroshot_kind: str = "statistics",
    strategy: str = "base",
    eta: float = 0.01,
    lambda_up: float = 20.0,
    seed: int = 0,
) -> dict:
    """Train a mitigation model (or evaluate a zero-shot strategy)."""
    manifest = load_manifest(dataset)
    merged = dict(DEFAULT_TRAIN_PARAMS)
    merged.update(params or {})
    merged["random_state"] = merged.get("random_state", 0)
    merged["n_classes"] = len(manifest.class_names)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if method == "zeroshot":
        zs = make_zeroshot(manifest, kind=zeroshot_kind, seed=seed)
        ids, images, labels, groups = load_split_arrays(manifest, "test")
        if any(g is None for g in groups):
            raise MitigationError("zero-shot evaluation needs annotated test groups")
        keywords_by_class = None
        if strategy == "keyword-augmented":
            if keywords_artifact is None:
                raise PipelineError("keyword-augmented strategy needs --keywords")
            keywords_by_class = top_keywords_from_artifact(keywords_artifact, keywords_per_class)
        counts = {
            manifest.group_table.group_id(a, y): c
            for (a, y), c in manifest.group_table.train_counts.items()
        }
        metrics, prompts = zero_shot_eval(
            images,
            labels,
            groups,
            manifest.class_names,
            zs,
            strategy,
            attributes=manifest.attribute_names,
            keywords_by_class=keywords_by_class,
            train_counts=counts,
        )
        payload = {
            "method": "zeroshot",
            "strategy": strategy,
            "prompts": [{"class": manifest.class_names[ci], "prompt": p} for ci, p in prompts],
            "metrics": metrics.to_dict(),
            "provenance": build_provenance(
                {"stage": "mitigate", "method": method, "strategy": strategy}
            ),
        }
        storage.save_json(out / "zeroshot_metrics.json", payload)
        return payload

    ids, images, labels, groups = load_split_arrays(manifest, "train")
    val_data = None
    if manifest.split("val"):
        v_ids, v_images, v_labels, v_groups = load_split_arrays(manifest, "val")
        if all(g is not None for g in v_groups):
            val_data = (v_images, v_labels, v_groups)

    inferred_count = None
    if method == "groupdro":
        if groups_source == "annotated":
            if any(g is None for g in groups):
                raise MitigationError("annotated groups requested but some samples lack attributes")
            train_groups = groups
        elif groups_source == "inferred":
            if keywords_artifact is None:
                raise PipelineError("inferred groups need --keywords")
            keywords_by_class = top_keywords_from_artifact(keywords_artifact, keywords_per_class)
            zs = make_zeroshot(manifest, kind=zeroshot_kind, seed=seed)
            assignment, fallbacks = infer_groups_zero_shot(
                ids, images, labels, manifest.class_names, keywords_by_class, zs
            )
            train_groups = [assignment[sid] for sid in ids]
            inferred_count = {"fallbacks": fallbacks}
            if val_data is not None:
                v_assignment, _ = infer_groups_zero_shot(
                    v_ids, v_images, v_labels, manifest.class_names, keywords_by_class, zs
                )
                val_data = (val_data[0], val_data[1], [v_assignment[s] for s in v_ids])
        else:
            raise PipelineError(f"unknown groups source {groups_source!r}")
        clf, info = groupdro_train(images, labels, train_groups, merged, eta=eta, val_data=val_data)
    elif method == "jtt":
        clf, info = jtt_train(images, labels, merged, lambda_up=lambda_up, val_data=val_data)
    elif method == "erm":
        clf, info = erm_train(images, labels, merged, val_data=val_data)
    else:
        raise PipelineError(f"unknown mitigation method {method!r}")

    save_classifier(out / "model.blz", clf)
    payload = {
        "method": method,
        "training": info.to_dict(),
        "inferred_groups": inferred_count,
        "provenance": build_provenance({"stage": "mitigate", "method": method, "params": merged}),
    }
    storage.save_json(out / "mitigation.json", payload)
    return payload


def run_evaluate(dataset, model, out_dir, *, split: str = "test", name: str = "model") -> dict:
    """Grouped metrics of a trained model on one split."""
    manifest = load_manifest(dataset)
    clf = load_classifier(model)
    ids, images, labels, groups = load_split_arrays(manifest, split)
    if any(g is None for g in groups):
        raise PipelineError(f"split {split!r} lacks group annotations; grouped metrics undefined")
    predicted = clf.predict(images)
    counts = {
        manifest.group_table.group_id(a, y): c
        for (a, y), c in manifest.group_table.train_counts.items()
    }
    metrics = compute_grouped_metrics(
        predicted, labels, groups, counts, expected_groups=sorted(set(groups))
    )
    payload = {
        "name": name,
        "split": split,
        "metrics": metrics.to_dict(),
        "provenance": build_provenance({"stage": "evaluate", "split": split, "name": name}),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    storage.save_json(out / f"metrics_{name}.json", payload)
    return payload


def run_report(out_dir, *, overlap=None, slices=None, keywords=None, metrics=None) -> dict:
    """Assemble report.json / report.md from stage artifact files."""
    sections = {}
    if overlap:
        sections["overlap"] = storage.load_json(overlap)
    if slices:
        sections["slices"] = storage.load_json(slices)
    if keywords:
        sections["keywords"] = storage.load_json(keywords)
    metrics_block = {}
    for path in metrics or ():
        payload = storage.load_json(path)
        metrics_block[payload.get("name", Path(path).stem)] = payload.get("metrics", payload)
    if metrics_block:
        sections["metrics"] = metrics_block
    result = emit_report(out_dir, config={"stage": "report"}, **sections)
    return {"json": str(result["json"]), "markdown": str(result["markdown"])}


def run_ablate_tau(
    dataset,
    model,
    out_dir,
    *,
    taus: Optional[Sequence[float]] = None,
    method: str = "domino",
    split: str = "val",
    seed: int = 0,
    top_k: int = 10,
    embed_grid: int = 4,
    pca_components: Optional[int] = 16,
) -> dict:
    """Precision@k of grounded discovery across a grid of thresholds."""
    if taus is None:
        taus = [round(0.5 + 0.05 * i, 2) for i in range(9)]  # 0.5 .. 0.9
    manifest = load_manifest(dataset)
    truth = conflicting_slice_members(manifest, split=split)
    if not truth:
        raise PipelineError("tau ablation needs ground-truth conflicting groups")
    baseline = load_classifier(model)
    if method == "facts":
        t_ids, t_images, t_labels, _ = load_split_arrays(manifest, "train")
        stage_model = amplify_bias(t_images, t_labels, baseline.get_params())
    else:
        stage_model = baseline
    embedder = make_embedder(manifest, grid=embed_grid)
    series = []
    for tau in taus:
        config = GroundingConfig(tau=float(tau), enabled=True)
        ids, labels, groups, pred_probs, embeddings = _discovery_inputs(
            manifest, stage_model, split, config, embedder
        )
        result = discover_slices(
            ids,
            embeddings,
            labels,
            pred_probs,
            n_groups_hint=manifest.group_table.n_groups or None,
            seed=seed,
            class_names=manifest.class_names,
            top_k=top_k,
            pca_components=pca_components,
        )
        series.append(
            {"tau": float(tau), "precision_at_k": float(precision_at_k(result.assignment, truth, k=top_k))}
        )
    payload = {
        "method": method,
        "split": split,
        "k": top_k,
        "series": series,
        "provenance": build_provenance({"stage": "ablate-tau", "method": method, "seed": seed}),
    }
    storage.save_json(Path(out_dir) / "tau_ablation.json", payload)
    return payload
