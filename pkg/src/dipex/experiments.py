"""Experiment drivers: seeded, file-writing wrappers around the library.

Each runner populates an output directory with CSV/JSON artifacts plus a
manifest recording the full configuration and a sha256 per artifact.  Nothing
written here depends on wall-clock time or filesystem ordering, so rerunning
with the same configuration reproduces every byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .detector import (
    DetectorParams,
    QueryMode,
    VocabularyConfig,
    build_vocabulary,
    detect_world,
    detections_to_coco,
    overlap_penalty,
)
from .evaluation import (
    DEFAULT_MAX_DETS,
    EvalSummary,
    GroundTruthSet,
    evaluate,
    load_coco_detections,
    load_coco_ground_truth,
)
from .expansion import ExpansionConfig, RunResult, rebuild_labels, run
from .pseudo_labels import soft_nms
from .world import World, WorldConfig, generate_world


class ConfigError(ValueError):
    """Raised when an experiment configuration cannot be built."""


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = WorldConfig()
    detector: DetectorParams = DetectorParams()
    expansion: ExpansionConfig = ExpansionConfig()
    vocabulary: VocabularyConfig = VocabularyConfig()
    max_dets: tuple[int, ...] = DEFAULT_MAX_DETS

    def as_dict(self) -> dict:
        return {
            "world": dataclasses.asdict(self.world),
            "detector": _degrees_out(
                dataclasses.asdict(self.detector), ("overlap_threshold",)
            ),
            "expansion": self.expansion.as_dict(),
            "vocabulary": _degrees_out(
                dataclasses.asdict(self.vocabulary),
                ("noise_angle", "duplicate_angle", "min_separation"),
            ),
            "max_dets": list(self.max_dets),
        }


def _degrees_out(data: dict, angle_keys: Sequence[str]) -> dict:
    for key in angle_keys:
        data[f"{key}_degrees"] = math.degrees(data.pop(key))
    return data


def _build_section(
    name: str, data: dict, factory: Callable, fields: set[str], angle_keys: set[str]
):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    kwargs = {}
    for key, value in data.items():
        if key in angle_keys:
            kwargs[key.removesuffix("_degrees")] = math.radians(float(value))
        elif key in fields:
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown key '{key}' in section '{name}'")
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


_WORLD_FIELDS = {f.name for f in dataclasses.fields(WorldConfig)}
_DETECTOR_FIELDS = {f.name for f in dataclasses.fields(DetectorParams)} - {
    "overlap_threshold"
}
_EXPANSION_FIELDS = {f.name for f in dataclasses.fields(ExpansionConfig)} - {
    "max_angle",
    "mac_threshold",
    "mac_tolerance",
}
_VOCAB_FIELDS = {f.name for f in dataclasses.fields(VocabularyConfig)} - {
    "noise_angle",
    "duplicate_angle",
    "min_separation",
}


def _world_section(data: dict) -> WorldConfig:
    def factory(**kw):
        if "size_mix" in kw:
            kw["size_mix"] = tuple(float(v) for v in kw["size_mix"])
        return WorldConfig(**kw)

    return _build_section("world", data, factory, _WORLD_FIELDS, set())


def experiment_config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a full configuration from a parsed YAML/JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a mapping")
    known = {"world", "detector", "expansion", "vocabulary", "max_dets"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    world = _world_section(doc.get("world", {}))
    detector = _build_section(
        "detector",
        doc.get("detector", {}),
        DetectorParams,
        _DETECTOR_FIELDS,
        {"overlap_threshold_degrees"},
    )
    expansion = _build_section(
        "expansion",
        doc.get("expansion", {}),
        ExpansionConfig,
        _EXPANSION_FIELDS,
        {"max_angle_degrees", "mac_threshold_degrees", "mac_tolerance_degrees"},
    )
    vocabulary = _build_section(
        "vocabulary",
        doc.get("vocabulary", {}),
        VocabularyConfig,
        _VOCAB_FIELDS,
        {"noise_angle_degrees", "duplicate_angle_degrees", "min_separation_degrees"},
    )
    max_dets = doc.get("max_dets", list(DEFAULT_MAX_DETS))
    if not isinstance(max_dets, (list, tuple)) or not max_dets:
        raise ConfigError("max_dets must be a non-empty list of integers")
    try:
        caps = tuple(sorted(int(v) for v in max_dets))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"max_dets: {exc}") from exc
    return ExperimentConfig(world, detector, expansion, vocabulary, caps)


def load_experiment_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return experiment_config_from_dict(doc if doc is not None else {})


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Reseed every stochastic component in lockstep."""
    return ExperimentConfig(
        world=replace(config.world, seed=seed),
        detector=config.detector,
        expansion=replace(config.expansion, seed=seed),
        vocabulary=replace(config.vocabulary, seed=seed),
        max_dets=config.max_dets,
    )


def _prepare_out(out_dir: str | Path, overwrite: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(
            f"output directory {out} is not empty; pass --overwrite to reuse it"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out: Path, experiment: str, config_doc: dict, extra: dict) -> None:
    artifacts = {
        p.name: _sha256(p)
        for p in sorted(out.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    payload = {
        "experiment": experiment,
        "config": config_doc,
        "artifacts": artifacts,
        **extra,
    }
    _write_json(out / "manifest.json", payload)


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{float(value):.6f}"


def run_pilot_merging(
    config: ExperimentConfig,
    seeds: Sequence[int],
    out_dir: str | Path,
    overwrite: bool = False,
) -> Path:
    """Contrast the two query-merging policies on both vocabulary styles.

    For each seed, a fresh world is scored with the zero-shot vocabulary under
    query merging (joint submission, overlap penalty) and prediction merging
    (independent passes, soft-NMS union).  The relative recall drop of query
    merging is the quantity of interest: near zero for a dispersed vocabulary,
    catastrophic for an overlapping one.
    """
    out = _prepare_out(out_dir, overwrite)
    cap = max(config.max_dets)
    rows = []
    for style in ("dispersed", "overlapping"):
        for seed in seeds:
            world = generate_world(replace(config.world, seed=seed))
            vocab_cfg = replace(config.vocabulary, style=style, seed=seed)
            vocab = build_vocabulary(world, vocab_cfg)
            prompts = [(i, v) for i, v in enumerate(vocab)]
            gts = GroundTruthSet.from_world(world)
            summaries = {}
            for mode in (QueryMode.QUERY_MERGING, QueryMode.PREDICTION_MERGING):
                dets = detect_world(world, prompts, mode, config.detector, seed)
                summaries[mode] = evaluate(dets, gts, config.max_dets)
            ar_pm = summaries[QueryMode.PREDICTION_MERGING].ar(cap)
            ar_qm = summaries[QueryMode.QUERY_MERGING].ar(cap)
            delta = (
                (ar_qm - ar_pm) / ar_pm * 100.0
                if ar_pm is not None and ar_qm is not None and ar_pm > 0.0
                else None
            )
            rows.append(
                {
                    "vocabulary": style,
                    "seed": seed,
                    "num_queries": len(vocab),
                    "overlap_penalty": _fmt(overlap_penalty(vocab, config.detector)),
                    f"ar_{cap}_pm": _fmt(ar_pm),
                    f"ar_{cap}_qm": _fmt(ar_qm),
                    "delta_ar_pct": _fmt(delta),
                }
            )
    fieldnames = [
        "vocabulary",
        "seed",
        "num_queries",
        "overlap_penalty",
        f"ar_{cap}_pm",
        f"ar_{cap}_qm",
        "delta_ar_pct",
    ]
    _write_csv(out / "pilot.csv", fieldnames, rows)
    _write_manifest(out, "pilot", config.as_dict(), {"seeds": list(seeds)})
    return out


def _round_rows(result: RunResult, cap: int) -> list[dict]:
    alpha_by_round = dict(zip(result.mac_report.rounds, result.mac_report.alpha_max))
    rows = []
    for i, summary in enumerate(result.eval_summaries):
        rnd = i + 1
        alpha = alpha_by_round.get(rnd)
        rows.append(
            {
                "round": rnd,
                "num_prompts": 1 + (rnd - 1) * result.config.num_children,
                "num_labels": result.label_counts[i],
                f"ar_{cap}": _fmt(summary.ar(cap)),
                "ar_s": _fmt(summary.ar_small),
                "ar_m": _fmt(summary.ar_medium),
                "ar_l": _fmt(summary.ar_large),
                "ap": _fmt(summary.ap),
                "alpha_max_degrees": "" if alpha is None else _fmt(math.degrees(alpha)),
            }
        )
    return rows


def _write_run_artifacts(
    out: Path, config: ExperimentConfig, world: World, result: RunResult
) -> None:
    cap = max(config.max_dets)
    _write_csv(
        out / "rounds.csv",
        [
            "round",
            "num_prompts",
            "num_labels",
            f"ar_{cap}",
            "ar_s",
            "ar_m",
            "ar_l",
            "ap",
            "alpha_max_degrees",
        ],
        _round_rows(result, cap),
    )
    _write_csv(
        out / "mac_report.csv",
        ["round", "alpha_max_degrees"],
        [
            {"round": r, "alpha_max_degrees": _fmt(math.degrees(a))}
            for r, a in zip(result.mac_report.rounds, result.mac_report.alpha_max)
        ],
    )
    for rnd, matrix in zip(result.mac_report.rounds, result.mac_report.matrices):
        n = matrix.shape[0]
        with open(out / f"angles_round_{rnd}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["prompt"] + [str(i) for i in range(n)])
            for i in range(n):
                writer.writerow(
                    [str(i)] + [f"{math.degrees(matrix[i, j]):.6f}" for j in range(n)]
                )
    loss_rows = []
    for stats in result.round_stats:
        for epoch, breakdown in enumerate(stats.epoch_losses, start=1):
            loss_rows.append(
                {
                    "round": stats.round_index,
                    "epoch": epoch,
                    "parent_child": _fmt(breakdown.parent_child),
                    "child_child": _fmt(breakdown.child_child),
                    "bbox": _fmt(breakdown.bbox),
                    "giou": _fmt(breakdown.giou),
                    "cls": _fmt(breakdown.cls),
                    "total": _fmt(breakdown.total),
                }
            )
    _write_csv(
        out / "losses.csv",
        ["round", "epoch", "parent_child", "child_child", "bbox", "giou", "cls", "total"],
        loss_rows,
    )
    act_rows = []
    for idx, stats in enumerate(result.activation_history, start=1):
        for pid in sorted(stats.counts):
            act_rows.append(
                {
                    "expansion": idx,
                    "prompt_id": pid,
                    "count": stats.counts[pid],
                    "frequency": _fmt(stats.frequency(pid)),
                }
            )
    _write_csv(
        out / "activations.csv",
        ["expansion", "prompt_id", "count", "frequency"],
        act_rows,
    )
    result.tree.save(out / "tree.json")

    final_dets = detect_world(
        world,
        result.tree.prompt_items(),
        QueryMode.PREDICTION_MERGING,
        config.detector,
        config.expansion.seed,
    )
    _write_json(out / "detections.json", detections_to_coco(final_dets))
    gts = GroundTruthSet.from_world(world)
    _write_json(out / "ground_truth.json", gts.to_coco())
    labels = rebuild_labels(result.tree, world, config.expansion, config.detector)
    _write_json(out / "labels.json", labels.to_coco(gts.scene_dims))

    final = result.eval_summaries[-1]
    summary = {
        "metrics": final.to_dict(),
        "rounds_trained": len(result.eval_summaries),
        "num_prompts": len(result.tree.nodes),
        "stopped_early": result.stopped_early,
        "final_alpha_max_degrees": (
            math.degrees(result.mac_report.alpha_max[-1])
            if result.mac_report.alpha_max
            else None
        ),
        "label_counts": list(result.label_counts),
    }
    _write_json(out / "summary.json", summary)


def run_dipex(
    config: ExperimentConfig, out_dir: str | Path, overwrite: bool = False
) -> tuple[Path, RunResult]:
    """One full growth run; writes per-round metrics, tree and detections."""
    out = _prepare_out(out_dir, overwrite)
    world = generate_world(config.world)
    vocab = build_vocabulary(world, config.vocabulary)
    result = run(world, config.expansion, config.detector, vocab, config.max_dets)
    _write_run_artifacts(out, config, world, result)
    _write_manifest(out, "run", config.as_dict(), {"seeds": [config.expansion.seed]})
    return out, result


def run_prompt_count_sweep(
    config: ExperimentConfig,
    k_values: Sequence[int],
    out_dir: str | Path,
    overwrite: bool = False,
) -> Path:
    """Grow with different branching factors, holding everything else fixed."""
    out = _prepare_out(out_dir, overwrite)
    cap = max(config.max_dets)
    world = generate_world(config.world)
    vocab = build_vocabulary(world, config.vocabulary)
    rows = []
    for k in k_values:
        expansion = replace(config.expansion, num_children=int(k))
        result = run(world, expansion, config.detector, vocab, config.max_dets)
        final = result.eval_summaries[-1]
        rows.append(
            {
                "num_children": int(k),
                "num_prompts": len(result.tree.nodes),
                "rounds_trained": len(result.eval_summaries),
                "stopped_early": int(result.stopped_early),
                f"ar_{cap}": _fmt(final.ar(cap)),
                "ap": _fmt(final.ap),
                "alpha_max_degrees": (
                    _fmt(math.degrees(result.mac_report.alpha_max[-1]))
                    if result.mac_report.alpha_max
                    else ""
                ),
            }
        )
    _write_csv(
        out / "sweep_k.csv",
        [
            "num_children",
            "num_prompts",
            "rounds_trained",
            "stopped_early",
            f"ar_{cap}",
            "ap",
            "alpha_max_degrees",
        ],
        rows,
    )
    _write_manifest(
        out, "sweep-k", config.as_dict(), {"k_values": [int(k) for k in k_values]}
    )
    return out


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _tree_angle_stats(tree) -> tuple[float | None, float | None]:
    """Mean parent-child angle and mean sibling angle, in radians."""
    parent_angles = []
    sibling_angles = []
    by_parent: dict[int, list[int]] = {}
    for nid, node in sorted(tree.nodes.items()):
        if node.parent_id is None:
            continue
        by_parent.setdefault(node.parent_id, []).append(nid)
        parent = tree.nodes[node.parent_id].embedding
        cos = float(np.clip(node.embedding @ parent, -1.0, 1.0))
        parent_angles.append(math.acos(cos))
    for children in by_parent.values():
        for a in range(len(children)):
            for b in range(a + 1, len(children)):
                va = tree.nodes[children[a]].embedding
                vb = tree.nodes[children[b]].embedding
                cos = float(np.clip(va @ vb, -1.0, 1.0))
                sibling_angles.append(math.acos(cos))
    return _mean(parent_angles), _mean(sibling_angles)


def run_gamma_sweep(
    config: ExperimentConfig,
    gamma_values: Sequence[float],
    out_dir: str | Path,
    overwrite: bool = False,
) -> Path:
    """Vary the sibling-repulsion weight; report coverage and tree geometry."""
    out = _prepare_out(out_dir, overwrite)
    cap = max(config.max_dets)
    world = generate_world(config.world)
    vocab = build_vocabulary(world, config.vocabulary)
    rows = []
    for gamma in gamma_values:
        expansion = replace(config.expansion, gamma=float(gamma))
        result = run(world, expansion, config.detector, vocab, config.max_dets)
        final = result.eval_summaries[-1]
        mean_pc, mean_sib = _tree_angle_stats(result.tree)
        rows.append(
            {
                "gamma": f"{float(gamma):g}",
                "rounds_trained": len(result.eval_summaries),
                "stopped_early": int(result.stopped_early),
                f"ar_{cap}": _fmt(final.ar(cap)),
                "ap": _fmt(final.ap),
                "alpha_max_degrees": (
                    _fmt(math.degrees(result.mac_report.alpha_max[-1]))
                    if result.mac_report.alpha_max
                    else ""
                ),
                "mean_parent_child_degrees": _fmt(
                    math.degrees(mean_pc) if mean_pc is not None else None
                ),
                "mean_sibling_degrees": _fmt(
                    math.degrees(mean_sib) if mean_sib is not None else None
                ),
            }
        )
    _write_csv(
        out / "sweep_gamma.csv",
        [
            "gamma",
            "rounds_trained",
            "stopped_early",
            f"ar_{cap}",
            "ap",
            "alpha_max_degrees",
            "mean_parent_child_degrees",
            "mean_sibling_degrees",
        ],
        rows,
    )
    _write_manifest(
        out,
        "sweep-gamma",
        config.as_dict(),
        {"gamma_values": [float(g) for g in gamma_values]},
    )
    return out


def run_eval_only(
    gt_path: str | Path,
    det_paths: Sequence[str | Path],
    out_dir: str | Path,
    max_dets: Sequence[int] = DEFAULT_MAX_DETS,
    merge: bool = False,
    nms_sigma: float = 0.5,
    nms_floor: float = 0.001,
    overwrite: bool = False,
) -> tuple[Path, EvalSummary]:
    """Score COCO-format detection files against COCO-format ground truth.

    Multiple detection files are concatenated per scene; with ``merge`` the
    union additionally goes through Gaussian soft-NMS, which is the sane
    setting when the files come from independently trained prompt sets.
    """
    out = _prepare_out(out_dir, overwrite)
    gts = load_coco_ground_truth(gt_path)
    by_scene: dict[int, list] = {}
    for path in det_paths:
        for sid, recs in load_coco_detections(path).items():
            by_scene.setdefault(sid, []).extend(recs)
    if merge:
        by_scene = {
            sid: soft_nms(
                sorted(recs, key=lambda r: (-r.score, r.bbox.as_tuple())),
                sigma=nms_sigma,
                score_floor=nms_floor,
            )
            for sid, recs in by_scene.items()
        }
    summary = evaluate(by_scene, gts, max_dets)
    summary.write_json(out / "summary.json")
    summary.write_csv(out / "summary.csv")
    return out, summary
