"""Prompt-tree growth: spawn rotated children, train with dispersion, stop on
maximum angular coverage.

One run alternates self-training rounds with tree expansions.  Round 1 trains
the root alone against pseudo-labels bootstrapped from a zero-shot query
vocabulary.  Each expansion freezes the busiest current prompt (the one
responsible for the largest share of pseudo-labels, i.e. the coarsest), spawns
children by small random plane rotations of it, rebuilds pseudo-labels from
the current prompt set, and trains another round.  During a round the fresh
cohort feels the dispersion pair (attraction to its parent, log-sum-exp
repulsion among siblings) while every trainable prompt, cohort or not, is
supervised with focal classification loss against the pseudo-labels.  Box
losses are tracked for reporting; the simulated detector's box noise is not
differentiable with respect to the prompts, so they carry no gradient.

Growth stops after the configured number of expansions, or earlier when the
maximum pairwise angle either clears the coverage threshold or stalls between
consecutive rounds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BBox
from .detection_losses import giou_loss, l1_box_loss, sigmoid_focal_loss
from .detector import (
    DetectorParams,
    QueryMode,
    VocabularyConfig,
    _noise_direction,
    build_vocabulary,
    candidate_detections,
    detect_world,
)
from .dispersion import LossBreakdown, child_child_loss, combine, parent_child_loss
from .evaluation import DEFAULT_MAX_DETS, EvalSummary, GroundTruthSet, evaluate
from .geometry import apply_rotation, mac, normalize, pairwise_angle_matrix, sample_child_rotations
from .pseudo_labels import PseudoLabelSet, assign_responsibility, build_pseudo_labels
from .world import Scene, World


class EmptyPseudoLabels(RuntimeError):
    """The current prompt set produced no usable pseudo-labels."""


def _lock(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PromptNode:
    id: int
    embedding: np.ndarray
    depth: int
    parent_id: int | None
    frozen: bool = False

    def __post_init__(self) -> None:
        emb = _lock(self.embedding)
        if emb.ndim != 1:
            raise ValueError(f"prompt embedding must be 1-d, got shape {emb.shape}")
        if abs(float(np.linalg.norm(emb)) - 1.0) > 1e-6:
            raise ValueError(f"prompt {self.id} is not unit norm")
        object.__setattr__(self, "embedding", emb)


@dataclass
class PromptTree:
    """All prompts ever grown, plus which are frozen and which were just born.

    ``parent_queue`` lists frozen parents in freeze order; ``cohort`` holds the
    ids spawned by the most recent expansion (empty before the first one).
    ``round_index`` counts training rounds, starting at 1 for the root-only
    round and increasing by one per expansion.
    """

    nodes: dict[int, PromptNode]
    parent_queue: list[int] = field(default_factory=list)
    cohort: tuple[int, ...] = ()
    round_index: int = 1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.nodes:
            raise ValueError("empty prompt tree")
        dims = {node.embedding.shape[0] for node in self.nodes.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
        for nid, node in self.nodes.items():
            if nid != node.id:
                raise ValueError(f"node key {nid} does not match node id {node.id}")
            if node.parent_id is not None and node.parent_id not in self.nodes:
                raise ValueError(f"node {nid} has unknown parent {node.parent_id}")
        for pid in self.parent_queue:
            if pid not in self.nodes or not self.nodes[pid].frozen:
                raise ValueError(f"parent queue entry {pid} is not a frozen node")
        for cid in self.cohort:
            if cid not in self.nodes:
                raise ValueError(f"cohort member {cid} is not in the tree")
        if self.round_index < 1:
            raise ValueError(f"round_index must be >= 1, got {self.round_index}")

    @classmethod
    def from_root(cls, embedding: np.ndarray) -> "PromptTree":
        root = PromptNode(id=0, embedding=normalize(np.asarray(embedding, float)), depth=0, parent_id=None)
        return cls(nodes={0: root})

    @property
    def ids(self) -> list[int]:
        return sorted(self.nodes)

    @property
    def trainable_ids(self) -> list[int]:
        return [nid for nid in self.ids if not self.nodes[nid].frozen]

    @property
    def frozen_ids(self) -> list[int]:
        return [nid for nid in self.ids if self.nodes[nid].frozen]

    def prompt_items(self) -> list[tuple[int, np.ndarray]]:
        return [(nid, self.nodes[nid].embedding) for nid in self.ids]

    def embedding_matrix(self, ids: Sequence[int] | None = None) -> np.ndarray:
        use = self.ids if ids is None else list(ids)
        return np.stack([self.nodes[nid].embedding for nid in use])

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "parent_queue": list(self.parent_queue),
            "cohort": list(self.cohort),
            "nodes": [
                {
                    "id": node.id,
                    "parent_id": node.parent_id,
                    "depth": node.depth,
                    "frozen": node.frozen,
                    "embedding": [float(x) for x in node.embedding],
                }
                for _, node in sorted(self.nodes.items())
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PromptTree":
        nodes = {}
        for rec in data["nodes"]:
            node = PromptNode(
                id=int(rec["id"]),
                embedding=np.asarray(rec["embedding"], dtype=float),
                depth=int(rec["depth"]),
                parent_id=None if rec["parent_id"] is None else int(rec["parent_id"]),
                frozen=bool(rec["frozen"]),
            )
            nodes[node.id] = node
        return cls(
            nodes=nodes,
            parent_queue=[int(p) for p in data["parent_queue"]],
            cohort=tuple(int(c) for c in data["cohort"]),
            round_index=int(data["round_index"]),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "PromptTree":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ExpansionConfig:
    """Knobs for one growth run.  Angles are radians."""

    num_children: int = 9
    num_expansions: int = 3
    max_angle: float = math.radians(15.0)
    tau_parent: float = 0.1
    tau_child: float = 0.1
    gamma: float = 0.1
    gamma_bbox: float = 5.0
    gamma_giou: float = 2.0
    gamma_cls: float = 1.0
    mac_threshold: float = math.radians(75.0)
    mac_tolerance: float = math.radians(0.5)
    learning_rate: float = 0.05
    epochs_per_round: int = 20
    batch_size: int = 8
    label_threshold: float = 0.2
    label_iou_min: float = 0.5
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_expansions < 0:
            raise ValueError(f"num_expansions must be >= 0, got {self.num_expansions}")
        if self.num_expansions > 0 and self.num_children < 2:
            raise ValueError("need at least 2 children per expansion for sibling repulsion")
        if not (0.0 < self.max_angle <= math.pi / 2):
            raise ValueError(f"max_angle out of (0, pi/2]: {self.max_angle}")
        if self.tau_parent <= 0.0 or self.tau_child <= 0.0:
            raise ValueError("temperatures must be positive")
        if min(self.gamma, self.gamma_bbox, self.gamma_giou, self.gamma_cls) < 0.0:
            raise ValueError("loss weights must be non-negative")
        if not (0.0 < self.mac_threshold <= math.pi):
            raise ValueError(f"mac_threshold out of (0, pi]: {self.mac_threshold}")
        if self.mac_tolerance < 0.0:
            raise ValueError("mac_tolerance must be non-negative")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.epochs_per_round < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_round and batch_size must be >= 1")
        if not (0.0 <= self.label_threshold < 1.0):
            raise ValueError(f"label_threshold out of [0, 1): {self.label_threshold}")
        if not (0.0 < self.label_iou_min <= 1.0):
            raise ValueError(f"label_iou_min out of (0, 1]: {self.label_iou_min}")

    def as_dict(self) -> dict:
        return {
            "num_children": self.num_children,
            "num_expansions": self.num_expansions,
            "max_angle_degrees": math.degrees(self.max_angle),
            "tau_parent": self.tau_parent,
            "tau_child": self.tau_child,
            "gamma": self.gamma,
            "gamma_bbox": self.gamma_bbox,
            "gamma_giou": self.gamma_giou,
            "gamma_cls": self.gamma_cls,
            "mac_threshold_degrees": math.degrees(self.mac_threshold),
            "mac_tolerance_degrees": math.degrees(self.mac_tolerance),
            "learning_rate": self.learning_rate,
            "epochs_per_round": self.epochs_per_round,
            "batch_size": self.batch_size,
            "label_threshold": self.label_threshold,
            "label_iou_min": self.label_iou_min,
            "early_stop": self.early_stop,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ActivationStats:
    """How often each prompt was the responsible one for a pseudo-label."""

    counts: dict[int, int]
    total: int

    def frequency(self, prompt_id: int) -> float:
        if self.total == 0:
            return 0.0
        return self.counts.get(prompt_id, 0) / self.total


@dataclass
class MacReport:
    """Maximum pairwise angle after each multi-prompt round."""

    rounds: list[int] = field(default_factory=list)
    alpha_max: list[float] = field(default_factory=list)
    matrices: list[np.ndarray] = field(default_factory=list)

    def record(self, round_index: int, embeddings: np.ndarray) -> float:
        matrix = pairwise_angle_matrix(embeddings)
        value = mac(embeddings)
        self.rounds.append(int(round_index))
        self.alpha_max.append(float(value))
        self.matrices.append(matrix)
        return float(value)

    def converged(self, threshold: float, tolerance: float) -> bool:
        if not self.alpha_max:
            return False
        if self.alpha_max[-1] >= threshold:
            return True
        if len(self.alpha_max) >= 2:
            return abs(self.alpha_max[-1] - self.alpha_max[-2]) < tolerance
        return False


@dataclass
class RoundStats:
    round_index: int
    epoch_losses: list[LossBreakdown]
    epoch_norm_error: list[float]
    label_count: int
    assignments_final: int = 0
    misses_final: int = 0


@dataclass
class _SceneData:
    """Static per-scene tensors shared by every training step of a round."""

    scene: Scene
    emb: np.ndarray        # (n_obj, dim) unit object embeddings
    gt: np.ndarray         # (n_obj, 4) ground-truth xyxy
    sqrt_area: np.ndarray  # (n_obj,)
    dirs: np.ndarray       # (n_obj, 2) hashed unit shift directions
    label_boxes: np.ndarray  # (n_lab, 4) xyxy
    labels: list           # PseudoLabel in the same order


def _scene_data(world: World, labels: PseudoLabelSet, seed: int) -> dict[int, _SceneData]:
    out = {}
    for scene in world.scenes:
        objs = world.scene_objects(scene)
        gt = np.array([o.bbox.as_tuple() for o in objs], dtype=float)
        scene_labels = list(labels.labels(scene.id))
        lab = (
            np.array([l.bbox.as_tuple() for l in scene_labels], dtype=float)
            if scene_labels
            else np.zeros((0, 4))
        )
        out[scene.id] = _SceneData(
            scene=scene,
            emb=np.stack([o.embedding for o in objs]),
            gt=gt,
            sqrt_area=np.sqrt((gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])),
            dirs=np.array([_noise_direction(seed, scene.id, o.id) for o in objs], dtype=float),
            label_boxes=lab,
            labels=scene_labels,
        )
    return out


def _candidate_grid(
    sd: _SceneData, prompts: np.ndarray, params: DetectorParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(logits, scores, boxes) for every (prompt, object) pair of one scene.

    Vectorized twin of the detector's candidate path: same logit affine, same
    score-dependent shift along the hashed direction, same clipping.  Boxes
    come back as an (n_prompt, n_obj, 4) xyxy array.
    """
    norms = np.linalg.norm(prompts, axis=1, keepdims=True)
    cos = np.clip((prompts / norms) @ sd.emb.T, -1.0, 1.0)
    logits = params.logit_scale * cos + params.logit_bias
    scores = 1.0 / (1.0 + np.exp(-np.clip(logits, -60.0, 60.0)))
    mag = params.box_noise * (1.0 - scores) * sd.sqrt_area[None, :]
    dx = mag * sd.dirs[None, :, 0]
    dy = mag * sd.dirs[None, :, 1]
    w, h = float(sd.scene.width), float(sd.scene.height)
    x0 = np.minimum(np.maximum(sd.gt[None, :, 0] + dx, 0.0), w)
    y0 = np.minimum(np.maximum(sd.gt[None, :, 1] + dy, 0.0), h)
    x1 = np.maximum(x0, np.minimum(np.maximum(sd.gt[None, :, 2] + dx, 0.0), w))
    y1 = np.maximum(y0, np.minimum(np.maximum(sd.gt[None, :, 3] + dy, 0.0), h))
    boxes = np.stack([x0, y0, x1, y1], axis=-1)
    return logits, scores, boxes


def _iou_grid(boxes: np.ndarray, label_boxes: np.ndarray) -> np.ndarray:
    """IoU between candidate boxes (n_p, n_o, 4) and labels (n_l, 4)."""
    a = boxes[:, :, None, :]
    b = label_boxes[None, None, :, :]
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


@dataclass
class _BatchTally:
    cls_sum: float = 0.0
    bbox_sum: float = 0.0
    giou_sum: float = 0.0
    num_assigned: int = 0
    num_missed: int = 0


def _accumulate_scene(
    sd: _SceneData,
    V: np.ndarray,
    row_trainable: np.ndarray,
    params: DetectorParams,
    config: ExpansionConfig,
    grad: np.ndarray,
    tally: _BatchTally,
) -> None:
    """Match one scene's labels against current candidates; add focal terms.

    Matching mirrors the public responsibility assignment: per label, every
    candidate with IoU above the floor counts, per prompt only its best score
    survives, and the best-scoring prompt (ties to the lowest id; rows are in
    id order) is the responsible one with focal target 1, the rest target 0.
    """
    if sd.label_boxes.shape[0] == 0:
        return
    logits, scores, boxes = _candidate_grid(sd, V, params)
    ious = _iou_grid(boxes, sd.label_boxes)
    norms = np.linalg.norm(V, axis=1)
    unit = V / norms[:, None]
    cos = np.clip(unit @ sd.emb.T, -1.0, 1.0)

    for li, label in enumerate(sd.labels):
        matched_mask = ious[:, :, li] >= config.label_iou_min
        rows = np.flatnonzero(matched_mask.any(axis=1))
        if rows.size == 0:
            tally.num_missed += 1
            continue
        tally.num_assigned += 1
        masked_scores = np.where(matched_mask[rows], scores[rows], -np.inf)
        best_obj = np.argmax(masked_scores, axis=1)
        best_scores = masked_scores[np.arange(rows.size), best_obj]
        responsible_pos = int(np.argmax(best_scores))

        sel_logits = logits[rows, best_obj]
        targets = np.zeros(rows.size)
        targets[responsible_pos] = 1.0
        losses, dlosses = sigmoid_focal_loss(sel_logits, targets)
        tally.cls_sum += float(np.sum(losses))

        for k in np.flatnonzero(row_trainable[rows]):
            r = rows[k]
            o = best_obj[k]
            coeff = float(dlosses[k]) * params.logit_scale
            grad[r] += coeff * (sd.emb[o] - cos[r, o] * unit[r]) / norms[r]

        r_row = rows[responsible_pos]
        r_obj = best_obj[responsible_pos]
        cand = BBox(*(float(v) for v in boxes[r_row, r_obj]))
        tally.bbox_sum += l1_box_loss(cand, label.bbox, sd.scene.width, sd.scene.height)
        tally.giou_sum += giou_loss(cand, label.bbox)


def train_round(
    tree: PromptTree,
    labels: PseudoLabelSet,
    world: World,
    config: ExpansionConfig,
    params: DetectorParams,
    rng: np.random.Generator,
) -> RoundStats:
    """Optimize every trainable prompt for one round and write results back.

    The newest cohort additionally feels attraction to its frozen parent and
    log-sum-exp repulsion among siblings; in the root-only round both terms
    are zero.  Updates are projected gradient steps: subtract, renormalize,
    with an exact skip when the step is exactly zero so untouched prompts
    keep their bytes.
    """
    ids = tree.ids
    trainable = tree.trainable_ids
    if not trainable:
        raise ValueError("no trainable prompts left")
    row_of = {nid: i for i, nid in enumerate(ids)}
    row_trainable = np.array([not tree.nodes[nid].frozen for nid in ids])
    V = tree.embedding_matrix(ids)

    cohort_rows = np.array([row_of[c] for c in tree.cohort], dtype=int)
    use_dispersion = cohort_rows.size >= 2
    parent_vec = (
        tree.nodes[tree.parent_queue[-1]].embedding if use_dispersion else None
    )

    scene_data = _scene_data(world, labels, config.seed)
    scene_ids = np.array(sorted(scene_data), dtype=int)
    stats = RoundStats(
        round_index=tree.round_index,
        epoch_losses=[],
        epoch_norm_error=[],
        label_count=len(labels),
    )

    for _ in range(config.epochs_per_round):
        order = rng.permutation(scene_ids)
        batch_breakdowns: list[LossBreakdown] = []
        epoch_assigned = 0
        epoch_missed = 0
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            grad_cls = np.zeros_like(V)
            tally = _BatchTally()
            for sid in batch:
                _accumulate_scene(
                    scene_data[int(sid)], V, row_trainable, params, config, grad_cls, tally
                )
            denom = max(tally.num_assigned, 1)
            cls_value = tally.cls_sum / denom
            bbox_value = tally.bbox_sum / denom
            giou_value = tally.giou_sum / denom
            grad_cls /= denom
            epoch_assigned += tally.num_assigned
            epoch_missed += tally.num_missed

            if use_dispersion:
                pc_value, pc_grad = parent_child_loss(
                    V[cohort_rows], parent_vec, config.tau_parent
                )
                cc_value, cc_grad = child_child_loss(V[cohort_rows], config.tau_child)
            else:
                pc_value, cc_value = 0.0, 0.0

            breakdown, _ = combine(
                pc_value,
                cc_value,
                bbox_value,
                giou_value,
                cls_value,
                gamma=config.gamma,
                gamma_bbox=config.gamma_bbox,
                gamma_giou=config.gamma_giou,
                gamma_cls=config.gamma_cls,
            )
            batch_breakdowns.append(breakdown)

            total_grad = config.gamma_cls * grad_cls
            if use_dispersion:
                total_grad[cohort_rows] += pc_grad + config.gamma * cc_grad
            step = config.learning_rate * total_grad
            moved = (step != 0.0).any(axis=1) & row_trainable
            if moved.any():
                upd = V[moved] - step[moved]
                V[moved] = upd / np.linalg.norm(upd, axis=1, keepdims=True)

        stats.epoch_losses.append(_mean_breakdown(batch_breakdowns))
        stats.epoch_norm_error.append(
            float(np.max(np.abs(np.linalg.norm(V[row_trainable], axis=1) - 1.0)))
        )
        stats.assignments_final = epoch_assigned
        stats.misses_final = epoch_missed

    for nid in trainable:
        node = tree.nodes[nid]
        tree.nodes[nid] = replace(node, embedding=V[row_of[nid]])
    return stats


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    if not parts:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    n = len(parts)
    return LossBreakdown(
        parent_child=sum(p.parent_child for p in parts) / n,
        child_child=sum(p.child_child for p in parts) / n,
        bbox=sum(p.bbox for p in parts) / n,
        giou=sum(p.giou for p in parts) / n,
        cls=sum(p.cls for p in parts) / n,
        total=sum(p.total for p in parts) / n,
    )


def activation_frequency(
    tree: PromptTree,
    labels: PseudoLabelSet,
    world: World,
    params: DetectorParams,
    iou_min: float = 0.5,
    seed: int = 0,
) -> ActivationStats:
    """Share of pseudo-labels each prompt answers for, over the whole world."""
    items = tree.prompt_items()
    dets = []
    for scene in world.scenes:
        dets.extend(candidate_detections(scene, items, params, world, seed))
    assignments, _ = assign_responsibility(dets, labels, iou_min)
    counts = {nid: 0 for nid, _ in items}
    for record in assignments:
        counts[record.responsible_prompt_id] += 1
    return ActivationStats(counts=counts, total=len(assignments))


def select_parent(stats: ActivationStats, candidates: Sequence[int]) -> int:
    """Next prompt to split: the candidate answering for the most labels.

    A prompt that wins responsibility everywhere is covering too much ground
    with one vector; splitting it buys the most new coverage.  Ties go to the
    lowest id.
    """
    if not candidates:
        raise ValueError("no candidate parents")
    return min(candidates, key=lambda nid: (-stats.counts.get(nid, 0), nid))


def expand(
    tree: PromptTree, parent_id: int, config: ExpansionConfig, rng: np.random.Generator
) -> tuple[int, ...]:
    """Freeze the parent and spawn rotated children; returns the new cohort.

    Children are copies of the parent nudged by an independent random plane
    rotation each (uniform axis pair, angle uniform within +/- max_angle), so
    they start close together and the round's dispersion terms spread them.
    """
    if parent_id not in tree.nodes:
        raise ValueError(f"unknown parent {parent_id}")
    parent = tree.nodes[parent_id]
    if parent.frozen:
        raise ValueError(f"parent {parent_id} is already frozen")
    tree.nodes[parent_id] = replace(parent, frozen=True)
    tree.parent_queue.append(parent_id)

    next_id = max(tree.nodes) + 1
    rotations = sample_child_rotations(
        parent.embedding, config.num_children, config.max_angle, rng
    )
    cohort = []
    for offset, rotation in enumerate(rotations):
        child = PromptNode(
            id=next_id + offset,
            embedding=apply_rotation(parent.embedding, rotation),
            depth=parent.depth + 1,
            parent_id=parent_id,
        )
        tree.nodes[child.id] = child
        cohort.append(child.id)
    tree.cohort = tuple(cohort)
    tree.round_index += 1
    return tree.cohort


def rebuild_labels(
    tree: PromptTree,
    world: World,
    config: ExpansionConfig,
    params: DetectorParams,
) -> PseudoLabelSet:
    """Self-training labels from the current prompt set.

    Every prompt runs the detector alone (prediction merging degenerates to
    plain thresholding for a single prompt) so one prompt's weak scores never
    suppress another's; the label builder then unions and deduplicates.
    """
    label_params = replace(params, score_threshold=config.label_threshold)
    sources = {}
    for nid, emb in tree.prompt_items():
        per_scene = detect_world(
            world, [(nid, emb)], QueryMode.PREDICTION_MERGING, label_params, config.seed
        )
        sources[f"prompt_{nid:03d}"] = [d for dets in per_scene.values() for d in dets]
    return build_pseudo_labels(
        sources,
        threshold=config.label_threshold,
        sigma=params.nms_sigma,
        score_floor=params.nms_floor,
    )


def bootstrap_labels(
    queries: Sequence[np.ndarray],
    world: World,
    config: ExpansionConfig,
    params: DetectorParams,
) -> PseudoLabelSet:
    """Zero-shot pseudo-labels from a fixed query vocabulary."""
    label_params = replace(params, score_threshold=config.label_threshold)
    sources = {}
    for qi, query in enumerate(queries):
        per_scene = detect_world(
            world, [(qi, query)], QueryMode.PREDICTION_MERGING, label_params, config.seed
        )
        sources[f"vocab_{qi:02d}"] = [d for dets in per_scene.values() for d in dets]
    return build_pseudo_labels(
        sources,
        threshold=config.label_threshold,
        sigma=params.nms_sigma,
        score_floor=params.nms_floor,
    )


@dataclass
class RunResult:
    tree: PromptTree
    mac_report: MacReport
    eval_summaries: list[EvalSummary]
    round_stats: list[RoundStats]
    activation_history: list[ActivationStats]
    label_counts: list[int]
    stopped_early: bool
    config: ExpansionConfig


def run(
    world: World,
    config: ExpansionConfig,
    params: DetectorParams | None = None,
    vocabulary: Sequence[np.ndarray] | None = None,
    max_dets: Sequence[int] = DEFAULT_MAX_DETS,
) -> RunResult:
    """Full growth loop: bootstrap, train, expand until coverage saturates.

    Round 1 trains the root (the normalized mean of the query vocabulary)
    against zero-shot pseudo-labels.  Each expansion then freezes the busiest
    prompt, spawns its children, rebuilds labels from the grown prompt set
    and trains again.  After every multi-prompt round the maximum pairwise
    angle is recorded; with early stopping enabled the loop exits once it
    clears the threshold or moves less than the tolerance between rounds.
    Every round ends with a detector evaluation over the whole world.
    """
    params = params if params is not None else DetectorParams()
    if vocabulary is None:
        vocabulary = build_vocabulary(world, VocabularyConfig(seed=config.seed))
    if not len(vocabulary):
        raise ValueError("empty query vocabulary")
    rng = np.random.default_rng(config.seed)
    gts = GroundTruthSet.from_world(world)

    tree = PromptTree.from_root(normalize(np.sum(np.stack(vocabulary), axis=0)))
    labels = bootstrap_labels(vocabulary, world, config, params)
    if len(labels) == 0:
        raise EmptyPseudoLabels("zero-shot vocabulary produced no labels")

    mac_report = MacReport()
    round_stats = [train_round(tree, labels, world, config, params, rng)]
    label_counts = [len(labels)]
    summaries = [_evaluate_tree(tree, world, params, gts, config.seed, max_dets)]
    activation_history: list[ActivationStats] = []
    stopped_early = False

    for _ in range(config.num_expansions):
        stats = activation_frequency(
            tree, labels, world, params, config.label_iou_min, config.seed
        )
        activation_history.append(stats)
        candidates = list(tree.cohort) if tree.cohort else tree.trainable_ids
        parent_id = select_parent(stats, candidates)
        expand(tree, parent_id, config, rng)

        labels = rebuild_labels(tree, world, config, params)
        if len(labels) == 0:
            raise EmptyPseudoLabels(
                f"round {tree.round_index}: prompt set produced no labels"
            )
        label_counts.append(len(labels))
        round_stats.append(train_round(tree, labels, world, config, params, rng))
        mac_report.record(tree.round_index, tree.embedding_matrix())
        summaries.append(_evaluate_tree(tree, world, params, gts, config.seed, max_dets))

        if config.early_stop and mac_report.converged(
            config.mac_threshold, config.mac_tolerance
        ):
            stopped_early = True
            break

    return RunResult(
        tree=tree,
        mac_report=mac_report,
        eval_summaries=summaries,
        round_stats=round_stats,
        activation_history=activation_history,
        label_counts=label_counts,
        stopped_early=stopped_early,
        config=config,
    )


def _evaluate_tree(
    tree: PromptTree,
    world: World,
    params: DetectorParams,
    gts: GroundTruthSet,
    seed: int,
    max_dets: Sequence[int],
) -> EvalSummary:
    dets = detect_world(
        world, tree.prompt_items(), QueryMode.PREDICTION_MERGING, params, seed
    )
    return evaluate(dets, gts, max_dets)
