"""Pseudo-label construction from detector output.

Predictions from one or more query sources are unioned per scene, run through
Gaussian soft-NMS, and kept when their suppressed score clears the label
threshold.  Surviving labels keep their original (pre-suppression) scores:
suppression decides membership only, which makes the build a fixed point --
rebuilding from its own output reproduces it exactly.  Responsibility
assignment then matches labels back to per-prompt detections by IoU and
declares the best-scoring prompt responsible for each label.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from .boxes import BBox, iou


class ScoredBox(Protocol):
    bbox: BBox
    score: float


@dataclass(frozen=True)
class PseudoLabel:
    scene_id: int
    bbox: BBox
    score: float
    source: str


@dataclass
class PseudoLabelSet:
    """Per-scene pseudo ground truth plus the recipe that produced it."""

    by_scene: dict[int, tuple[PseudoLabel, ...]]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_scene.values())

    def labels(self, scene_id: int) -> tuple[PseudoLabel, ...]:
        return self.by_scene.get(scene_id, ())

    def all_labels(self) -> Iterable[PseudoLabel]:
        for scene_id in sorted(self.by_scene):
            yield from self.by_scene[scene_id]

    def to_coco(self, scene_dims: Mapping[int, tuple[int, int]]) -> dict:
        """COCO annotations document; scene_dims maps scene id -> (w, h)."""
        images = [
            {"id": int(sid), "width": int(scene_dims[sid][0]), "height": int(scene_dims[sid][1])}
            for sid in sorted(self.by_scene)
        ]
        annotations = []
        for label in self.all_labels():
            x, y, w, h = label.bbox.to_xywh()
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": int(label.scene_id),
                    "category_id": 1,
                    "bbox": [float(x), float(y), float(w), float(h)],
                    "area": float(label.bbox.area),
                    "iscrowd": 0,
                    "score": float(label.score),
                }
            )
        return {
            "info": dict(self.meta),
            "images": images,
            "annotations": annotations,
            "categories": [{"id": 1, "name": "object"}],
        }


def soft_nms(dets: Sequence[ScoredBox], sigma: float = 0.5, score_floor: float = 0.001) -> list:
    """Gaussian soft-NMS: repeatedly select the highest-scoring box (ties to
    the earliest), rescale the rest by exp(-IoU^2 / sigma), and drop anything
    whose running score falls below ``score_floor``.

    Returns rescored copies sorted by final score (the selection order).  No
    score ever increases and the top-1 detection is untouched.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    remaining = [(float(d.score), idx, d) for idx, d in enumerate(dets)]
    kept = []
    while remaining:
        best_pos = min(range(len(remaining)), key=lambda i: (-remaining[i][0], remaining[i][1]))
        score, _, det = remaining.pop(best_pos)
        kept.append(dataclasses.replace(det, score=score))
        box = det.bbox
        rescored = []
        for s, idx, d in remaining:
            s2 = s * math.exp(-iou(box, d.bbox) ** 2 / sigma)
            if s2 >= score_floor:
                rescored.append((s2, idx, d))
        remaining = rescored
    return kept


def _suppression_survivors(
    records: Sequence[tuple[float, int, BBox]], sigma: float, floor: float
) -> list[int]:
    """Indices of records kept by Gaussian suppression with a hard floor.

    Same dynamics as soft_nms, but boxes dropped by the floor are removed
    before they are ever selected, so survivors' trajectories depend only on
    other survivors (this is what makes the label build idempotent).
    """
    remaining = [(score, idx, box) for score, idx, box in records]
    survivors: list[int] = []
    while remaining:
        best_pos = min(range(len(remaining)), key=lambda i: (-remaining[i][0], remaining[i][1]))
        score, idx, box = remaining.pop(best_pos)
        survivors.append(idx)
        rescored = []
        for s, i, b in remaining:
            s2 = s * math.exp(-iou(box, b) ** 2 / sigma)
            if s2 >= floor:
                rescored.append((s2, i, b))
        remaining = rescored
    return survivors


def build_pseudo_labels(
    detections_by_source: Mapping[str, Sequence],
    threshold: float = 0.2,
    sigma: float = 0.5,
    score_floor: float = 0.001,
) -> PseudoLabelSet:
    """Union detections across sources, suppress duplicates, keep confident ones.

    Inputs are any objects with scene_id/bbox/score attributes, grouped under
    a source tag.  Exact duplicates (same scene, box and score) collapse to
    one record before suppression, so listing a source twice changes nothing.
    The label threshold acts as the suppression floor: a candidate whose
    suppressed score dips below it is discarded before it can suppress
    anyone else, and survivors are recorded with their original scores.
    Idempotent: feeding the output back as a single source returns it.
    """
    if not (0.0 <= threshold < 1.0):
        raise ValueError(f"threshold out of [0, 1): {threshold}")
    per_scene: dict[int, list[tuple[float, BBox, str]]] = {}
    seen: set[tuple[int, tuple, float]] = set()
    for source in sorted(detections_by_source):
        for det in detections_by_source[source]:
            key = (int(det.scene_id), det.bbox.as_tuple(), float(det.score))
            if key in seen:
                continue
            seen.add(key)
            per_scene.setdefault(int(det.scene_id), []).append(
                (float(det.score), det.bbox, str(source))
            )

    floor = max(score_floor, threshold)
    by_scene: dict[int, tuple[PseudoLabel, ...]] = {}
    for scene_id in sorted(per_scene):
        entries = sorted(
            per_scene[scene_id], key=lambda e: (-e[0], e[1].as_tuple(), e[2])
        )
        records = [(score, idx, box) for idx, (score, box, _) in enumerate(entries)]
        survivors = _suppression_survivors(records, sigma, floor)
        labels = [
            PseudoLabel(scene_id, entries[i][1], entries[i][0], entries[i][2])
            for i in sorted(survivors)
        ]
        if labels:
            by_scene[scene_id] = tuple(labels)
    meta = {
        "threshold": threshold,
        "sigma": sigma,
        "score_floor": score_floor,
        "sources": sorted(str(s) for s in detections_by_source),
    }
    return PseudoLabelSet(by_scene=by_scene, meta=meta)


@dataclass(frozen=True)
class ResponsibilityRecord:
    """One pseudo-label matched to the prompt set.

    ``targets`` holds the focal-loss target (0/1) for every prompt that had a
    detection overlapping the label; exactly one prompt carries target 1.
    ``matched`` keeps that best detection per prompt for box bookkeeping.
    """

    label: PseudoLabel
    responsible_prompt_id: int
    targets: dict[int, int]
    matched: dict[int, object]


def assign_responsibility(
    dets: Sequence,
    labels: PseudoLabelSet | Sequence[PseudoLabel],
    iou_min: float = 0.5,
) -> tuple[list[ResponsibilityRecord], list[PseudoLabel]]:
    """Match labels to per-prompt detections and pick the responsible prompt.

    For each label, every detection with IoU >= iou_min is a match; per
    prompt only its best-scoring match counts.  The prompt with the highest
    matched score (ties to the lowest prompt id) is responsible (target 1),
    every other matched prompt gets target 0.  Labels with no match at all
    are returned separately as misses.
    """
    if not (0.0 < iou_min <= 1.0):
        raise ValueError(f"iou_min out of (0, 1]: {iou_min}")
    label_list = (
        list(labels.all_labels()) if isinstance(labels, PseudoLabelSet) else list(labels)
    )
    dets_by_scene: dict[int, list] = {}
    for d in dets:
        dets_by_scene.setdefault(int(d.scene_id), []).append(d)

    assignments: list[ResponsibilityRecord] = []
    misses: list[PseudoLabel] = []
    for label in label_list:
        best_by_prompt: dict[int, object] = {}
        for det in dets_by_scene.get(label.scene_id, ()):
            if iou(det.bbox, label.bbox) < iou_min:
                continue
            pid = int(det.prompt_id)
            cur = best_by_prompt.get(pid)
            if cur is None or det.score > cur.score:
                best_by_prompt[pid] = det
        if not best_by_prompt:
            misses.append(label)
            continue
        responsible = min(
            best_by_prompt, key=lambda pid: (-best_by_prompt[pid].score, pid)
        )
        targets = {pid: int(pid == responsible) for pid in sorted(best_by_prompt)}
        assignments.append(
            ResponsibilityRecord(
                label=label,
                responsible_prompt_id=responsible,
                targets=targets,
                matched={pid: best_by_prompt[pid] for pid in sorted(best_by_prompt)},
            )
        )
    return assignments, misses
