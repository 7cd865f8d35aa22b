"""Detection-side losses: normalized L1 box regression, generalized IoU and
the sigmoid focal classification loss (with its logit derivative).

The box losses are reported for bookkeeping only; in this artifact the
detector's localization comes from a non-differentiable noise model, so no
box gradient ever flows back into prompt embeddings.  Focal loss is the one
detection term that trains prompts.
"""

from __future__ import annotations

import logging

import numpy as np

from .boxes import BBox, hull_area, intersection_area

log = logging.getLogger(__name__)


def l1_box_loss(pred: BBox, target: BBox, image_width: float, image_height: float) -> float:
    """Mean absolute difference over (cx, cy, w, h), each normalized by the
    image dimension along its axis (x-like by width, y-like by height)."""
    if image_width <= 0.0 or image_height <= 0.0:
        raise ValueError(f"image size must be positive: {image_width}x{image_height}")
    if target.area == 0.0:
        log.warning("l1_box_loss: degenerate zero-area target %s", target)
    pcx, pcy, pw, ph = pred.to_cxcywh()
    tcx, tcy, tw, th = target.to_cxcywh()
    terms = (
        abs(pcx - tcx) / image_width,
        abs(pcy - tcy) / image_height,
        abs(pw - tw) / image_width,
        abs(ph - th) / image_height,
    )
    return sum(terms) / 4.0


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU in [-1, 1]: IoU minus the hull's excess area fraction.

    Two zero-area boxes have no defined hull ratio; that degenerate case
    returns 0 and is flagged on the module logger.
    """
    hull = hull_area(a, b)
    if hull <= 0.0:
        log.warning("giou: degenerate boxes with empty hull (%s, %s)", a, b)
        return 0.0
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    iou_val = inter / union if union > 0.0 else 0.0
    return iou_val - (hull - union) / hull


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + exp(x)) without overflow for large |x|
    return np.logaddexp(0.0, x)


def sigmoid_focal_loss(
    logit: float | np.ndarray,
    target: float | np.ndarray,
    alpha: float = 0.25,
    gamma_focal: float = 2.0,
) -> tuple[float | np.ndarray, float | np.ndarray]:
    """Binary sigmoid focal loss and its derivative w.r.t. the logit.

    loss = -alpha_t * (1 - p_t)^gamma * log(p_t) with p_t the probability of
    the true class; gamma_focal = 0 recovers alpha-weighted cross-entropy.
    Accepts scalars or broadcastable arrays of logits/targets in {0, 1}.
    Stable for |logit| up to ~1e3 (log-sigmoid via softplus).
    """
    x = np.asarray(logit, dtype=float)
    t = np.asarray(target, dtype=float)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("targets must be 0 or 1")
    sign = 2.0 * t - 1.0
    z = sign * x
    p_t = 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))
    log_p_t = -_softplus(-z)
    one_m_p_t = 1.0 / (1.0 + np.exp(np.clip(z, -60.0, 60.0)))
    alpha_t = t * alpha + (1.0 - t) * (1.0 - alpha)
    focus = one_m_p_t ** gamma_focal
    loss = -alpha_t * focus * log_p_t
    dloss = sign * alpha_t * focus * (gamma_focal * p_t * log_p_t - one_m_p_t)
    if np.isscalar(logit) or (isinstance(logit, (int, float))):
        return float(loss), float(dloss)
    return loss, dloss


def giou_loss(a: BBox, b: BBox) -> float:
    """Standard form used in detection training: 1 - giou, in [0, 2]."""
    return 1.0 - giou(a, b)
