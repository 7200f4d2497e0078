#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Object discovery metrics comparing predicted slot masks with ground truth
instance masks:

* FG-ARI: adjusted Rand index over ground-truth foreground positions only.
* mBO: mean best overlap; every ground-truth mask takes its best IoU over all
  predictions (non-exclusive), averaged. Instance masks give mBO^i; merging
  instances of one category first gives mBO^c. The per-prediction reading
  (every non-empty prediction takes its best IoU over ground truth) is
  available through 'reading'.
* mIoU: mean IoU over a one-to-one Hungarian matching of ground-truth masks
  (background included) to predictions; unmatched ground truth scores 0.

All masks are boolean arrays of shape (masks, N).

Copyright 2020 Ross Burton

Permission is hereby granted, free of charge, to any person
obtaining a copy of this software and associated documentation
files (the "Software"), to deal in the Software without restriction,
including without limitation the rights to use, copy, modify,
merge, publish, distribute, sublicense, and/or sell copies of the
Software, and to permit persons to whom the Software is furnished
to do so, subject to the following conditions:
The above copyright notice and this permission notice shall be included
in all copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND,
EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF
MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT.
IN NO EVENT SHALL THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY
CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION OF CONTRACT,
TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE
SOFTWARE OR THE USE OR OTHER DEALINGS IN THE SOFTWARE.
"""
import logging
from dataclasses import dataclass
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

logger = logging.getLogger(__name__)

MBO_READINGS = ("per_gt", "per_pred")
MBO_MODES = ("instance", "class")


class MetricError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


@dataclass
class Partition:
    """
    Attributes
    ----------
    labels: numpy.ndarray
        N cluster ids
    foreground: numpy.ndarray
        N booleans, true where a ground-truth object lies
    """

    labels: np.ndarray
    foreground: np.ndarray


def fg_ari(gt: Partition, pred: Partition) -> float:
    """
    Adjusted Rand index restricted to the ground-truth foreground.

    Parameters
    ----------
    gt: Partition
        Its foreground defines the positions compared
    pred: Partition

    Returns
    -------
    float

    Raises
    ------
    MetricError
        Lengths differ or no foreground position
    """
    gt_labels, pred_labels = np.asarray(gt.labels), np.asarray(pred.labels)
    if gt_labels.shape != pred_labels.shape:
        raise MetricError(f"Partitions differ in length: {gt_labels.shape} vs {pred_labels.shape}")
    fg = np.asarray(gt.foreground, dtype=bool)
    if not fg.any():
        raise MetricError("FG-ARI is undefined for a scene without foreground")
    return float(adjusted_rand_score(gt_labels[fg], pred_labels[fg]))


def iou_matrix(gt_masks: np.ndarray, pred_masks: np.ndarray) -> np.ndarray:
    """
    IoU of every ground-truth mask with every predicted mask (0 where both are empty).

    Returns
    -------
    numpy.ndarray
        G x P
    """
    gt = np.asarray(gt_masks, dtype=np.float64)
    pred = np.asarray(pred_masks, dtype=np.float64)
    if gt.shape[0] == 0 or pred.shape[0] == 0:
        return np.zeros((gt.shape[0], pred.shape[0]))
    if gt.shape[1] != pred.shape[1]:
        raise MetricError(f"Masks differ in length: {gt.shape} vs {pred.shape}")
    intersections = gt @ pred.T
    union = gt.sum(axis=1)[:, None] + pred.sum(axis=1)[None, :] - intersections
    return np.divide(intersections, union, out=np.zeros_like(intersections), where=union > 0)


def hungarian(cost: np.ndarray) -> List[Tuple[int, int]]:
    """
    Minimum-cost one-to-one assignment. Rectangular matrices are padded to square with a
    constant, which leaves the optimum over real pairs unchanged; only real pairs are returned.

    Parameters
    ----------
    cost: numpy.ndarray
        R x C, finite

    Returns
    -------
    List[Tuple[int, int]]
        min(R, C) (row, column) pairs, sorted by row
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MetricError(f"Cost matrix must be two-dimensional, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise MetricError("Cost matrix contains non-finite entries")
    r, c = cost.shape
    n = max(r, c)
    if n == 0:
        return []
    padded = np.full((n, n), cost.max() if cost.size else 0.0)
    padded[:r, :c] = cost
    rows, cols = linear_sum_assignment(padded)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if i < r and j < c]


def miou_hungarian(gt_masks: np.ndarray, pred_masks: np.ndarray) -> float:
    """
    Mean IoU over a Hungarian matching that maximises total IoU.

    Parameters
    ----------
    gt_masks: numpy.ndarray
        G x N, background included as one of the masks
    pred_masks: numpy.ndarray
        P x N

    Returns
    -------
    float
        Sum of matched IoUs divided by G
    """
    ious = iou_matrix(gt_masks, pred_masks)
    if ious.shape[0] == 0:
        raise MetricError("mIoU is undefined without ground-truth masks")
    matched = hungarian(-ious)
    return float(sum(ious[i, j] for i, j in matched) / ious.shape[0])


def merge_by_category(gt_masks: np.ndarray, categories: np.ndarray) -> np.ndarray:
    """One mask per distinct category (union of its instances), ordered by category id."""
    categories = np.asarray(categories)
    return np.array([np.any(gt_masks[categories == c], axis=0) for c in np.unique(categories)], dtype=bool).reshape(
        -1, np.asarray(gt_masks).shape[1]
    )


def mbo(
    gt_masks: np.ndarray,
    pred_masks: np.ndarray,
    mode: str = "instance",
    categories: Optional[np.ndarray] = None,
    reading: str = "per_gt",
) -> float:
    """
    Mean best overlap.

    Parameters
    ----------
    gt_masks: numpy.ndarray
        G x N object masks (no background)
    pred_masks: numpy.ndarray
        P x N
    mode: str (default="instance")
        'instance' or 'class'; class mode merges ground-truth instances sharing a category
    categories: numpy.ndarray, optional
        G category ids, required for class mode
    reading: str (default="per_gt")
        'per_gt' averages, over ground-truth masks, the best IoU with any prediction;
        'per_pred' averages, over non-empty predictions, the best IoU with any ground truth

    Returns
    -------
    float

    Raises
    ------
    MetricError
        Invalid mode/reading, missing categories, or nothing to average
    """
    if mode not in MBO_MODES:
        raise MetricError(f"Invalid mBO mode {mode}, must be one of: {MBO_MODES}")
    if reading not in MBO_READINGS:
        raise MetricError(f"Invalid mBO reading {reading}, must be one of: {MBO_READINGS}")
    gt_masks = np.asarray(gt_masks, dtype=bool)
    pred_masks = np.asarray(pred_masks, dtype=bool)
    if mode == "class":
        if categories is None:
            raise MetricError("Class-level mBO requires the ground-truth categories")
        gt_masks = merge_by_category(gt_masks, categories)
    if gt_masks.shape[0] == 0:
        raise MetricError("mBO is undefined without ground-truth masks")
    ious = iou_matrix(gt_masks, pred_masks)
    if reading == "per_gt":
        best = ious.max(axis=1) if ious.shape[1] else np.zeros(ious.shape[0])
        return float(best.mean())
    non_empty = pred_masks.any(axis=1)
    if not non_empty.any():
        raise MetricError("Per-prediction mBO is undefined without non-empty predictions")
    return float(ious[:, non_empty].max(axis=0).mean())


def masks_from_labels(labels: np.ndarray, n_slots: int) -> np.ndarray:
    """K x N hard masks from per-position slot labels."""
    labels = np.asarray(labels)
    return labels[None, :] == np.arange(n_slots)[:, None]


def evaluate_masks(
    gt_masks: np.ndarray,
    categories: np.ndarray,
    labels: np.ndarray,
    n_slots: int,
    reading: str = "per_gt",
) -> Dict[str, float]:
    """
    Every metric for one scene.

    Parameters
    ----------
    gt_masks: numpy.ndarray
        n_objects x N instance masks
    categories: numpy.ndarray
        n_objects category ids
    labels: numpy.ndarray
        N predicted slot ids (argmax of the decoder's masks)
    n_slots: int
    reading: str (default="per_gt")
        mBO reading

    Returns
    -------
    Dict[str, float]
        fg_ari, mbo_i, mbo_c and miou; the first three are NaN for a scene without objects
    """
    gt_masks = np.asarray(gt_masks, dtype=bool)
    n = np.asarray(labels).shape[0]
    pred_masks = masks_from_labels(labels, n_slots)
    foreground = gt_masks.any(axis=0) if gt_masks.shape[0] else np.zeros(n, dtype=bool)
    background = ~foreground
    gt_with_background = np.vstack([background[None, :], gt_masks]) if background.any() else gt_masks
    results = {"fg_ari": np.nan, "mbo_i": np.nan, "mbo_c": np.nan}
    if gt_masks.shape[0]:
        gt_labels = np.zeros(n, dtype=np.int64)
        for i, mask in enumerate(gt_masks):
            gt_labels[mask] = i + 1
        results["fg_ari"] = fg_ari(Partition(gt_labels, foreground), Partition(np.asarray(labels), foreground))
        results["mbo_i"] = mbo(gt_masks, pred_masks, mode="instance", reading=reading)
        results["mbo_c"] = mbo(gt_masks, pred_masks, mode="class", categories=categories, reading=reading)
    results["miou"] = miou_hungarian(gt_with_background, pred_masks)
    return results


def summarise(per_scene: pd.DataFrame, columns: Tuple[str, ...] = ("fg_ari", "mbo_i", "mbo_c", "miou")) -> Dict[str, float]:
    """Mean of each metric over scenes, ignoring scenes where it is undefined."""
    return {c: float(np.nanmean(per_scene[c].values)) if per_scene[c].notna().any() else np.nan for c in columns}
