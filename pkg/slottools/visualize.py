#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Image dumps of what the model sees and predicts, written as binary portable
graymaps (P5) and pixmaps (P6):

* per-slot attention heatmaps of the bottom-up and the modulated pass,
* predicted and ground-truth segmentations as indexed-colour images,
* for the most used codebook codes, the masks of every evaluation slot that
  maps to the code.

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
import os
from typing import Dict
from typing import List
from typing import Sequence

import numpy as np
import pandas as pd

from .toy_data import SceneSample
from .training import code_assignments
from .training import Model
from .training import predict

logger = logging.getLogger(__name__)

# index 0 (background / slot 0) is dark grey; the rest are well separated hues
PALETTE = np.array(
    [
        [40, 40, 40],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
        [0, 128, 128],
    ],
    dtype=np.uint8,
)


class VisualizationError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


def write_pgm(path: str, image: np.ndarray) -> str:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise VisualizationError(f"Graymap must be a 2D uint8 array, got {image.dtype} {image.shape}")
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())
    return path


def write_ppm(path: str, image: np.ndarray) -> str:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise VisualizationError(f"Pixmap must be an H x W x 3 uint8 array, got {image.dtype} {image.shape}")
    with open(path, "wb") as f:
        f.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())
    return path


def read_pnm(path: str) -> np.ndarray:
    """Read a binary P5/P6 file written by this module."""
    with open(path, "rb") as f:
        data = f.read()
    fields = data.split(maxsplit=4)
    if len(fields) < 5 or fields[0] not in (b"P5", b"P6"):
        raise VisualizationError(f"{path}: not a binary graymap or pixmap")
    width, height = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(fields[4], dtype=np.uint8)
    return pixels.reshape(height, width) if fields[0] == b"P5" else pixels.reshape(height, width, 3)


def heatmap(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Grayscale image of one attention row: pixel = round(255 * a / max(a)), so the
    maximum attention is the brightest pixel. An all-zero row gives a black image.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (height * width,):
        raise VisualizationError(f"Expected {height * width} values, got shape {values.shape}")
    peak = values.max()
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    return np.rint(255.0 * np.clip(scaled, 0.0, 1.0)).astype(np.uint8).reshape(height, width)


def label_image(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return PALETTE[labels % len(PALETTE)].reshape(height, width, 3)


def mask_image(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    return (np.asarray(mask, dtype=bool).reshape(height, width) * 255).astype(np.uint8)


def visualize_scene(model: Model, scene: SceneSample, out_dir: str) -> List[str]:
    """
    Attention heatmaps of both passes (one per slot and pass), the predicted segmentation, the
    ground truth segmentation and the predicted labels as CSV.

    Parameters
    ----------
    model: Model
    scene: SceneSample
    out_dir: str

    Returns
    -------
    List[str]
        Paths written: 2K heatmaps, two segmentation images and labels.csv
    """
    config = model.config
    h, w = config.height, config.width
    os.makedirs(out_dir, exist_ok=True)
    prediction = predict(model, scene)
    paths = []
    for pass_name, attention in (("pass1", prediction.attention), ("pass2", prediction.attention_modulated)):
        for k, row in enumerate(attention):
            paths.append(write_pgm(os.path.join(out_dir, f"{pass_name}_slot{k}.pgm"), heatmap(row, h, w)))
    paths.append(write_ppm(os.path.join(out_dir, "pred_mask.ppm"), label_image(prediction.labels, h, w)))
    paths.append(write_ppm(os.path.join(out_dir, "gt_mask.ppm"), label_image(scene.gt_labels, h, w)))
    labels_path = os.path.join(out_dir, "labels.csv")
    pd.DataFrame(
        {
            "position": np.arange(h * w),
            "label": prediction.labels,
            "label_unmodulated": prediction.labels_unmodulated,
            "gt_label": scene.gt_labels,
        }
    ).to_csv(labels_path, index=False)
    paths.append(labels_path)
    return paths


def _majority_category(scene: SceneSample, mask: np.ndarray) -> int:
    """Category covering most of the mask (-1 when the mask lies on background)."""
    if not mask.any() or scene.n_objects == 0:
        return -1
    overlap = scene.gt_masks[:, mask].sum(axis=1)
    if overlap.max() * 2 < mask.sum():
        return -1
    return int(scene.categories[int(np.argmax(overlap))])


def codebook_concepts(
    model: Model, scenes: Sequence[SceneSample], out_dir: str, top: int = 8, verbose: bool = True
) -> pd.DataFrame:
    """
    For each of the 'top' most used codes over the scenes, write the predicted mask of every slot
    mapped to the code (code_<index>/scene<i>_slot<k>.pgm) and list them in concepts.csv.

    Returns
    -------
    Pandas.DataFrame
        Columns code_index, scene_index, slot, mask_cells, category (majority ground-truth
        category under the mask, -1 for background)
    """
    config = model.config
    by_index = {scene.index: scene for scene in scenes}
    assignments = code_assignments(model, scenes, verbose=verbose)
    assignments = assignments[assignments["mask_cells"] > 0]
    if assignments.empty:
        raise VisualizationError("No slot owns any position; nothing to group")
    usage = assignments.groupby("code_index").size().sort_values(ascending=False, kind="mergesort")
    top_codes = list(usage.index[:top])
    labels: Dict[int, np.ndarray] = {}
    rows = []
    for code in top_codes:
        code_dir = os.path.join(out_dir, f"code_{code}")
        os.makedirs(code_dir, exist_ok=True)
        for _, a in assignments[assignments["code_index"] == code].iterrows():
            scene = by_index[a["scene_index"]]
            if scene.index not in labels:
                labels[scene.index] = predict(model, scene).labels
            mask = labels[scene.index] == a["slot"]
            write_pgm(
                os.path.join(code_dir, f"scene{a['scene_index']}_slot{a['slot']}.pgm"),
                mask_image(mask, config.height, config.width),
            )
            rows.append(
                {
                    "code_index": code,
                    "scene_index": a["scene_index"],
                    "slot": a["slot"],
                    "mask_cells": a["mask_cells"],
                    "category": _majority_category(scene, mask),
                }
            )
    concepts = pd.DataFrame(rows, columns=["code_index", "scene_index", "slot", "mask_cells", "category"])
    concepts.to_csv(os.path.join(out_dir, "concepts.csv"), index=False)
    return concepts
