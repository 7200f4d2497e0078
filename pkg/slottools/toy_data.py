#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Procedural multi-object scenes standing in for the frozen features of a
pretrained vision transformer. A scene is an H x W grid of D_feat-dimensional
tokens: a handful of non-overlapping rectangles and ellipses, each belonging
to one of a fixed set of categories, on a background. Every category owns a
few appearance modes (random unit vectors); objects of a category with more
than one mode are split into bands that each take a different mode, so a
single object is deliberately not homogeneous in feature space.

Scenes are a pure function of (spec, split, index): the generator for scene
i of a split is seeded from the SceneSpec seed, a split tag and i, so streams are
seekable (checkpoint resume) and the train and eval splits never share a
seed.

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
import queue
import threading
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np

from .geometry import ellipse_mask
from .geometry import masks_overlap
from .geometry import rectangle_mask
from .geometry import SHAPES
from .geometry import split_into_bands

logger = logging.getLogger(__name__)

TRAIN = "train"
EVAL = "eval"
SPLIT_TAGS = {TRAIN: 1, EVAL: 2}
PALETTE_TAG = 0
BACKGROUND_MODES = ("embedding", "zeros")
MAX_ATTEMPTS = 1000
MIN_OBJECT_CELLS = 4


class SceneGenerationError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


@dataclass
class SceneSpec:
    """
    Parameters of the scene distribution.

    Attributes
    ----------
    height: int (default=16)
    width: int (default=16)
    feature_dim: int (default=32)
    min_objects: int (default=2)
    max_objects: int (default=4)
    n_categories: int (default=8)
    n_modes: int (default=2)
        Appearance modes per category; the heterogeneity knob
    background_mode: str (default="embedding")
        'embedding' (a dedicated random unit vector) or 'zeros'
    noise_sigma: float (default=0.1)
    seed: int (default=0)
    shapes: Tuple[str, ...] (default=("rectangle", "ellipse"))
    """

    height: int = 16
    width: int = 16
    feature_dim: int = 32
    min_objects: int = 2
    max_objects: int = 4
    n_categories: int = 8
    n_modes: int = 2
    background_mode: str = "embedding"
    noise_sigma: float = 0.1
    seed: int = 0
    shapes: Tuple[str, ...] = field(default_factory=lambda: SHAPES)

    @property
    def n_positions(self) -> int:
        return self.height * self.width

    def validate(self):
        if self.height < 2 or self.width < 2:
            raise SceneGenerationError(f"Grid must be at least 2 x 2, got {self.height} x {self.width}")
        if self.feature_dim < 1:
            raise SceneGenerationError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise SceneGenerationError(f"Invalid object range [{self.min_objects}, {self.max_objects}]")
        if self.n_categories < 1 or self.n_modes < 1:
            raise SceneGenerationError("n_categories and n_modes must be >= 1")
        if self.background_mode not in BACKGROUND_MODES:
            raise SceneGenerationError(f"Invalid background_mode, must be one of: {BACKGROUND_MODES}")
        if self.noise_sigma < 0:
            raise SceneGenerationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise SceneGenerationError(f"Invalid shapes {self.shapes}, must be drawn from: {SHAPES}")

    def to_dict(self) -> Dict:
        spec = asdict(self)
        spec["shapes"] = list(self.shapes)
        return spec

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneGenerationError(f"Unknown scene spec fields: {sorted(unknown)}")
        data = dict(data)
        if "shapes" in data:
            data["shapes"] = tuple(data["shapes"])
        return cls(**data)


@dataclass
class SceneSample:
    """
    Attributes
    ----------
    features: numpy.ndarray
        N x D_feat
    gt_masks: numpy.ndarray
        n_objects x N boolean, disjoint
    categories: numpy.ndarray
        n_objects category ids (evaluation and analysis only)
    seed: int
        Spec seed the scene was generated from
    index: int
        Position of the scene within its split
    split: str
    """

    features: np.ndarray
    gt_masks: np.ndarray
    categories: np.ndarray
    seed: int = 0
    index: int = 0
    split: str = TRAIN

    @property
    def n_objects(self) -> int:
        return self.gt_masks.shape[0]

    @property
    def gt_labels(self) -> np.ndarray:
        """N instance ids, 0 for background and i + 1 for object i."""
        labels = np.zeros(self.features.shape[0], dtype=np.int64)
        for i, mask in enumerate(self.gt_masks):
            labels[mask] = i + 1
        return labels

    @property
    def foreground(self) -> np.ndarray:
        return self.gt_masks.any(axis=0) if self.n_objects else np.zeros(self.features.shape[0], dtype=bool)


@dataclass
class Palette:
    """
    Attributes
    ----------
    modes: numpy.ndarray
        n_categories x n_modes x D_feat unit vectors
    background: numpy.ndarray
        D_feat vector (zeros when background_mode is 'zeros')
    """

    modes: np.ndarray
    background: np.ndarray


def _unit_vectors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def category_palette(spec: SceneSpec) -> Palette:
    """
    Appearance modes per category and the background embedding. Derived from the SceneSpec seed
    only, so both splits share one palette.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, PALETTE_TAG]))
    modes = _unit_vectors(rng, spec.n_categories * spec.n_modes, spec.feature_dim)
    background = _unit_vectors(rng, 1, spec.feature_dim)[0]
    if spec.background_mode == "zeros":
        background = np.zeros(spec.feature_dim)
    return Palette(modes=modes.reshape(spec.n_categories, spec.n_modes, spec.feature_dim), background=background)


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    if split not in SPLIT_TAGS:
        raise SceneGenerationError(f"Invalid split {split}, must be one of: {list(SPLIT_TAGS.keys())}")
    return np.random.default_rng(np.random.SeedSequence([seed, SPLIT_TAGS[split], index]))


def _random_shape(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    shape = spec.shapes[rng.integers(len(spec.shapes))]
    if shape == "rectangle":
        box_h = int(rng.integers(2, max(2, h // 2) + 1))
        box_w = int(rng.integers(2, max(2, w // 2) + 1))
        top = int(rng.integers(0, h - box_h + 1))
        left = int(rng.integers(0, w - box_w + 1))
        return rectangle_mask(h, w, top, left, box_h, box_w)
    axes = (rng.uniform(2.5, max(2.5, w / 2.0 + 1.0)), rng.uniform(2.5, max(2.5, h / 2.0 + 1.0)))
    center = (rng.uniform(0.0, w - 1.0), rng.uniform(0.0, h - 1.0))
    return ellipse_mask(h, w, center, axes, angle=rng.uniform(0.0, 180.0))


def place_objects(spec: SceneSpec, n_objects: int, rng: np.random.Generator) -> List[np.ndarray]:
    """
    Rejection-sample n_objects disjoint shapes of at least four cells each.

    Raises
    ------
    SceneGenerationError
        No packing found within 1,000 attempts
    """
    masks: List[np.ndarray] = []
    attempts = 0
    while len(masks) < n_objects:
        if attempts >= MAX_ATTEMPTS:
            raise SceneGenerationError(
                f"Could not place {n_objects} objects on a {spec.height} x {spec.width} grid "
                f"within {MAX_ATTEMPTS} attempts"
            )
        attempts += 1
        candidate = _random_shape(spec, rng)
        if candidate.sum() < MIN_OBJECT_CELLS or masks_overlap(candidate, masks):
            continue
        masks.append(candidate)
    return masks


def generate(
    spec: SceneSpec,
    rng: Union[int, np.random.Generator, None] = None,
    palette: Optional[Palette] = None,
    index: int = 0,
    split: str = TRAIN,
) -> SceneSample:
    """
    Draw one scene.

    Parameters
    ----------
    spec: SceneSpec
    rng: int or numpy.random.Generator, optional
    palette: Palette, optional
        Defaults to category_palette(spec)
    index: int (default=0)
        Recorded on the sample
    split: str (default="train")
        Recorded on the sample

    Returns
    -------
    SceneSample

    Raises
    ------
    SceneGenerationError
        Invalid spec or infeasible packing
    """
    spec.validate()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    palette = palette or category_palette(spec)
    n = spec.n_positions
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    masks = place_objects(spec, n_objects, rng)
    categories = rng.integers(0, spec.n_categories, size=n_objects)
    features = np.tile(palette.background, (n, 1))
    for mask, category in zip(masks, categories):
        bands = split_into_bands(mask, spec.height, spec.width, spec.n_modes)
        mode_order = rng.permutation(spec.n_modes)
        for band, mode in zip(bands, mode_order):
            features[band] = palette.modes[category, mode]
    if spec.noise_sigma > 0:
        features = features + rng.normal(0.0, spec.noise_sigma, size=features.shape)
    gt_masks = np.array(masks, dtype=bool).reshape(n_objects, n)
    return SceneSample(
        features=features,
        gt_masks=gt_masks,
        categories=np.asarray(categories, dtype=np.int64),
        seed=spec.seed,
        index=index,
        split=split,
    )


class GeneratedScenes:
    """
    Indexable view of a generated split; scene i is generate(spec, scene_rng(seed, split, i)).

    Parameters
    ----------
    spec: SceneSpec
    split: str (default="train")
    split_seed: int, optional
        Overrides spec.seed for scene seeds (the palette always follows spec.seed)
    size: int, optional
        Finite length; None means unbounded
    """

    def __init__(self, spec: SceneSpec, split: str = TRAIN, split_seed: Optional[int] = None, size: Optional[int] = None):
        spec.validate()
        self.spec = spec
        self.split = split
        self.seed = spec.seed if split_seed is None else split_seed
        self.size = size
        self.palette = category_palette(spec)

    def __len__(self) -> int:
        if self.size is None:
            raise TypeError("Unbounded scene stream has no length")
        return self.size

    def __getitem__(self, index: int) -> SceneSample:
        if index < 0 or (self.size is not None and index >= self.size):
            raise IndexError(f"Scene index {index} out of range")
        return generate(self.spec, scene_rng(self.seed, self.split, index), self.palette, index=index, split=self.split)


def batch_at(source, batch: int, batch_size: int) -> List[SceneSample]:
    """Scenes [batch * batch_size, (batch + 1) * batch_size) of a source, wrapping around finite sources."""
    start = batch * batch_size
    size = getattr(source, "size", None)
    if size is not None:
        if size == 0:
            raise SceneGenerationError("Cannot draw batches from an empty scene source")
        return [source[(start + i) % size] for i in range(batch_size)]
    return [source[start + i] for i in range(batch_size)]


def dataset_stream(
    spec: Union[SceneSpec, "GeneratedScenes"],
    split_seed: Optional[int] = None,
    batch_size: int = 16,
    start_batch: int = 0,
    split: str = TRAIN,
) -> Iterator[List[SceneSample]]:
    """
    Infinite deterministic stream of batches.

    Parameters
    ----------
    spec: SceneSpec or scene source
        A SceneSpec is wrapped in GeneratedScenes; any object supporting integer indexing
        with a 'size' attribute (None when unbounded) is accepted, e.g. scenes read from disk
    split_seed: int, optional
    batch_size: int (default=16)
    start_batch: int (default=0)
        Resume from this batch
    split: str (default="train")

    Returns
    -------
    Iterator[List[SceneSample]]
    """
    source = GeneratedScenes(spec, split=split, split_seed=split_seed) if isinstance(spec, SceneSpec) else spec
    batch = start_batch
    while True:
        yield batch_at(source, batch, batch_size)
        batch += 1


def eval_split(spec: SceneSpec, n_scenes: int = 512, split_seed: Optional[int] = None) -> List[SceneSample]:
    """The fixed-size evaluation split (seeded with the eval tag)."""
    source = GeneratedScenes(spec, split=EVAL, split_seed=split_seed, size=n_scenes)
    return [source[i] for i in range(n_scenes)]


class BatchPrefetcher:
    """
    Generates batches on one background thread and hands them over a bounded queue.

    Parameters
    ----------
    stream: Iterator[List[SceneSample]]
    maxsize: int (default=4)

    Examples
    --------
    >>> with BatchPrefetcher(dataset_stream(SceneSpec())) as batches:
    ...     first = next(batches)
    """

    _DONE = object()

    def __init__(self, stream: Iterator[List[SceneSample]], maxsize: int = 4):
        self._stream = stream
        self._queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self._stop = threading.Event()
        self._error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._work, daemon=True)
        self._thread.start()

    def _work(self):
        try:
            for batch in self._stream:
                while not self._stop.is_set():
                    try:
                        self._queue.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except BaseException as e:
            self._error = e
        self._queue.put(self._DONE)

    def __iter__(self) -> "BatchPrefetcher":
        return self

    def __next__(self) -> List[SceneSample]:
        item = self._queue.get()
        if item is self._DONE:
            if self._error is not None:
                raise self._error
            raise StopIteration
        return item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "BatchPrefetcher":
        return self

    def __exit__(self, *exc):
        self.close()
        return False
