#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Reading and writing synthetic scene datasets. A dataset is a directory
holding dataset.json (the scene spec and split sizes) and one sub-directory
per split, each with a plain-text index.txt listing its scene files in order.

Each scene is one binary file: a fixed little-endian header

    magic "SLTSCN\\0\\0", format version (u32), height, width, feature_dim,
    n_objects, split tag (u32 each), seed, index (u64 each)

followed by the raw float64 features (N x D_feat, row-major), the int32
object categories and one packed bitmap of ceil(N / 8) bytes per object mask.

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
import json
import logging
import os
from functools import partial
from multiprocessing import cpu_count
from multiprocessing import Pool
from typing import Dict
from typing import List
from typing import Optional

import numpy as np

from .feedback import progress_bar
from .toy_data import EVAL
from .toy_data import GeneratedScenes
from .toy_data import SceneSample
from .toy_data import SceneSpec
from .toy_data import SPLIT_TAGS
from .toy_data import TRAIN

logger = logging.getLogger(__name__)

SCENE_MAGIC = b"SLTSCN\x00\x00"
SCENE_VERSION = 1
SCENE_EXT = ".scene"
INDEX_FILE = "index.txt"
DATASET_FILE = "dataset.json"
HEADER_DTYPE = np.dtype(
    [
        ("magic", "S8"),
        ("version", "<u4"),
        ("height", "<u4"),
        ("width", "<u4"),
        ("feature_dim", "<u4"),
        ("n_objects", "<u4"),
        ("split", "<u4"),
        ("seed", "<u8"),
        ("index", "<u8"),
    ]
)
SPLIT_NAMES = {tag: name for name, tag in SPLIT_TAGS.items()}


class SceneFileError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


def match_file_ext(path: str, ext: str):
    return os.path.splitext(path)[1].lower() == ext


def encode_scene(sample: SceneSample, height: int, width: int) -> bytes:
    n, feature_dim = sample.features.shape
    if n != height * width:
        raise SceneFileError(f"Scene has {n} positions but grid is {height} x {width}")
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header[0] = (
        SCENE_MAGIC,
        SCENE_VERSION,
        height,
        width,
        feature_dim,
        sample.n_objects,
        SPLIT_TAGS[sample.split],
        sample.seed,
        sample.index,
    )
    masks = np.packbits(sample.gt_masks.astype(bool), axis=1) if sample.n_objects else np.zeros((0, 0), np.uint8)
    return b"".join(
        [
            header.tobytes(),
            np.ascontiguousarray(sample.features, dtype="<f8").tobytes(),
            np.asarray(sample.categories, dtype="<i4").tobytes(),
            masks.tobytes(),
        ]
    )


def decode_scene(data: bytes, path: str = "<bytes>") -> SceneSample:
    if len(data) < HEADER_DTYPE.itemsize:
        raise SceneFileError(f"{path}: truncated scene header")
    header = np.frombuffer(data, dtype=HEADER_DTYPE, count=1)[0]
    # numpy strips the trailing NULs of fixed-width byte fields
    if header["magic"] != SCENE_MAGIC.rstrip(b"\x00"):
        raise SceneFileError(f"{path}: not a scene file (bad magic)")
    if header["version"] != SCENE_VERSION:
        raise SceneFileError(f"{path}: unsupported scene format version {header['version']}")
    n = int(header["height"]) * int(header["width"])
    feature_dim = int(header["feature_dim"])
    n_objects = int(header["n_objects"])
    row_bytes = (n + 7) // 8
    offset = HEADER_DTYPE.itemsize
    expected = offset + n * feature_dim * 8 + n_objects * 4 + n_objects * row_bytes
    if len(data) != expected:
        raise SceneFileError(f"{path}: expected {expected} bytes, found {len(data)}")
    features = np.frombuffer(data, dtype="<f8", count=n * feature_dim, offset=offset).reshape(n, feature_dim)
    offset += n * feature_dim * 8
    categories = np.frombuffer(data, dtype="<i4", count=n_objects, offset=offset)
    offset += n_objects * 4
    packed = np.frombuffer(data, dtype=np.uint8, count=n_objects * row_bytes, offset=offset)
    masks = np.unpackbits(packed.reshape(n_objects, row_bytes), axis=1, count=n).astype(bool)
    split = SPLIT_NAMES.get(int(header["split"]))
    if split is None:
        raise SceneFileError(f"{path}: unknown split tag {header['split']}")
    return SceneSample(
        features=features.astype(np.float64),
        gt_masks=masks.reshape(n_objects, n),
        categories=categories.astype(np.int64),
        seed=int(header["seed"]),
        index=int(header["index"]),
        split=split,
    )


def write_scene(path: str, sample: SceneSample, height: int, width: int):
    with open(path, "wb") as f:
        f.write(encode_scene(sample, height, width))


def read_scene(path: str) -> SceneSample:
    """
    Read one scene file.

    Parameters
    ----------
    path: str

    Returns
    -------
    SceneSample

    Raises
    ------
    SceneFileError
        File missing, truncated or not a scene file
    """
    if not os.path.isfile(path):
        raise SceneFileError(f"Scene file not found: {path}")
    with open(path, "rb") as f:
        return decode_scene(f.read(), path=path)


def write_index(split_dir: str, filenames: List[str]):
    with open(os.path.join(split_dir, INDEX_FILE), "w") as f:
        f.write("\n".join(filenames) + ("\n" if filenames else ""))


def read_index(split_dir: str) -> List[str]:
    path = os.path.join(split_dir, INDEX_FILE)
    if not os.path.isfile(path):
        raise SceneFileError(f"Index file not found: {path}")
    with open(path, "r") as f:
        return [line.strip() for line in f if line.strip()]


def _write_indexed_scene(index: int, source: GeneratedScenes, split_dir: str) -> str:
    filename = f"{index:06d}{SCENE_EXT}"
    write_scene(os.path.join(split_dir, filename), source[index], source.spec.height, source.spec.width)
    return filename


def write_split(
    directory: str, spec: SceneSpec, split: str, n_scenes: int, njobs: int = 1, verbose: bool = True
) -> List[str]:
    """
    Generate and write one split, returning the filenames in index order.
    """
    split_dir = os.path.join(directory, split)
    os.makedirs(split_dir, exist_ok=True)
    source = GeneratedScenes(spec, split=split, size=n_scenes)
    write = partial(_write_indexed_scene, source=source, split_dir=split_dir)
    if njobs > 1:
        with Pool(min(njobs, cpu_count())) as pool:
            filenames = list(pool.map(write, range(n_scenes)))
    else:
        filenames = [write(i) for i in progress_bar(range(n_scenes), verbose=verbose, desc=f"Writing {split} split")]
    write_index(split_dir, filenames)
    return filenames


def write_dataset(
    directory: str, spec: SceneSpec, n_train: int, n_eval: int = 512, njobs: int = 1, verbose: bool = True
) -> Dict:
    """
    Generate a dataset directory: dataset.json, train/ and eval/ (each with index.txt).

    Parameters
    ----------
    directory: str
    spec: SceneSpec
    n_train: int
    n_eval: int (default=512)
    njobs: int (default=1)
        Worker processes used for generation
    verbose: bool (default=True)

    Returns
    -------
    Dict
        Contents written to dataset.json
    """
    spec.validate()
    os.makedirs(directory, exist_ok=True)
    write_split(directory, spec, TRAIN, n_train, njobs=njobs, verbose=verbose)
    write_split(directory, spec, EVAL, n_eval, njobs=njobs, verbose=verbose)
    description = {"spec": spec.to_dict(), "splits": {TRAIN: n_train, EVAL: n_eval}}
    with open(os.path.join(directory, DATASET_FILE), "w") as f:
        json.dump(description, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {n_train} train and {n_eval} eval scenes to {directory}")
    return description


def read_dataset_spec(directory: str) -> SceneSpec:
    path = os.path.join(directory, DATASET_FILE)
    if not os.path.isfile(path):
        raise SceneFileError(f"Dataset description not found: {path}")
    with open(path, "r") as f:
        try:
            description = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneFileError(f"{path}: invalid JSON; {e}")
    return SceneSpec.from_dict(description["spec"])


class StoredScenes:
    """
    Indexable, lazily read split of a dataset directory.

    Parameters
    ----------
    directory: str
        Dataset directory
    split: str (default="train")
    limit: int, optional
        Only expose the first 'limit' scenes
    """

    def __init__(self, directory: str, split: str = TRAIN, limit: Optional[int] = None):
        self.directory = directory
        self.split = split
        self.spec = read_dataset_spec(directory)
        self.split_dir = os.path.join(directory, split)
        self.filenames = read_index(self.split_dir)
        if limit is not None and limit > len(self.filenames):
            logger.warning(
                f"Requested {limit} {split} scenes but {directory} only holds {len(self.filenames)}"
            )
        self.filenames = self.filenames[:limit] if limit is not None else self.filenames

    @property
    def size(self) -> int:
        return len(self.filenames)

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, index: int) -> SceneSample:
        if not 0 <= index < self.size:
            raise IndexError(f"Scene index {index} out of range for {self.split_dir}")
        path = os.path.join(self.split_dir, self.filenames[index])
        if not match_file_ext(path, SCENE_EXT):
            raise SceneFileError(f"Unexpected file in index: {path}")
        return read_scene(path)
