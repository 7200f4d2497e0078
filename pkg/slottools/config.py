#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Run configuration. A TrainConfig holds every model, optimisation, data,
schedule and ablation setting of a run; it is read from and written to JSON
objects whose keys are exactly the field names. Unknown keys and invalid
values are rejected naming the offending key.

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
import dataclasses
import hashlib
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict
from typing import Optional

from .metrics import MBO_READINGS
from .toy_data import BACKGROUND_MODES
from .toy_data import SceneSpec

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SLOTTOOLS_OUTPUT_ROOT"
ACTIVATIONS = ("gelu", "relu")

# (use_m_c, use_vq, use_m_s, use_shift), in table order
ABLATIONS = OrderedDict(
    [
        ("baseline", (False, False, False, False)),
        ("m_c+m_s+shift", (True, False, True, True)),
        ("m_s+shift", (False, False, True, True)),
        ("m_c+vq+m_s", (True, True, True, False)),
        ("m_c+vq", (True, True, False, False)),
        ("full", (True, True, True, True)),
    ]
)


class ConfigError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


_FIELD_TYPES = {"int": int, "float": (int, float), "bool": bool, "str": str}


def _type_name(f: dataclasses.Field) -> str:
    return f.type if isinstance(f.type, str) else f.type.__name__


@dataclass
class TrainConfig:
    """
    Attributes
    ----------
    n_slots: int (default=6)
        K
    codebook_size: int (default=64)
        E
    slot_dim: int (default=64)
        D = d_h
    feature_dim: int (default=32)
        D_feat, also the decoder width
    n_iter: int (default=3)
        T, slot attention iterations per pass
    height, width: int (default=16)
        Token grid, N = height * width
    mlp_hidden: int (default=128)
        Hidden width of the residual slot update MLP
    init_sigma: float (default=1.0)
        Initial slot standard deviation (also the codebook initialisation scale)
    activation: str (default="gelu")
    decoder_blocks: int (default=4)
        At least one block; the masks are read from its cross-attention
    decoder_heads: int (default=8)
    last_block_masks: bool (default=False)
        Read masks from the final decoder block only
    lr: float (default=4e-4)
    batch_size: int (default=16)
    steps: int (default=20000)
    seed: int (default=0)
        Parameter initialisation and slot noise (non-negative)
    vq_weight: float (default=1.0)
        Weight of the vector quantisation loss
    clip_norm: float (default=1.0)
        Global gradient norm limit (0 disables clipping)
    use_m_c, use_vq, use_m_s, use_shift: bool (default=True)
        Ablation flags of the top-down pathway; use_shift has no effect without use_m_s
    data_seed: int (default=0)
    min_objects, max_objects: int (default=2, 4)
    n_categories: int (default=8)
    n_modes: int (default=2)
    noise_sigma: float (default=0.1)
    background_mode: str (default="embedding")
    log_every: int (default=100)
        Steps per logging window (also the code usage window for perplexity)
    eval_every: int (default=0)
        Evaluate every this many steps (0 only evaluates at the end)
    checkpoint_every: int (default=1000)
    eval_scenes: int (default=512)
    eval_njobs: int (default=1)
    mbo_reading: str (default="per_gt")
    selection_steps: int (default=2000)
        Training steps per codebook size during size selection
    min_codebook_size: int (default=64)
    max_codebook_size: int (default=1024)
    plateau_ratio: float (default=1.1)
    """

    n_slots: int = 6
    codebook_size: int = 64
    slot_dim: int = 64
    feature_dim: int = 32
    n_iter: int = 3
    height: int = 16
    width: int = 16
    mlp_hidden: int = 128
    init_sigma: float = 1.0
    activation: str = "gelu"
    decoder_blocks: int = 4
    decoder_heads: int = 8
    last_block_masks: bool = False
    lr: float = 4e-4
    batch_size: int = 16
    steps: int = 20000
    seed: int = 0
    vq_weight: float = 1.0
    clip_norm: float = 1.0
    use_m_c: bool = True
    use_vq: bool = True
    use_m_s: bool = True
    use_shift: bool = True
    data_seed: int = 0
    min_objects: int = 2
    max_objects: int = 4
    n_categories: int = 8
    n_modes: int = 2
    noise_sigma: float = 0.1
    background_mode: str = "embedding"
    log_every: int = 100
    eval_every: int = 0
    checkpoint_every: int = 1000
    eval_scenes: int = 512
    eval_njobs: int = 1
    mbo_reading: str = "per_gt"
    selection_steps: int = 2000
    min_codebook_size: int = 64
    max_codebook_size: int = 1024
    plateau_ratio: float = 1.1

    @property
    def n_positions(self) -> int:
        return self.height * self.width

    def validate(self) -> "TrainConfig":
        """
        Raises
        ------
        ConfigError
            Naming the first invalid field
        """
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            type_name = _type_name(f)
            if not isinstance(value, _FIELD_TYPES[type_name]) or (isinstance(value, bool) and type_name != "bool"):
                raise ConfigError(f"Invalid value for {f.name}: expected {type_name}, got {value!r}")
        positive = [
            "n_slots", "slot_dim", "feature_dim", "n_iter", "height", "width", "mlp_hidden",
            "decoder_blocks", "batch_size", "steps", "log_every", "eval_scenes", "eval_njobs",
            "n_categories", "n_modes", "selection_steps",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"Invalid value for {name}: must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "init_sigma"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"Invalid value for {name}: must be > 0, got {getattr(self, name)}")
        # seed streams and dataset headers take unsigned seeds
        non_negative = ("vq_weight", "clip_norm", "noise_sigma", "eval_every", "checkpoint_every", "seed", "data_seed")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"Invalid value for {name}: must be >= 0, got {getattr(self, name)}")
        if self.codebook_size < 2:
            raise ConfigError(f"Invalid value for codebook_size: must be >= 2, got {self.codebook_size}")
        if self.decoder_heads < 1 or self.feature_dim % self.decoder_heads:
            raise ConfigError(
                f"Invalid value for decoder_heads: feature_dim {self.feature_dim} is not divisible by "
                f"{self.decoder_heads} heads"
            )
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"Invalid value for max_objects: range [{self.min_objects}, {self.max_objects}]")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"Invalid value for activation: must be one of {ACTIVATIONS}")
        if self.background_mode not in BACKGROUND_MODES:
            raise ConfigError(f"Invalid value for background_mode: must be one of {BACKGROUND_MODES}")
        if self.mbo_reading not in MBO_READINGS:
            raise ConfigError(f"Invalid value for mbo_reading: must be one of {MBO_READINGS}")
        if not 2 <= self.min_codebook_size <= self.max_codebook_size:
            raise ConfigError(
                f"Invalid value for max_codebook_size: range [{self.min_codebook_size}, {self.max_codebook_size}]"
            )
        if self.plateau_ratio <= 1.0:
            raise ConfigError(f"Invalid value for plateau_ratio: must be > 1, got {self.plateau_ratio}")
        return self

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        """
        Raises
        ------
        ConfigError
            Unknown key or invalid value
        """
        if not isinstance(data, dict):
            raise ConfigError(f"Config must be a JSON object, got {type(data).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown config key: {key}")
        data = dict(data)
        for key, value in data.items():
            # JSON writes 1.0 as 1
            if _type_name(cls.__dataclass_fields__[key]) == "float" and type(value) is int:
                data[key] = float(value)
        return cls(**data).validate()

    def config_hash(self) -> str:
        """SHA-256 of the canonical (sorted-key) JSON of every field."""
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"Unknown ablation {name}, must be one of: {list(ABLATIONS.keys())}")
        use_m_c, use_vq, use_m_s, use_shift = ABLATIONS[name]
        return self.replace(use_m_c=use_m_c, use_vq=use_vq, use_m_s=use_m_s, use_shift=use_shift)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            height=self.height,
            width=self.width,
            feature_dim=self.feature_dim,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            n_categories=self.n_categories,
            n_modes=self.n_modes,
            background_mode=self.background_mode,
            noise_sigma=self.noise_sigma,
            seed=self.data_seed,
        )


def canonical_json(data: Dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def load_config(path: str) -> TrainConfig:
    """
    Read a JSON config file; keys not given take their defaults.

    Raises
    ------
    ConfigError
        Missing file, invalid JSON, unknown key or invalid value
    """
    if not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON; {e}")
    return TrainConfig.from_dict(data)


def save_config(config: TrainConfig, path: str):
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)


def default_output_root(fallback: Optional[str] = None) -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, fallback or os.path.join(os.getcwd(), "runs"))
