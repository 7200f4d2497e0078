#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
The full model and its optimisation. One forward runs bottom-up slot
attention, bootstraps the top-down cues from its result (nearest codebook
code and the final attention rows), builds the modulation maps, reruns slot
attention from the same initial slots with the maps applied, and decodes the
modulated slots. Training minimises feature reconstruction plus the vector
quantisation loss with Adam; checkpoints capture everything needed to resume
a run bit for bit.

The ablation flags of the configuration switch parts of the pathway off:
without channel modulation m_c is all ones, without quantisation the raw
slot feeds the channel MLP, without spatial modulation m_s is all ones and
without the shift m_s is the raw attention row. With every flag off the
second pass reproduces the first exactly.

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
from collections import OrderedDict
from dataclasses import dataclass
from dataclasses import field
from functools import partial
from functools import reduce
from multiprocessing import cpu_count
from multiprocessing import Pool
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import Tensor
from .config import canonical_json
from .config import TrainConfig
from .decoder import decode
from .decoder import DecoderOutput
from .decoder import DecoderParams
from .decoder import extract_masks
from .feedback import progress_bar
from .layers import fill_
from .layers import MLP
from .layers import Module
from .metrics import evaluate_masks
from .metrics import summarise
from .slot_attention import AttentionMap
from .slot_attention import encode_inputs
from .slot_attention import init_slots
from .slot_attention import run_bottom_up
from .slot_attention import SlotAttentionParams
from .slot_attention import SlotInitDistribution
from .slot_attention import SlotState
from .top_down import build_modulation_map
from .top_down import channel_modulation
from .top_down import Codebook
from .top_down import ModulationMap
from .top_down import perplexity
from .top_down import quantize
from .top_down import QuantizedSlots
from .top_down import run_modulated
from .top_down import spatial_modulation
from .toy_data import BatchPrefetcher
from .toy_data import dataset_stream
from .toy_data import eval_split
from .toy_data import GeneratedScenes
from .toy_data import SceneSample
from .toy_data import TRAIN

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SLTCKPT\x00"
CHECKPOINT_VERSION = 1
SECTIONS = ("encoder", "slot_init", "pass1", "pathway", "pass2", "decoder")
# seed derivation tags
_INIT_TAGS = {"slot_attention": 1, "codebook": 2, "channel_mlp": 3, "decoder": 4}
_TRAIN_NOISE_TAG = 10
_EVAL_NOISE_TAG = 11
# settings that may change between a checkpoint and the run restoring it
_SCHEDULE_FIELDS = (
    "steps", "eval_every", "checkpoint_every", "eval_scenes", "eval_njobs", "last_block_masks", "mbo_reading",
    "log_every",
)
METRIC_COLUMNS = ("fg_ari", "mbo_i", "mbo_c", "miou")


class TrainingError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


def _component_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _INIT_TAGS[component]]))


class Model(Module):
    """
    Every learnable part of the model. The codebook exists only when quantisation is on and the
    channel MLP only when channel modulation is on; each component draws its initial weights
    from its own seed stream, so ablations share the weights they have in common.

    Parameters
    ----------
    config: TrainConfig
    """

    def __init__(self, config: TrainConfig):
        config.validate()
        d = config.slot_dim
        self.slot_init = SlotInitDistribution(d, init_sigma=config.init_sigma)
        self.slot_attention = SlotAttentionParams(
            config.feature_dim, d, config.mlp_hidden, _component_rng(config.seed, "slot_attention"), config.activation
        )
        self.codebook = None
        if config.use_vq:
            self.codebook = Codebook(
                config.codebook_size, d, _component_rng(config.seed, "codebook"), init_sigma=config.init_sigma
            )
        self.channel_mlp = None
        if config.use_m_c:
            self.channel_mlp = MLP(d, d, d, _component_rng(config.seed, "channel_mlp"), activation=config.activation)
            # modulation starts as the identity
            fill_(self.channel_mlp.fc2, 0.0, names=("weight",))
            fill_(self.channel_mlp.fc2, 1.0, names=("bias",))
        self.decoder = DecoderParams(
            config.feature_dim,
            d,
            config.n_positions,
            _component_rng(config.seed, "decoder"),
            n_blocks=config.decoder_blocks,
            n_heads=config.decoder_heads,
            activation=config.activation,
        )
        self.config = config
        self.assign_names()


@dataclass
class ForwardOutput:
    """
    Attributes
    ----------
    initial: SlotState
        S0, shared by both passes
    slots_bottom_up: SlotState
        S, output of the bottom-up pass
    attention: AttentionMap
        Final-iteration attention of the bottom-up pass
    quantized: QuantizedSlots or None
        None when quantisation is off
    modulation: ModulationMap
    slots: SlotState
        S hat, output of the modulated pass
    attention_modulated: AttentionMap
    decoded: DecoderOutput
        Reconstruction from S hat
    """

    initial: SlotState
    slots_bottom_up: SlotState
    attention: AttentionMap
    quantized: Optional[QuantizedSlots]
    modulation: ModulationMap
    slots: SlotState
    attention_modulated: AttentionMap
    decoded: DecoderOutput


@dataclass
class Losses:
    recon: Tensor
    vq: Optional[Tensor]
    total: Tensor

    def values(self) -> Dict[str, float]:
        return {
            "recon": self.recon.item(),
            "vq": self.vq.item() if self.vq is not None else 0.0,
            "total": self.total.item(),
        }


def forward_full(
    model: Model, x: Union[Tensor, np.ndarray], rng: Union[int, np.random.Generator, None] = None
) -> ForwardOutput:
    """
    Bottom-up pass, top-down bootstrap, modulated pass and decoding for one scene.

    Parameters
    ----------
    model: Model
    x: Tensor or numpy.ndarray
        N x D_feat features
    rng: int or numpy.random.Generator, optional
        Source of the initial slot noise

    Returns
    -------
    ForwardOutput

    Raises
    ------
    TrainingError
        Feature grid does not match the configuration
    """
    config = model.config
    x = ad.as_tensor(x)
    if x.shape != (config.n_positions, config.feature_dim):
        raise TrainingError(
            f"Feature grid of shape {x.shape} does not match the configured "
            f"({config.n_positions}, {config.feature_dim})"
        )
    k, n, d = config.n_slots, config.n_positions, config.slot_dim
    with ad.op_section("encoder"):
        inputs = encode_inputs(model.slot_attention, x)
    with ad.op_section("slot_init"):
        initial = init_slots(model.slot_init, k, rng)
    with ad.op_section("pass1"):
        bottom_up, attention = run_bottom_up(model.slot_attention, inputs, initial, config.n_iter)
    with ad.op_section("pathway"):
        quantized = None
        cues = bottom_up.slots
        if config.use_vq:
            quantized = quantize(bottom_up.slots, model.codebook)
            cues = quantized.codes_selected
        m_c = channel_modulation(cues, model.channel_mlp) if config.use_m_c else ad.ones((k, d))
        if not config.use_m_s:
            m_s = ad.ones((k, n))
        elif config.use_shift:
            m_s = spatial_modulation(attention)
        else:
            m_s = attention.A
        modulation = build_modulation_map(m_c, m_s)
    with ad.op_section("pass2"):
        modulated, attention_modulated = run_modulated(model.slot_attention, inputs, initial, modulation, config.n_iter)
    with ad.op_section("decoder"):
        decoded = decode(model.decoder, x, modulated.slots)
    return ForwardOutput(
        initial=initial,
        slots_bottom_up=bottom_up,
        attention=attention,
        quantized=quantized,
        modulation=modulation,
        slots=modulated,
        attention_modulated=attention_modulated,
        decoded=decoded,
    )


def compute_losses(
    recon: Tensor,
    x: Union[Tensor, np.ndarray],
    slots: Tensor,
    quantized: Optional[QuantizedSlots] = None,
    vq_weight: float = 1.0,
) -> Losses:
    """
    L_recon = MSE(recon, x); L_vq = MSE(sg(S), C*); L_total = L_recon + vq_weight * L_vq.

    Parameters
    ----------
    recon: Tensor
        N x D_feat reconstruction
    x: Tensor or numpy.ndarray
        Target features (no gradient)
    slots: Tensor
        Bottom-up slots S; only their values enter the VQ loss
    quantized: QuantizedSlots, optional
        Without it there is no VQ loss
    vq_weight: float (default=1.0)

    Returns
    -------
    Losses
    """
    target = ad.constant(ad.as_tensor(x).values)
    recon_loss = ad.mse(recon, target)
    if quantized is None:
        return Losses(recon=recon_loss, vq=None, total=recon_loss)
    vq_loss = ad.mse(ad.stop_gradient(slots), quantized.codes_for_loss)
    return Losses(recon=recon_loss, vq=vq_loss, total=ad.add(recon_loss, ad.scale(vq_loss, vq_weight)))


def batch_losses(
    model: Model, batch: Sequence[SceneSample], rng: np.random.Generator
) -> Tuple[Tensor, List[Losses], List[ForwardOutput]]:
    """Forward every scene and average the total losses (call inside a Tape)."""
    outputs, losses = [], []
    for scene in batch:
        out = forward_full(model, scene.features, rng)
        outputs.append(out)
        losses.append(
            compute_losses(
                out.decoded.recon, scene.features, out.slots_bottom_up.slots, out.quantized, model.config.vq_weight
            )
        )
    total = ad.scale(reduce(ad.add, [l.total for l in losses]), 1.0 / len(batch))
    return total, losses, outputs


def train_step(model: Model, batch: Sequence[SceneSample], rng: np.random.Generator, step: int) -> Dict[str, float]:
    """
    One optimisation step: forward, NaN check, backward, clipping and Adam.

    Returns
    -------
    Dict[str, float]
        Batch-mean recon and vq losses and the pre-clipping gradient norm

    Raises
    ------
    TrainingError
        A loss component is not finite
    """
    config = model.config
    params = list(model.parameters().values())
    with ad.Tape() as tape:
        total, losses, outputs = batch_losses(model, batch, rng)
    recon = float(np.mean([l.recon.item() for l in losses]))
    vq = float(np.mean([l.vq.item() for l in losses])) if config.use_vq else 0.0
    for component, value in (("recon", recon), ("vq", vq)):
        if not np.isfinite(value):
            raise TrainingError(f"Non-finite {component} loss at step {step}")
    tape.backward(total)
    grad_norm = ad.clip_grad_norm(params, config.clip_norm) if config.clip_norm > 0 else float("nan")
    ad.adam_step(params, lr=config.lr)
    if model.codebook is not None:
        for out in outputs:
            model.codebook.record_usage(out.quantized.indices)
    return {"recon": recon, "vq": vq, "grad_norm": grad_norm}


class Checkpoint:
    """
    Complete training state: configuration, step, noise generator state, code usage of the
    open logging window and every parameter with its Adam moments.

    The binary container is the magic b"SLTCKPT\\0", the format version (u32), the length of
    the JSON header (u64), the canonical JSON header and the raw little-endian float64
    payload described by the header's array table. Serialisation has no timestamps, so
    save -> load -> save reproduces the file byte for byte.

    Parameters
    ----------
    config: TrainConfig
    step: int
    rng_state: dict
        numpy bit generator state of the training noise stream
    arrays: Dict[str, numpy.ndarray]
        Parameter values and Adam moments ('<name>', '<name>.adam_m', '<name>.adam_v')
    step_counts: Dict[str, int]
        Adam step count per parameter
    codebook_usage: List[int], optional
    """

    def __init__(
        self,
        config: TrainConfig,
        step: int,
        rng_state: Dict,
        arrays: Dict[str, np.ndarray],
        step_counts: Dict[str, int],
        codebook_usage: Optional[List[int]] = None,
    ):
        self.config = config
        self.step = step
        self.rng_state = rng_state
        self.arrays = arrays
        self.step_counts = step_counts
        self.codebook_usage = codebook_usage

    @classmethod
    def from_model(cls, model: Model, step: int, rng: np.random.Generator) -> "Checkpoint":
        arrays: Dict[str, np.ndarray] = OrderedDict()
        step_counts = {}
        for name, p in model.named_parameters():
            arrays[name] = p.values.copy()
            arrays[f"{name}.adam_m"] = p.adam_m.copy()
            arrays[f"{name}.adam_v"] = p.adam_v.copy()
            step_counts[name] = p.step_count
        usage = model.codebook.usage_counts.tolist() if model.codebook is not None else None
        return cls(model.config, step, rng.bit_generator.state, arrays, step_counts, usage)

    def header(self) -> Dict:
        table, offset = [], 0
        for name, values in self.arrays.items():
            nbytes = int(values.size) * 8
            table.append({"name": name, "dtype": "<f8", "shape": list(values.shape), "offset": offset})
            offset += nbytes
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "step": self.step,
            "rng_state": self.rng_state,
            "codebook_usage": self.codebook_usage,
            "step_counts": self.step_counts,
            "arrays": table,
        }

    def to_bytes(self) -> bytes:
        header = canonical_json(self.header()).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.arrays.values())
        return b"".join(
            [
                CHECKPOINT_MAGIC,
                np.array([CHECKPOINT_VERSION], dtype="<u4").tobytes(),
                np.array([len(header)], dtype="<u8").tobytes(),
                header,
                payload,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes, path: str = "<bytes>") -> "Checkpoint":
        prefix = len(CHECKPOINT_MAGIC) + 12
        if len(data) < prefix or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise TrainingError(f"{path}: not a checkpoint file")
        version = int(np.frombuffer(data, dtype="<u4", count=1, offset=len(CHECKPOINT_MAGIC))[0])
        if version != CHECKPOINT_VERSION:
            raise TrainingError(f"{path}: unsupported checkpoint version {version}")
        header_len = int(np.frombuffer(data, dtype="<u8", count=1, offset=len(CHECKPOINT_MAGIC) + 4)[0])
        try:
            header = json.loads(data[prefix : prefix + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise TrainingError(f"{path}: corrupt checkpoint header; {e}")
        config = TrainConfig.from_dict(header["config"])
        if config.config_hash() != header["config_hash"]:
            raise TrainingError(f"{path}: config hash mismatch")
        payload_start = prefix + header_len
        arrays: Dict[str, np.ndarray] = OrderedDict()
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            start = payload_start + entry["offset"]
            if start + count * 8 > len(data):
                raise TrainingError(f"{path}: truncated payload for {entry['name']}")
            values = np.frombuffer(data, dtype="<f8", count=count, offset=start)
            arrays[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
        return cls(
            config,
            header["step"],
            header["rng_state"],
            arrays,
            header["step_counts"],
            header["codebook_usage"],
        )

    def manifest(self) -> Dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config_hash": self.config.config_hash(),
            "step": self.step,
            "parameters": [
                {"name": name, "shape": list(self.arrays[name].shape)} for name in self.step_counts.keys()
            ],
        }

    def save(self, path: str) -> str:
        """Write the checkpoint and its '<path>.manifest.json' sidecar; returns path."""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(self.to_bytes())
        with open(f"{path}.manifest.json", "w") as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        if not os.path.isfile(path):
            raise TrainingError(f"Checkpoint not found: {path}")
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), path=path)

    def restore(self, config: Optional[TrainConfig] = None) -> Tuple[Model, np.random.Generator]:
        """
        Rebuild the model (with Adam state) and the training noise generator.

        Parameters
        ----------
        config: TrainConfig, optional
            Run configuration; may only differ from the stored one in schedule fields

        Raises
        ------
        TrainingError
            Incompatible configuration or missing/mis-shaped arrays
        """
        config = config or self.config
        stored = {k: v for k, v in self.config.to_dict().items() if k not in _SCHEDULE_FIELDS}
        given = {k: v for k, v in config.to_dict().items() if k not in _SCHEDULE_FIELDS}
        if stored != given:
            changed = sorted(k for k in stored if stored[k] != given[k])
            raise TrainingError(f"Checkpoint was written with a different configuration: {changed}")
        model = Model(config)
        for name, p in model.named_parameters():
            for key, attr in ((name, "values"), (f"{name}.adam_m", "adam_m"), (f"{name}.adam_v", "adam_v")):
                if key not in self.arrays or self.arrays[key].shape != p.shape:
                    raise TrainingError(f"Checkpoint has no array {key} of shape {p.shape}")
                setattr(p, attr, self.arrays[key].copy())
            p.step_count = int(self.step_counts[name])
        if model.codebook is not None and self.codebook_usage is not None:
            model.codebook.usage_counts = np.asarray(self.codebook_usage, dtype=np.int64)
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return model, rng


def training_rng(config: TrainConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, _TRAIN_NOISE_TAG]))


@dataclass
class TrainResult:
    model: Model
    step: int
    loss_log: pd.DataFrame
    eval_log: pd.DataFrame = field(default_factory=pd.DataFrame)
    checkpoints: List[str] = field(default_factory=list)


def _window_perplexity(model: Model) -> float:
    if model.codebook is None or model.codebook.usage_counts.sum() == 0:
        return float("nan")
    return perplexity(model.codebook.usage_counts)


def train(
    config: TrainConfig,
    source=None,
    out_dir: Optional[str] = None,
    resume: Optional[str] = None,
    eval_scenes: Optional[Sequence[SceneSample]] = None,
    final_eval: bool = True,
    prefetch: bool = True,
    verbose: bool = True,
) -> TrainResult:
    """
    Train a model.

    Parameters
    ----------
    config: TrainConfig
    source: scene source, optional
        Indexable scenes with a 'size' attribute (None when unbounded); defaults to the
        generated training split of config.scene_spec(). Batch b is scenes
        [b * batch_size, (b + 1) * batch_size), wrapping around finite sources
    out_dir: str, optional
        Receives loss.csv, eval.csv and checkpoints/; nothing is written when omitted
    resume: str, optional
        Checkpoint to continue from; the run continues at the checkpoint's step
    eval_scenes: Sequence[SceneSample], optional
        Evaluation scenes; defaults to the first config.eval_scenes scenes of the eval split
    final_eval: bool (default=True)
        Evaluate once more after the last step
    prefetch: bool (default=True)
        Generate batches on a background thread
    verbose: bool (default=True)

    Returns
    -------
    TrainResult

    Raises
    ------
    TrainingError
        Non-finite loss (naming the step and component) or incompatible checkpoint
    """
    config.validate()
    source = source if source is not None else GeneratedScenes(config.scene_spec(), split=TRAIN)
    loss_rows: List[Dict] = []
    if resume is not None:
        checkpoint = Checkpoint.load(resume)
        model, rng = checkpoint.restore(config)
        start = checkpoint.step
        loss_rows = _previous_loss_rows(out_dir, start)
        logger.info(f"Resuming from {resume} at step {start}")
    else:
        model, rng, start = Model(config), training_rng(config), 0
    if not config.use_vq:
        logger.warning("Vector quantisation is off; perplexity is undefined and logged as NaN")
    eval_log_rows: List[Dict] = []
    checkpoints: List[str] = []
    held_out = {"scenes": eval_scenes}

    def _evaluate(step: int):
        if held_out["scenes"] is None:
            held_out["scenes"] = eval_split(config.scene_spec(), config.eval_scenes)
        summary = summarise(evaluate(model, held_out["scenes"], njobs=config.eval_njobs, verbose=False))
        eval_log_rows.append({"step": step, **summary})
        logger.info(f"Evaluation at step {step}: " + ", ".join(f"{k}={v:.4f}" for k, v in summary.items()))

    stream = dataset_stream(source, batch_size=config.batch_size, start_batch=start)
    batches = BatchPrefetcher(stream) if prefetch else stream
    window: List[Dict] = []
    bar = progress_bar(total=config.steps, initial=start, verbose=verbose, desc="Training")
    try:
        for step in range(start + 1, config.steps + 1):
            stats = train_step(model, next(batches), rng, step)
            row = {"step": step, "L_recon": stats["recon"], "L_vq": stats["vq"], "perplexity": _window_perplexity(model)}
            loss_rows.append(row)
            window.append(row)
            bar.update(1)
            if step % config.log_every == 0:
                logger.info(
                    f"step {step}: L_recon={np.mean([r['L_recon'] for r in window]):.6f} "
                    f"L_vq={np.mean([r['L_vq'] for r in window]):.6f} perplexity={row['perplexity']:.2f}"
                )
                bar.set_postfix(L_recon=row["L_recon"], perplexity=row["perplexity"])
                window = []
                if model.codebook is not None:
                    model.codebook.reset_usage()
            if config.eval_every and step % config.eval_every == 0:
                _evaluate(step)
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                checkpoints.append(
                    Checkpoint.from_model(model, step, rng).save(
                        os.path.join(out_dir, "checkpoints", f"step_{step:07d}.ckpt")
                    )
                )
                _write_logs(out_dir, loss_rows, eval_log_rows)
    finally:
        bar.close()
        if isinstance(batches, BatchPrefetcher):
            batches.close()
    if final_eval and (not config.eval_every or config.steps % config.eval_every):
        _evaluate(config.steps)
    if out_dir is not None:
        checkpoints.append(
            Checkpoint.from_model(model, config.steps, rng).save(os.path.join(out_dir, "checkpoints", "final.ckpt"))
        )
        _write_logs(out_dir, loss_rows, eval_log_rows)
    return TrainResult(
        model=model,
        step=config.steps,
        loss_log=pd.DataFrame(loss_rows, columns=["step", "L_recon", "L_vq", "perplexity"]),
        eval_log=pd.DataFrame(eval_log_rows, columns=["step", *METRIC_COLUMNS]),
        checkpoints=checkpoints,
    )


def _write_logs(out_dir: str, loss_rows: List[Dict], eval_rows: List[Dict]):
    os.makedirs(out_dir, exist_ok=True)
    pd.DataFrame(loss_rows, columns=["step", "L_recon", "L_vq", "perplexity"]).to_csv(
        os.path.join(out_dir, "loss.csv"), index=False
    )
    pd.DataFrame(eval_rows, columns=["step", *METRIC_COLUMNS]).to_csv(os.path.join(out_dir, "eval.csv"), index=False)


def _previous_loss_rows(out_dir: Optional[str], step: int) -> List[Dict]:
    if out_dir is None or not os.path.isfile(os.path.join(out_dir, "loss.csv")):
        return []
    previous = pd.read_csv(os.path.join(out_dir, "loss.csv"))
    return previous[previous["step"] <= step].to_dict("records")


@dataclass
class Prediction:
    """
    Masks and cues predicted for one scene.

    Attributes
    ----------
    soft_masks: numpy.ndarray
        K x N from the decoder reading the modulated slots
    labels: numpy.ndarray
        N hard slot labels
    labels_unmodulated: numpy.ndarray
        N hard slot labels from decoding the bottom-up slots
    attention: numpy.ndarray
        K x N bottom-up attention A
    attention_modulated: numpy.ndarray
        K x N modulated-pass attention A
    code_indices: numpy.ndarray or None
        K selected codes
    """

    soft_masks: np.ndarray
    labels: np.ndarray
    labels_unmodulated: np.ndarray
    attention: np.ndarray
    attention_modulated: np.ndarray
    code_indices: Optional[np.ndarray]


def eval_rng(config: TrainConfig, scene_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, _EVAL_NOISE_TAG, scene_index]))


def predict(model: Model, scene: SceneSample) -> Prediction:
    """Forward one scene with evaluation noise (derived from the run seed and the scene index)."""
    config = model.config
    out = forward_full(model, scene.features, eval_rng(config, scene.index))
    soft, labels = extract_masks(out.decoded, last_block_only=config.last_block_masks)
    _, labels_unmodulated = extract_masks(
        decode(model.decoder, scene.features, out.slots_bottom_up.slots), last_block_only=config.last_block_masks
    )
    return Prediction(
        soft_masks=soft,
        labels=labels,
        labels_unmodulated=labels_unmodulated,
        attention=out.attention.A.values,
        attention_modulated=out.attention_modulated.A.values,
        code_indices=out.quantized.indices if out.quantized is not None else None,
    )


def evaluate_scene(scene: SceneSample, model: Model) -> Dict:
    config = model.config
    prediction = predict(model, scene)
    row = {"scene_index": scene.index, "n_objects": scene.n_objects}
    row.update(evaluate_masks(scene.gt_masks, scene.categories, prediction.labels, config.n_slots, config.mbo_reading))
    unmodulated = evaluate_masks(
        scene.gt_masks, scene.categories, prediction.labels_unmodulated, config.n_slots, config.mbo_reading
    )
    row.update({f"{k}_unmodulated": v for k, v in unmodulated.items()})
    return row


def evaluate(model: Model, scenes: Sequence[SceneSample], njobs: int = 1, verbose: bool = True) -> pd.DataFrame:
    """
    Metrics per scene for the modulated model and, from the same forward, for the decoded
    bottom-up slots.

    Parameters
    ----------
    model: Model
    scenes: Sequence[SceneSample]
    njobs: int (default=1)
        Worker processes; results do not depend on it
    verbose: bool (default=True)

    Returns
    -------
    Pandas.DataFrame
        One row per scene: scene_index, n_objects, fg_ari, mbo_i, mbo_c, miou and the same
        metrics suffixed '_unmodulated'
    """
    if njobs > 1:
        with Pool(min(njobs, cpu_count())) as pool:
            rows = list(pool.map(partial(evaluate_scene, model=model), scenes))
    else:
        rows = [evaluate_scene(s, model) for s in progress_bar(scenes, verbose=verbose, desc="Evaluating")]
    return pd.DataFrame(rows)


def code_assignments(model: Model, scenes: Sequence[SceneSample], verbose: bool = True) -> pd.DataFrame:
    """
    The code each slot of each scene maps to, with the size of the slot's predicted mask.

    Returns
    -------
    Pandas.DataFrame
        Columns scene_index, slot, code_index, mask_cells

    Raises
    ------
    TrainingError
        The model has no codebook
    """
    if model.codebook is None:
        raise TrainingError("Model was trained without vector quantisation; there are no codes to assign")
    rows = []
    for scene in progress_bar(scenes, verbose=verbose, desc="Assigning codes"):
        prediction = predict(model, scene)
        for slot, code in enumerate(prediction.code_indices):
            rows.append(
                {
                    "scene_index": scene.index,
                    "slot": slot,
                    "code_index": int(code),
                    "mask_cells": int(np.sum(prediction.labels == slot)),
                }
            )
    return pd.DataFrame(rows, columns=["scene_index", "slot", "code_index", "mask_cells"])


def count_flops(config: TrainConfig) -> Dict[str, int]:
    """
    Analytic multiply-add counts of one forward, per section. Normalisations, softmaxes,
    additions and scalings are not counted.

    Parameters
    ----------
    config: TrainConfig

    Returns
    -------
    Dict[str, int]
        encoder, slot_init, pass1, pathway, pass2 and decoder
    """
    k, n, d, f = config.n_slots, config.n_positions, config.slot_dim, config.feature_dim
    t, e, hidden = config.n_iter, config.codebook_size, config.mlp_hidden
    iteration = (
        k * d * d  # query projection
        + 2 * k * n * d  # logits and weighted mean
        + 6 * k * d * d  # GRU input and hidden transforms
        + 3 * k * d  # GRU gating products
        + 2 * k * d * hidden  # update MLP
    )
    pathway = k * n * d
    if config.use_vq:
        pathway += k * e * d
    if config.use_m_c:
        pathway += 2 * k * d * d
    decoder = n * f * f
    if config.decoder_blocks:
        decoder += config.decoder_blocks * (14 * n * f * f + 2 * n * n * f + 2 * k * f * f + 2 * n * k * f)
        if d != f:
            decoder += k * d * f
    return OrderedDict(
        [
            ("encoder", n * f * d + 2 * n * d * d),
            ("slot_init", k * d),
            ("pass1", t * iteration),
            ("pathway", pathway),
            ("pass2", t * (iteration + k * n * d)),
            ("decoder", decoder),
        ]
    )


def measure_flops(config: TrainConfig, scene: Optional[SceneSample] = None) -> Dict[str, int]:
    """Multiply-adds counted at runtime over one forward, per section."""
    model = Model(config)
    scene = scene or GeneratedScenes(config.scene_spec(), split=TRAIN)[0]
    with ad.counting_ops() as counter:
        forward_full(model, scene.features, training_rng(config))
    return OrderedDict((section, counter.totals.get(section, 0)) for section in SECTIONS)


def flops_report(config: TrainConfig, measure: bool = True) -> pd.DataFrame:
    """
    Analytic and (optionally) runtime multiply-adds per section with each section's share of
    the total; a final 'total' row and an 'overhead' row (pathway plus second pass).
    """
    analytic = count_flops(config)
    runtime = measure_flops(config) if measure else {s: np.nan for s in SECTIONS}
    total = sum(analytic.values())
    rows = [
        {"component": s, "analytic": analytic[s], "runtime": runtime[s], "share_pct": 100.0 * analytic[s] / total}
        for s in SECTIONS
    ]
    overhead = analytic["pathway"] + analytic["pass2"]
    rows.append({"component": "total", "analytic": total, "runtime": sum(runtime.values()), "share_pct": 100.0})
    rows.append(
        {
            "component": "overhead",
            "analytic": overhead,
            "runtime": runtime["pathway"] + runtime["pass2"],
            "share_pct": 100.0 * overhead / total,
        }
    )
    return pd.DataFrame(rows, columns=["component", "analytic", "runtime", "share_pct"])
