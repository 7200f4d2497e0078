#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Command line entry points. Every command writes its artifacts under one run
directory together with manifest.json, which records the configuration, the
code version, the seed, start and end times and every artifact written.

    slottools gen --out data/
    slottools train --config run.json --out runs/full
    slottools eval --checkpoint runs/full/checkpoints/final.ckpt --out runs/full/eval
    slottools ablate --config run.json --seeds 0 1 2 --out runs/ablation
    slottools select-codebook-size --config run.json --out runs/codebook
    slottools iterations --config run.json --seeds 0 1 2 --out runs/iterations
    slottools visualize --checkpoint final.ckpt --sample-id 3 --out viz/
    slottools codebook --checkpoint final.ckpt --out codes/
    slottools flops --config run.json

Exit codes: 0 success, 1 usage or configuration error, 2 any other failure.

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
import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from dataclasses import field
from datetime import datetime
from datetime import timezone
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import pandas as pd

from .autodiff import AutodiffError
from .config import ABLATIONS
from .config import ConfigError
from .config import default_output_root
from .config import load_config
from .config import OUTPUT_ROOT_ENV
from .config import save_config
from .config import TrainConfig
from .decoder import DecoderError
from .feedback import format_table
from .feedback import progress_bar
from .geometry import GeometryError
from .metrics import MetricError
from .metrics import summarise
from .read import SceneFileError
from .read import StoredScenes
from .read import write_dataset
from .slot_attention import SlotAttentionError
from .top_down import codebook_report
from .top_down import TopDownError
from .toy_data import EVAL
from .toy_data import eval_split
from .toy_data import SceneGenerationError
from .toy_data import TRAIN
from .training import Checkpoint
from .training import code_assignments
from .training import evaluate
from .training import flops_report
from .training import METRIC_COLUMNS
from .training import train
from .training import TrainingError
from .visualize import codebook_concepts
from .visualize import VisualizationError
from .visualize import visualize_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
RUNTIME_ERRORS = (
    AutodiffError,
    SlotAttentionError,
    TopDownError,
    DecoderError,
    TrainingError,
    SceneGenerationError,
    SceneFileError,
    GeometryError,
    MetricError,
    VisualizationError,
    OSError,
)


class UsageError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


def code_version() -> str:
    try:
        from importlib.metadata import version

        return f"slottools {version('slottools')}"
    except Exception:
        return "slottools unknown"


def content_hash(text: str) -> str:
    """Git blob hash of a string."""
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    """
    Attributes
    ----------
    command: str
    out_dir: str
    config: dict
        Snapshot of the configuration used
    seed: int
    code_version: str
    code_hash: str
        Git blob hash of code_version
    started: str
    finished: str
    artifacts: List[str]
        Paths relative to out_dir
    """

    command: str
    out_dir: str
    config: Dict = field(default_factory=dict)
    seed: Optional[int] = None
    code_version: str = field(default_factory=code_version)
    code_hash: str = ""
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: Optional[str] = None
    artifacts: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.code_hash = content_hash(self.code_version)

    def add(self, *paths: str):
        for path in paths:
            relative = os.path.relpath(path, self.out_dir)
            if relative.startswith(".."):
                raise UsageError(f"Artifact {path} lies outside the run directory {self.out_dir}")
            if relative not in self.artifacts:
                self.artifacts.append(relative)

    def add_tree(self, directory: str):
        for root, _, files in os.walk(directory):
            self.add(*[os.path.join(root, f) for f in sorted(files)])

    def write(self) -> str:
        self.finished = datetime.now(timezone.utc).isoformat()
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "w") as f:
            json.dump(
                {
                    "command": self.command,
                    "config": self.config,
                    "config_hash": TrainConfig.from_dict(self.config).config_hash() if self.config else None,
                    "seed": self.seed,
                    "code_version": self.code_version,
                    "code_hash": self.code_hash,
                    "started": self.started,
                    "finished": self.finished,
                    "layout": sorted(self.artifacts),
                },
                f,
                indent=2,
                sort_keys=True,
            )
        return path


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    config = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "last_block_masks", False):
        overrides["last_block_masks"] = True
    if getattr(args, "mbo_mode", None):
        overrides["mbo_reading"] = args.mbo_mode.replace("-", "_")
    return config.replace(**overrides) if overrides else config.validate()


def _out_dir(args: argparse.Namespace, name: str) -> str:
    out = args.out or os.path.join(default_output_root(), name)
    os.makedirs(out, exist_ok=True)
    return out


def _write_table(table: pd.DataFrame, out_dir: str, name: str, manifest: RunManifest, text: bool = False):
    csv_path = os.path.join(out_dir, f"{name}.csv")
    table.to_csv(csv_path, index=False)
    manifest.add(csv_path)
    if text:
        txt_path = os.path.join(out_dir, f"{name}.txt")
        with open(txt_path, "w") as f:
            f.write(format_table(table) + "\n")
        manifest.add(txt_path)


def _training_source(config: TrainConfig, data: Optional[str]):
    if data is None:
        return None
    stored = StoredScenes(data, split=TRAIN)
    _check_dataset(config, stored.spec.height, stored.spec.width, stored.spec.feature_dim, data)
    return stored


def _eval_scenes(config: TrainConfig, data: Optional[str], n_scenes: Optional[int] = None) -> List:
    n_scenes = n_scenes or config.eval_scenes
    if data is None:
        return eval_split(config.scene_spec(), n_scenes)
    stored = StoredScenes(data, split=EVAL, limit=n_scenes)
    _check_dataset(config, stored.spec.height, stored.spec.width, stored.spec.feature_dim, data)
    return [stored[i] for i in range(stored.size)]


def _check_dataset(config: TrainConfig, height: int, width: int, feature_dim: int, data: str):
    if (height, width, feature_dim) != (config.height, config.width, config.feature_dim):
        raise TrainingError(
            f"Dataset {data} has grid {height} x {width} with {feature_dim} features, but the model "
            f"(config hash {config.config_hash()[:12]}) expects {config.height} x {config.width} "
            f"with {config.feature_dim}"
        )


def _load_checkpoint(args: argparse.Namespace) -> Tuple[Checkpoint, TrainConfig]:
    checkpoint = Checkpoint.load(args.checkpoint)
    config = checkpoint.config
    overrides = {}
    if getattr(args, "last_block_masks", False):
        overrides["last_block_masks"] = True
    if getattr(args, "mbo_mode", None):
        overrides["mbo_reading"] = args.mbo_mode.replace("-", "_")
    return checkpoint, config.replace(**overrides) if overrides else config


def cmd_gen(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args, "dataset")
    manifest = RunManifest("gen", out, config.to_dict(), config.data_seed)
    write_dataset(
        out,
        config.scene_spec(),
        n_train=args.train_scenes,
        n_eval=args.eval_scenes or config.eval_scenes,
        njobs=args.njobs,
        verbose=not args.quiet,
    )
    manifest.add_tree(out)
    manifest.write()
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(args, "train")
    manifest = RunManifest("train", out, config.to_dict(), config.seed)
    config_path = os.path.join(out, "config.json")
    save_config(config, config_path)
    result = train(
        config,
        source=_training_source(config, args.data),
        out_dir=out,
        resume=args.resume,
        eval_scenes=_eval_scenes(config, args.data) if not args.no_eval else None,
        final_eval=not args.no_eval,
        verbose=not args.quiet,
    )
    logger.info(f"Finished {result.step} steps; final L_recon {result.loss_log['L_recon'].iloc[-1]:.6f}")
    manifest.add_tree(out)
    manifest.write()
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint, config = _load_checkpoint(args)
    out = _out_dir(args, "eval")
    manifest = RunManifest("eval", out, config.to_dict(), config.seed)
    model, _ = checkpoint.restore(config)
    scenes = _eval_scenes(config, args.data, args.scenes)
    per_scene = evaluate(model, scenes, njobs=args.njobs, verbose=not args.quiet)
    _write_table(per_scene, out, "per_scene", manifest)
    modulated = summarise(per_scene)
    unmodulated = summarise(per_scene, tuple(f"{c}_unmodulated" for c in METRIC_COLUMNS))
    summary = pd.DataFrame(
        [
            {"slots": "modulated", **modulated},
            {"slots": "unmodulated", **{c: unmodulated[f"{c}_unmodulated"] for c in METRIC_COLUMNS}},
        ],
        columns=["slots", *METRIC_COLUMNS],
    )
    _write_table(summary, out, "summary", manifest, text=True)
    print(format_table(summary))
    manifest.write()
    return EXIT_OK


def run_grid(
    base: TrainConfig,
    variants: Sequence[Tuple[str, TrainConfig]],
    seeds: Sequence[int],
    out: str,
    data: Optional[str] = None,
    verbose: bool = True,
) -> pd.DataFrame:
    """
    Train and evaluate every (variant, seed) pair; one row per pair with the eval-split means.
    """
    rows = []
    eval_scenes = _eval_scenes(base, data)
    for name, variant in progress_bar(variants, verbose=verbose, desc="Variants"):
        for seed in seeds:
            config = variant.replace(seed=seed)
            result = train(
                config,
                source=_training_source(config, data),
                out_dir=os.path.join(out, name, f"seed{seed}"),
                eval_scenes=eval_scenes,
                verbose=False,
            )
            final = result.eval_log.iloc[-1]
            rows.append({"variant": name, "seed": seed, **{c: float(final[c]) for c in METRIC_COLUMNS}})
            logger.info(f"{name} seed {seed}: " + ", ".join(f"{c}={final[c]:.4f}" for c in METRIC_COLUMNS))
    return pd.DataFrame(rows, columns=["variant", "seed", *METRIC_COLUMNS])


def seed_means(table: pd.DataFrame, order: Sequence[str]) -> pd.DataFrame:
    means = table.groupby("variant", sort=False)[list(METRIC_COLUMNS)].mean()
    return means.reindex(list(order)).reset_index()


def cmd_ablate(args: argparse.Namespace) -> int:
    base = _resolve_config(args)
    out = _out_dir(args, "ablation")
    manifest = RunManifest("ablate", out, base.to_dict(), base.seed)
    variants = [(name, base.with_ablation(name)) for name in ABLATIONS]
    seeds = args.seeds or [base.seed]
    per_seed = run_grid(base, variants, seeds, out, data=args.data, verbose=not args.quiet)
    flags = pd.DataFrame(
        [{"variant": name, "m_c": f[0], "vq": f[1], "m_s": f[2], "shift": f[3]} for name, f in ABLATIONS.items()]
    )
    table = flags.merge(seed_means(per_seed, list(ABLATIONS)), on="variant")
    _write_table(per_seed, out, "ablation_per_seed", manifest)
    _write_table(table, out, "ablation", manifest, text=True)
    print(format_table(table))
    manifest.add_tree(out)
    manifest.write()
    return EXIT_OK


def cmd_iterations(args: argparse.Namespace) -> int:
    base = _resolve_config(args)
    out = _out_dir(args, "iterations")
    manifest = RunManifest("iterations", out, base.to_dict(), base.seed)
    baseline = base.with_ablation("baseline")
    variants = [
        (f"baseline_T{base.n_iter}", baseline),
        (f"baseline_T{2 * base.n_iter}", baseline.replace(n_iter=2 * base.n_iter)),
        (f"full_T{base.n_iter}", base.with_ablation("full")),
    ]
    per_seed = run_grid(base, variants, args.seeds or [base.seed], out, data=args.data, verbose=not args.quiet)
    table = seed_means(per_seed, [name for name, _ in variants])
    _write_table(per_seed, out, "iterations_per_seed", manifest)
    _write_table(table, out, "iterations", manifest, text=True)
    print(format_table(table))
    manifest.add_tree(out)
    manifest.write()
    return EXIT_OK


def choose_codebook_size(history: Sequence[Tuple[int, float]], ratio: float = 1.1) -> Optional[int]:
    """
    Plateau rule over a doubling sequence of (codebook size, perplexity) pairs.

    The first consecutive pair (E, p_E), (2E, p_2E) with p_2E < ratio * p_E is the plateau;
    E is chosen when p_2E <= p_E, otherwise 2E.

    Parameters
    ----------
    history: Sequence[Tuple[int, float]]
        In training order
    ratio: float (default=1.1)

    Returns
    -------
    int or None
        None while no plateau has been reached
    """
    for (size, ppl), (next_size, next_ppl) in zip(history[:-1], history[1:]):
        if next_ppl < ratio * ppl:
            return size if next_ppl <= ppl else next_size
    return None


def search_codebook_size(
    measure: Callable[[int], float], min_size: int, max_size: int, ratio: float = 1.1
) -> Tuple[int, bool, List[Tuple[int, float]]]:
    """
    Double the codebook size from min_size, measuring perplexity for each, until the plateau
    rule fires or max_size has been measured.

    Returns
    -------
    Tuple[int, bool, List[Tuple[int, float]]]
        Chosen size, whether a plateau was found (otherwise the largest size is chosen) and
        the measured history

    Raises
    ------
    ConfigError
        Fewer than two sizes could be measured
    """
    history: List[Tuple[int, float]] = []
    size = min_size
    while size <= max_size:
        history.append((size, measure(size)))
        chosen = choose_codebook_size(history, ratio)
        if chosen is not None:
            return chosen, True, history
        size *= 2
    if len(history) < 2:
        raise ConfigError(
            f"Codebook size selection needs at least two sizes; range [{min_size}, {max_size}] gives {len(history)}"
        )
    logger.warning(f"Perplexity did not plateau up to codebook size {history[-1][0]}")
    return history[-1][0], False, history


def cmd_select_codebook_size(args: argparse.Namespace) -> int:
    base = _resolve_config(args).with_ablation("full")
    out = _out_dir(args, "codebook_size")
    manifest = RunManifest("select-codebook-size", out, base.to_dict(), base.seed)
    eval_scenes = _eval_scenes(base, args.data)
    rows = []

    def measure(size: int) -> float:
        config = base.replace(codebook_size=size, steps=base.selection_steps, eval_every=0)
        result = train(
            config,
            source=_training_source(config, args.data),
            out_dir=os.path.join(out, f"E{size}"),
            eval_scenes=eval_scenes,
            verbose=False,
        )
        # perplexity of the final window, on training data only
        ppl = float(result.loss_log["perplexity"].iloc[-1])
        final = result.eval_log.iloc[-1]
        rows.append({"codebook_size": size, "perplexity": ppl, **{c: float(final[c]) for c in METRIC_COLUMNS}})
        logger.info(f"Codebook size {size}: perplexity {ppl:.2f}")
        return ppl

    chosen, plateaued, _ = search_codebook_size(
        measure, base.min_codebook_size, base.max_codebook_size, base.plateau_ratio
    )
    table = pd.DataFrame(rows, columns=["codebook_size", "perplexity", *METRIC_COLUMNS])
    table["chosen"] = table["codebook_size"] == chosen
    _write_table(table, out, "perplexity", manifest, text=True)
    print(format_table(table))
    print(f"chosen codebook size: {chosen}" + ("" if plateaued else " (no plateau)"))
    manifest.add_tree(out)
    manifest.write()
    return EXIT_OK


def cmd_visualize(args: argparse.Namespace) -> int:
    checkpoint, config = _load_checkpoint(args)
    out = _out_dir(args, "visualize")
    manifest = RunManifest("visualize", out, config.to_dict(), config.seed)
    model, _ = checkpoint.restore(config)
    scenes = _eval_scenes(config, args.data, args.scenes)
    if args.codebook:
        codebook_concepts(model, scenes, out, top=args.top, verbose=not args.quiet)
        manifest.add_tree(out)
    else:
        if not 0 <= args.sample_id < len(scenes):
            raise VisualizationError(f"Sample id {args.sample_id} out of range [0, {len(scenes)})")
        manifest.add(*visualize_scene(model, scenes[args.sample_id], os.path.join(out, f"sample{args.sample_id}")))
    manifest.write()
    return EXIT_OK


def cmd_codebook(args: argparse.Namespace) -> int:
    checkpoint, config = _load_checkpoint(args)
    out = _out_dir(args, "codebook")
    manifest = RunManifest("codebook", out, config.to_dict(), config.seed)
    model, _ = checkpoint.restore(config)
    if model.codebook is None:
        raise TrainingError("Checkpoint was trained without vector quantisation; there is no codebook to dump")
    assignments = code_assignments(model, _eval_scenes(config, args.data, args.scenes), verbose=not args.quiet)
    usage = np.bincount(assignments["code_index"].to_numpy(dtype=np.int64), minlength=model.codebook.size)
    _write_table(codebook_report(model.codebook, usage), out, "codebook", manifest)
    _write_table(assignments, out, "assignments", manifest)
    manifest.write()
    return EXIT_OK


def cmd_flops(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    table = flops_report(config, measure=not args.no_measure)
    print(format_table(table, float_format="{:.2f}"))
    if args.out:
        out = _out_dir(args, "flops")
        manifest = RunManifest("flops", out, config.to_dict(), config.seed)
        _write_table(table, out, "flops", manifest, text=True)
        manifest.write()
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slottools", description="Slot attention with a self-modulating top-down pathway")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name: str, func: Callable, help_text: str, config: bool = True, checkpoint: bool = False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", help=f"Run directory (default: ${OUTPUT_ROOT_ENV}/{name})")
        p.add_argument("--quiet", action="store_true", help="No progress bars")
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--seed", type=int, help="Overrides the config seed")
            p.add_argument("--steps", type=int, help="Overrides the config step count")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        return p

    p = add("gen", cmd_gen, "Write a synthetic dataset directory")
    p.add_argument("--train-scenes", type=int, default=2048)
    p.add_argument("--eval-scenes", type=int)
    p.add_argument("--njobs", type=int, default=1)

    p = add("train", cmd_train, "Train a model")
    p.add_argument("--data", help="Dataset directory (default: generate scenes on the fly)")
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.add_argument("--no-eval", action="store_true")

    for name, func, help_text in (
        ("ablate", cmd_ablate, "Train and evaluate the six pathway ablations"),
        ("iterations", cmd_iterations, "Baseline with T and 2T iterations against the full model with T"),
    ):
        p = add(name, func, help_text)
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--data")

    p = add("select-codebook-size", cmd_select_codebook_size, "Double the codebook size until perplexity plateaus")
    p.add_argument("--data")

    for name, func, help_text in (
        ("eval", cmd_eval, "Evaluate a checkpoint on the eval split"),
        ("visualize", cmd_visualize, "Write attention and mask images"),
        ("codebook", cmd_codebook, "Dump codebook usage and spacing"),
    ):
        p = add(name, func, help_text, config=False, checkpoint=True)
        p.add_argument("--data", help="Dataset directory (default: the generated eval split)")
        p.add_argument("--scenes", type=int, help="Number of eval scenes")
        p.add_argument("--last-block-masks", action="store_true", help="Read masks from the last decoder block")
        p.add_argument("--mbo-mode", choices=["per-gt", "per-pred"])
        if name == "eval":
            p.add_argument("--njobs", type=int, default=1)
        if name == "visualize":
            p.add_argument("--sample-id", type=int, default=0)
            p.add_argument("--codebook", action="store_true", help="Group eval slots by code")
            p.add_argument("--top", type=int, default=8)

    p = add("flops", cmd_flops, "Multiply-add accounting per component")
    p.add_argument("--no-measure", action="store_true", help="Analytic counts only")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command is None:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected failure in '{args.command}'")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
