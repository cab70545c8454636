"""Batch command-line front end.

Subcommands: gen (synthetic datasets), train (scratch or prompt tuning),
eval (metrics from a checkpoint or external results), ablate (table
sweeps) and dump-heatmaps (per-keypoint PGM inspection output).

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(training divergence, unreadable/unwritable files).  Every command is
deterministic given --seed; VLPOSE_SEED overrides the configured seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys

import numpy as np

from . import evaluate, synth
from . import train as train_mod
from .codec import affine_crop, heatmaps_to_keypoints
from .config import ConfigError, RunConfig
from .decoder import wiring_names
from .images import read_image, write_pgm
from .model import PoseModel
from .serialize import load_checkpoint
from .text import TableEmbedder, load_embedding_table
from .train import DivergenceError

SIZE_LADDER = {"Small": (32, 2), "Base": (48, 2), "Large": (64, 3), "Huge": (96, 3)}
TOKEN_SWEEP = (5, 10, 20, 50)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="vlpose", description=__doc__)
    parser.add_argument("--workdir", default=None, help="resolve all relative paths under this directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic stick-figure dataset")
    p.add_argument("--domain", required=True, help="natural, art, art:K (style 1..14) or all")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int, default=160)
    p.add_argument("--persons", type=int, default=1)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="annotations.json of the training set")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--mode", choices=("scratch", "prompt_tune"), default="scratch")
    p.add_argument("--checkpoint", default=None, help="base checkpoint (required for prompt_tune)")
    p.add_argument("--decoder", default=None)
    p.add_argument("--matcher", default=None)
    p.add_argument("--finetune", default=None)
    p.add_argument("--prompt-tokens", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint or an external results file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--results", default=None, help="evaluate these predictions instead of running a model")
    p.add_argument("--strip-prompts", action="store_true",
                   help="evaluate the reverted model (prompts removed, matcher off, baseline decoder)")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("ablate", help="run a structured ablation suite")
    p.add_argument("--suite", choices=("matcher", "decoder", "tokens"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data", default=None, help="separate eval annotations (default: the training set)")
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("dump-heatmaps", help="write per-keypoint PGMs and decoded keypoints")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bbox", default=None, help="x,y,w,h person box (default: the whole image)")
    p.add_argument("--category", type=int, default=1)
    return parser


def _load_run_config(args, overrides: dict) -> RunConfig:
    rc = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    rc.apply_overrides(overrides)
    rc.apply_env()
    return rc


def _provider_for(rc: RunConfig):
    if rc["embed_table"]:
        return TableEmbedder(load_embedding_table(rc["embed_table"]))
    return None  # model falls back to the seeded pseudo-embedder


def _adopt_pretrained(model: PoseModel, checkpoint_dir) -> None:
    """Copy every shared tensor of a base checkpoint into a new model."""
    tensors, _ = load_checkpoint(checkpoint_dir)
    params = model.named_params()
    buffers = model.buffers()
    missing = []
    for name, p in params.items():
        if name.startswith(("encoder.prompt.", "matcher.", "bypass.", "decoder.aux")):
            continue
        if name in tensors and tensors[name].shape == p.data.shape:
            p.data = tensors[name].astype(p.data.dtype)
        else:
            missing.append(name)
    if missing:
        raise ValueError(f"checkpoint {checkpoint_dir} lacks base tensors: {missing[:5]}")
    for name, arr in buffers.items():
        key = f"buffer.{name}"
        if key in tensors and tensors[key].shape == arr.shape:
            arr[...] = tensors[key]
    model.zero_new_branch_scales()


def cmd_gen(args) -> int:
    data = synth.synth_dataset(args.domain, args.n, args.seed, canvas=args.canvas,
                               persons_per_image=args.persons)
    path = synth.write_dataset(data, args.out)
    print(f"wrote {len(data.dataset.instances)} instances over {len(data.images)} images to {path}")
    return 0


def cmd_train(args) -> int:
    overrides = {
        "decoder": args.decoder, "matcher": args.matcher, "finetune": args.finetune,
        "prompt_tokens": args.prompt_tokens, "steps": args.steps, "batch": args.batch,
        "seed": args.seed,
    }
    rc = _load_run_config(args, overrides)
    if args.mode == "prompt_tune":
        if not args.checkpoint:
            raise UsageError("--mode prompt_tune requires --checkpoint")
        if args.finetune is None:
            rc.set("finetune", "visual_prompt")
    dataset = evaluate.load_annotations(args.data)
    image_arrays = synth.load_image_dir(args.data)
    model = PoseModel(rc.model_config(), provider=_provider_for(rc))
    if args.mode == "prompt_tune":
        _adopt_pretrained(model, args.checkpoint)
    samples = train_mod.prepare_samples(image_arrays, dataset.instances,
                                        input_hw=(rc["height"], rc["width"]), sigma=rc["sigma"])
    os.makedirs(args.out, exist_ok=True)
    rc.write(os.path.join(args.out, "config.txt"))
    checkpoint_dir = os.path.join(args.out, "checkpoint")
    try:
        train_mod.train_loop(model, samples, rc.train_config(), log_path=os.path.join(args.out, "metrics.jsonl"))
    except DivergenceError as exc:
        model.save(checkpoint_dir)  # parameters were rolled back to the last good snapshot
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    model.save(checkpoint_dir)
    print(f"trained {rc['steps']} steps; checkpoint at {checkpoint_dir}")
    return 0


def cmd_eval(args) -> int:
    dataset = evaluate.load_annotations(args.annotations)
    os.makedirs(args.out, exist_ok=True)
    if args.results:
        predictions = evaluate.load_results(args.results)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --results")
        model = PoseModel.load(args.checkpoint)
        if dataset.instances and dataset.instances[0].keypoints.shape[0] != model.config.n_keypoints:
            raise ValueError(
                f"dataset has {dataset.instances[0].keypoints.shape[0]} keypoints per instance, "
                f"checkpoint expects {model.config.n_keypoints}"
            )
        if args.strip_prompts:
            model = model.strip_prompts()
        image_arrays = synth.load_image_dir(args.annotations)
        predictions = model.predict_dataset(image_arrays, dataset.instances, threads=args.threads)
        with open(os.path.join(args.out, "results.json"), "w", encoding="utf-8") as fh:
            json.dump(
                [
                    {
                        "image_id": p.image_id,
                        "category_id": p.category_id,
                        "keypoints": [round(float(v), 6) for v in p.keypoints.reshape(-1)],
                        "score": round(float(p.score), 6),
                    }
                    for p in predictions
                ],
                fh, indent=1,
            )
            fh.write("\n")
    result = evaluate.compute_metrics(dataset, predictions)
    names = dict(dataset.categories)
    evaluate.write_metrics(result, os.path.join(args.out, "metrics.csv"),
                           os.path.join(args.out, "metrics.json"), category_names=names)
    if result.is_empty:
        print("no labeled ground truth; wrote empty metrics")
    else:
        print(f"AP={result.ap:.4f} AP50={result.ap50:.4f} AP75={result.ap75:.4f} "
              f"AR={result.ar:.4f} AR50={result.ar50:.4f}")
    return 0


METRIC_COLUMNS = ("AP", "AP50", "AP75", "AR", "AR50")


def _metrics_row(result) -> list:
    if result.is_empty:
        return ["", "", "", "", ""]
    return [f"{v:.4f}" for v in (result.ap, result.ap50, result.ap75, result.ar, result.ar50)]


def _run_ablation_cell(rc: RunConfig, overrides: dict, samples, eval_images, eval_instances, eval_dataset):
    cell_rc = copy.deepcopy(rc)
    for key, value in overrides.items():
        cell_rc.set(key, value)
    model = PoseModel(cell_rc.model_config(), provider=_provider_for(cell_rc))
    if cell_rc["steps"] > 0:
        train_mod.train_loop(model, samples, cell_rc.train_config())
    predictions = model.predict_dataset(eval_images, eval_instances)
    return evaluate.compute_metrics(eval_dataset, predictions)


def cmd_ablate(args) -> int:
    rc = _load_run_config(args, {"steps": args.steps, "seed": args.seed})
    dataset = evaluate.load_annotations(args.data)
    image_arrays = synth.load_image_dir(args.data)
    samples = train_mod.prepare_samples(image_arrays, dataset.instances,
                                        input_hw=(rc["height"], rc["width"]), sigma=rc["sigma"])
    if args.eval_data:
        eval_dataset = evaluate.load_annotations(args.eval_data)
        eval_images = synth.load_image_dir(args.eval_data)
    else:
        eval_dataset, eval_images = dataset, image_arrays
    os.makedirs(args.out, exist_ok=True)
    rc.write(os.path.join(args.out, "config.txt"))

    def emit(filename: str, label: str, rows: list) -> None:
        path = os.path.join(args.out, filename)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([label, *METRIC_COLUMNS])
            for name, overrides in rows:
                result = _run_ablation_cell(rc, overrides, samples, eval_images,
                                            eval_dataset.instances, eval_dataset)
                writer.writerow([name, *_metrics_row(result)])
        print(f"wrote {path}")

    if args.suite == "matcher":
        emit("table_a.csv", "config", [
            ("w/o text", {"matcher": "none"}),
            ("w/o matcher", {"matcher": "bypass"}),
            ("w matcher", {"matcher": "E_T"}),
        ])
        emit("table_c.csv", "K=V", [
            ("None", {"matcher": "none"}),
            ("T", {"matcher": "T"}),
            ("[E, E.T]", {"matcher": "E_dot_T"}),
            ("[E, T]", {"matcher": "E_T"}),
        ])
        emit("table_d.csv", "prompt", [
            ("None", {"matcher": "none"}),
            ("Random", {"matcher": "E_T", "prompt_policy": "random"}),
            ("Fixed prompt", {"matcher": "E_T", "prompt_policy": "fixed"}),
            ("Style prompt", {"matcher": "E_T", "prompt_policy": "style"}),
        ])
    elif args.suite == "decoder":
        emit("table_e.csv", "model", [
            ("None", {"matcher": "none", "decoder": "Baseline"}),
            ("in", {"matcher": "E_T", "decoder": "First"}),
            ("ex-in", {"matcher": "E_T", "decoder": "First-Final"}),
            ("2-ex-in", {"matcher": "E_T", "decoder": "First-AMiddle-Final"}),
        ])
        rows = [("Baseline", {"matcher": "none", "decoder": "Baseline"})]
        rows += [(name, {"matcher": "E_T", "decoder": name}) for name in wiring_names() if name != "Baseline"]
        emit("decoder_wirings.csv", "model", rows)
    else:  # tokens
        path = os.path.join(args.out, "table_f.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tokens", *SIZE_LADDER.keys()])
            for tokens in TOKEN_SWEEP:
                row = [str(tokens)]
                for channels, depth in SIZE_LADDER.values():
                    result = _run_ablation_cell(
                        rc,
                        {"prompt_tokens": tokens, "channels": channels, "depth": depth, "matcher": "E_T",
                         "decoder": "First-AMiddle-Final"},
                        samples, eval_images, eval_dataset.instances, eval_dataset)
                    row.append("" if result.is_empty else f"{result.ap:.4f}")
                writer.writerow(row)
        print(f"wrote {path}")
    return 0


def cmd_dump_heatmaps(args) -> int:
    model = PoseModel.load(args.checkpoint)
    image = read_image(args.image)
    h, w = image.shape[:2]
    if args.bbox:
        parts = [float(v) for v in args.bbox.split(",")]
        if len(parts) != 4:
            raise UsageError("--bbox expects x,y,w,h")
        bbox = tuple(parts)
    else:
        bbox = (0.0, 0.0, float(w), float(h))
    enc = model.config.encoder
    inputs, transform = affine_crop(image, bbox, out_hw=(enc.height, enc.width))
    heatmaps = model.forward(inputs, args.category, training=False)
    arr = heatmaps.array
    os.makedirs(args.out, exist_ok=True)
    for i in range(arr.shape[0]):
        channel = arr[i]
        span = channel.max() - channel.min()
        if span <= 0:
            normalized = np.zeros_like(channel)
        else:
            normalized = (channel - channel.min()) / span
        write_pgm(os.path.join(args.out, f"kp_{i:02d}.pgm"), np.round(normalized * 255).astype(np.uint8))
    keypoints = heatmaps_to_keypoints(heatmaps, transform)
    with open(os.path.join(args.out, "keypoints.json"), "w", encoding="utf-8") as fh:
        json.dump([[round(float(v), 4) for v in row] for row in keypoints], fh, indent=1)
        fh.write("\n")
    print(f"wrote {arr.shape[0]} heatmap channels and keypoints.json to {args.out}")
    return 0


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-heatmaps": cmd_dump_heatmaps,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workdir:
            os.chdir(args.workdir)
        return HANDLERS[args.command](args)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
