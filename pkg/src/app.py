#!/usr/bin/env python3
"""
Command-line entrypoint: build-dataset, synth, train, eval, params, report
"""

import argparse
import os
import sys
import time

import logzero
from logzero import logger
from tabulate import tabulate

import benchmark
import evaluation
import training
from config import ConfigError, load_config
from models import FAMILIES, FreezePolicy, ModelSpec, build_model, count_params, default_neck_spec
from render_report import render_clip_strip
from seqdataset import (MANIFEST_FILE, build_dataset, load_clip, load_manifest, load_split_file, read_clip_frames,
                        verify_manifest)
from synthgen import generate
from trackio import crop_box, load_tracks, open_frame_store

RUN_LOG = "run.log"

# (family, unfrozen backbone blocks, total, trainable) as reported for full-width models
REFERENCE_PARAMS = [
    ("image_resnet18", 0, 11.2e6, 1_026),
    ("image_resnet18", 2, 11.2e6, 10.5e6),
    ("r2plus1d", 0, 31.3e6, 1_026),
    ("r2plus1d", 1, 31.3e6, 23.5e6),
    ("resnet18_lstm", 0, 11.4e6, 181e3),
    ("resnet18_lstm", 2, 11.4e6, 10.7e6),
    ("resnet18_mlp", 0, 11.4e6, 262e3),
    ("resnet18_mlp", 2, 11.4e6, 10.8e6),
    ("resnet18_transformer", 0, 20.6e6, 9.5e6),
    ("resnet18_transformer", 2, 20.6e6, 19.9e6),
]
TOTAL_TOLERANCE = 0.02
TRAINABLE_TOLERANCE = 0.03
EXACT_TRAINABLE = 1_026

HINTS = {
    "split file not found": "pass --split-file with a JSON {video_id: split} map or 'video_id split' lines",
    "manifest not found": "run build-dataset or synth first, or pass --manifest",
    "checkpoint not found": "pass the best.pt or last.pt written by a train run",
    "config file not found": "pass --config configs/default.json or omit --config to use defaults",
    "track file not found": "pass --tracks with a line-delimited track file",
    "reference missing frames": "check --frames-root and --index-base against the frame numbering of the track file",
}


def within(value, expected, tolerance, exact=False) -> bool:
    if exact:
        return value == expected
    return abs(value - expected) <= tolerance * expected


def params_row(family, unfrozen, base_width=64, expected=None):
    spec = ModelSpec(family=family, neck=default_neck_spec(family), base_width=base_width)
    report = count_params(build_model(spec, FreezePolicy(unfrozen_backbone_blocks=unfrozen)))
    row = {"family": family, "unfrozen_blocks": unfrozen, "total_params": report.total_params,
           "trainable_params": report.trainable_params, "breakdown": report.breakdown}
    if expected is not None:
        total, trainable = expected
        row["expected_total"] = total
        row["expected_trainable"] = trainable
        row["ok"] = (within(report.total_params, total, TOTAL_TOLERANCE) and
                     within(report.trainable_params, trainable, TRAINABLE_TOLERANCE,
                            exact=trainable == EXACT_TRAINABLE))
    return row


def params_table(rows) -> str:
    headers = ["Architecture", "Unfrozen Backbone Block", "# of Total Parameters",
               "# of Trainable Parameters", "Expected Total", "Expected Trainable", "Check"]
    table = []
    for row in rows:
        table.append([
            evaluation.ARCHITECTURE_NAMES[row["family"]][0],
            row["unfrozen_blocks"],
            f"{row['total_params']:,} ({evaluation.format_params(row['total_params'])})",
            f"{row['trainable_params']:,} ({evaluation.format_params(row['trainable_params'])})",
            evaluation.format_params(row.get("expected_total")),
            evaluation.format_params(row.get("expected_trainable")),
            "-" if "ok" not in row else ("ok" if row["ok"] else "FAIL"),
        ])
    return tabulate(table, headers=headers, tablefmt="github")


class App():
    def __init__(self):
        self.commands = [
            {"name": "build-dataset", "function": self.cmd_build_dataset,
             "help": "export labeled clips and a manifest from tracker output"},
            {"name": "synth", "function": self.cmd_synth,
             "help": "generate a synthetic bird/drone dataset"},
            {"name": "train", "function": self.cmd_train, "help": "train one classifier family"},
            {"name": "eval", "function": self.cmd_eval, "help": "evaluate a checkpoint on a split"},
            {"name": "params", "function": self.cmd_params, "help": "report parameter counts"},
            {"name": "report", "function": self.cmd_report,
             "help": "train and compare several families on one dataset"},
        ]
        self.parser = self.build_parser()

    def build_parser(self):
        parser = argparse.ArgumentParser(prog="app.py", description="Drone vs bird sequence classification")
        subparsers = parser.add_subparsers(dest="command", required=True)
        parsers = {}
        for command in self.commands:
            sub = subparsers.add_parser(command["name"], help=command["help"], description=command["help"])
            parsers[command["name"]] = sub

        for name in ("build-dataset", "synth", "train", "eval", "report"):
            parsers[name].add_argument("--config", default=None, help="JSON config file")
            parsers[name].add_argument("--runs-root", default=None, help="parent directory of run directories")

        p = parsers["build-dataset"]
        p.add_argument("--tracks", default=None, help="line-delimited track file")
        p.add_argument("--frames-root", default=None, help="directory with one video file or frame directory per video")
        p.add_argument("--split-file", default=None, help="per-video train/val assignment")
        p.add_argument("--out", default=None, help="dataset root (default: paths.dataset_root)")
        p.add_argument("--gap-threshold", type=int, default=None,
                       help="predicted-only run length that splits a track (default: 10)")
        p.add_argument("--workers", type=int, default=None, help="export processes (default: one per CPU)")
        p.add_argument("--index-base", type=int, default=None, help="number of the first frame file")
        p.add_argument("--preview", type=int, default=None, help="render crop strips for the first N clips")

        p = parsers["synth"]
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--n-train", type=int, default=None, help="train clips per class")
        p.add_argument("--n-val", type=int, default=None, help="val clips per class")
        p.add_argument("--frames-per-clip", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None, help="export processes (default: one per CPU)")

        p = parsers["train"]
        p.add_argument("--family", choices=FAMILIES, default=None)
        p.add_argument("--freeze", type=int, default=None, help="unfrozen backbone blocks (0 = transfer learning)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--manifest", default=None, help="manifest.json (default: under paths.dataset_root)")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--max-steps", type=int, default=None, help="cap on optimizer steps per epoch")
        p.add_argument("--device", default=None)
        p.add_argument("--resume", default=None, help="last.pt to continue from")

        p = parsers["eval"]
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", default=None, help="manifest.json (default: under paths.dataset_root)")
        p.add_argument("--split", default=None, choices=("train", "val"))
        p.add_argument("--granularity", default=None, choices=evaluation.GRANULARITIES)
        p.add_argument("--windows", type=int, default=None, help="windows averaged per clip")
        p.add_argument("--device", default=None)
        p.add_argument("--out", default=None, help="report directory (default: a new run directory)")

        p = parsers["params"]
        p.add_argument("--family", choices=FAMILIES, default="image_resnet18")
        p.add_argument("--freeze", type=int, default=0, help="unfrozen backbone blocks")
        p.add_argument("--base-width", type=int, default=64)
        p.add_argument("--all", action="store_true", help="every reference row with expected counts")

        p = parsers["report"]
        p.add_argument("--manifest", default=None, help="manifest.json (default: under paths.dataset_root)")
        p.add_argument("--families", nargs="+", choices=FAMILIES, default=list(FAMILIES))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--replot", default=None, help="re-render from an existing results.json")
        return parser

    def get_function(self, name):
        for command in self.commands:
            if command["name"] == name:
                return command["function"]
        raise KeyError(f"Command ({name}) not found.")

    def run(self, argv=None) -> int:
        args = self.parser.parse_args(argv)
        function = self.get_function(args.command)
        try:
            return function(args) or 0
        except (ValueError, LookupError, RuntimeError, OSError) as e:
            logger.error(f"{args.command} failed: {e}")
            print(f"error: {e}", file=sys.stderr)
            hint = next((h for key, h in HINTS.items() if key in str(e)), None)
            if hint:
                print(f"hint: {hint}", file=sys.stderr)
            return 1

    # Helpers

    def _start_run(self, run_config, args):
        run_dir = run_config.create_run_dir(getattr(args, "runs_root", None))
        logzero.logfile(os.path.join(run_dir, RUN_LOG))
        logger.info(f"{args.command}: run directory {run_dir}")
        return run_dir

    def _manifest_path(self, run_config, args):
        return args.manifest or os.path.join(run_config.get("paths.dataset_root"), MANIFEST_FILE)

    # Commands

    def cmd_build_dataset(self, args):
        run_config = load_config(args.config, {
            "paths.tracks": (args.tracks, "--tracks"),
            "paths.frames_root": (args.frames_root, "--frames-root"),
            "paths.splits": (args.split_file, "--split-file"),
            "paths.dataset_root": (args.out, "--out"),
            "dataset.gap_threshold": (args.gap_threshold, "--gap-threshold"),
            "dataset.workers": (args.workers, "--workers"),
            "dataset.index_base": (args.index_base, "--index-base"),
            "dataset.preview_clips": (args.preview, "--preview"),
        })
        paths = run_config.section("paths")
        dataset = run_config.dataset_settings()
        if not paths["splits"]:
            raise FileNotFoundError("split file not found: none given")
        if not paths["tracks"] or not os.path.exists(paths["tracks"]):
            raise FileNotFoundError(f"track file not found: {paths['tracks']}")
        if not paths["frames_root"]:
            raise ConfigError("frames root not set (--frames-root or paths.frames_root)")

        split_map = load_split_file(paths["splits"])
        tracks = load_tracks(paths["tracks"])
        run_dir = self._start_run(run_config, args)

        start = time.time()
        manifest = build_dataset(tracks, paths["frames_root"], split_map, paths["dataset_root"],
                                 dataset["gap_threshold"], dataset["workers"], dataset["index_base"])
        violations = verify_manifest(manifest)
        if violations:
            raise RuntimeError(f"manifest verification failed: {violations[:5]}")
        if dataset["preview_clips"]:
            previews = self.render_previews(manifest, tracks, paths["frames_root"], dataset["index_base"],
                                            run_dir, dataset["preview_clips"])
            print(f"Previews: {len(previews)} strips in {run_dir}")

        self.print_stats(manifest)
        print(f"Manifest: {os.path.join(paths['dataset_root'], MANIFEST_FILE)} (run {run_dir})")
        print(f"Completed. Time spent: {time.time() - start:.2f}s")
        return 0

    def render_previews(self, manifest, tracks, frames_root, index_base, out_dir, count):
        """Native track crops above the stored frames for the first `count` clips"""
        tracks_by_id = {(t.video_id, t.track_id): t for t in tracks}
        paths = []
        for entry in manifest.clips[:count]:
            clip_dir = manifest.clip_dir(entry)
            boxes = {b.frame_index: b for b in tracks_by_id[(entry.video_id, entry.track_id)].boxes}
            with open_frame_store(frames_root, entry.video_id, index_base) as store:
                crops = [crop_box(store, boxes[i]) for i in load_clip(clip_dir).frame_indices]
            path = os.path.join(out_dir, f"preview_{entry.clip_id}.png")
            paths.append(render_clip_strip(crops, read_clip_frames(clip_dir, entry.num_frames), path,
                                           title=f"{entry.clip_id} ({entry.label})"))
        return paths

    def print_stats(self, manifest):
        rows = []
        for split in sorted(manifest.stats):
            for label, counts in sorted(manifest.stats[split].items()):
                rows.append([split, label, counts["clips"], counts["frames"]])
        print(tabulate(rows, headers=["Split", "Label", "Clips", "Frames"], tablefmt="github"))

    def cmd_synth(self, args):
        run_config = load_config(args.config, {
            "synth.n_train_per_class": (args.n_train, "--n-train"),
            "synth.n_val_per_class": (args.n_val, "--n-val"),
            "synth.frames_per_clip": (args.frames_per_clip, "--frames-per-clip"),
            "synth.seed": (args.seed, "--seed"),
            "dataset.workers": (args.workers, "--workers"),
        })
        run_dir = self._start_run(run_config, args)

        start = time.time()
        outputs = generate(run_config.synth_config(), args.out, run_config.dataset_settings()["workers"])
        self.print_stats(outputs["manifest_object"])
        print(f"Manifest: {outputs['manifest']}, gap fixtures: {outputs['gap_tracks']} (run {run_dir})")
        print(f"Completed. Time spent: {time.time() - start:.2f}s")
        return 0

    def cmd_train(self, args):
        run_config = load_config(args.config, {
            "model.family": (args.family, "--family"),
            "freeze.unfrozen_backbone_blocks": (args.freeze, "--freeze"),
            "train.seed": (args.seed, "--seed"),
            "train.epochs": (args.epochs, "--epochs"),
            "train.max_steps_per_epoch": (args.max_steps, "--max-steps"),
            "train.device": (args.device, "--device"),
        })
        manifest = load_manifest(self._manifest_path(run_config, args))

        if args.resume:
            model, state, train_config = training.load_checkpoint(args.resume)
            if train_config is None:
                raise training.TrainingError(f"{args.resume} carries no training config to resume")
            run_dir = os.path.dirname(os.path.abspath(args.resume))
            logzero.logfile(os.path.join(run_dir, RUN_LOG))
            print(f"Resuming {model.family} at epoch {state.epoch}")
        else:
            train_config = run_config.train_config()
            model = build_model(run_config.model_spec(), run_config.freeze_policy())
            run_dir = self._start_run(run_config, args)

        params = count_params(model)
        print(f"{model.family}: {params.total_params:,} parameters, {params.trainable_params:,} trainable")

        start = time.time()
        state = training.train(model, manifest, train_config, run_dir, resume=args.resume)
        print(f"Best val macro F1 {state.best_val_macro_f1:.4f} at epoch {state.best_epoch}")
        print(f"Checkpoints: {run_dir}")
        print(f"Completed. Time spent: {time.time() - start:.2f}s")
        return 0

    def cmd_eval(self, args):
        run_config = load_config(args.config, {
            "eval.split": (args.split, "--split"),
            "eval.granularity": (args.granularity, "--granularity"),
            "eval.windows": (args.windows, "--windows"),
            "train.device": (args.device, "--device"),
        })
        model, _, train_config = training.load_checkpoint(args.checkpoint, run_config.get("train.device"))
        train_config = train_config or run_config.train_config()
        manifest = load_manifest(self._manifest_path(run_config, args))
        if args.out:
            out_dir = run_config.write_config(args.out)
            logzero.logfile(os.path.join(out_dir, RUN_LOG))
        else:
            out_dir = self._start_run(run_config, args)

        eval_section = run_config.section("eval")
        report = evaluation.evaluate(model, manifest, eval_section["split"], eval_section["granularity"],
                                     eval_section["windows"], train_config.eval_batch_size,
                                     train_config.input_size, train_config.num_frames,
                                     train_config.clip_seconds, run_config.get("train.device"))
        files = evaluation.render_report(report, out_dir)
        print(evaluation.format_table([report]))
        print(f"Report files: {', '.join(sorted(files.values()))}")
        return 0

    def cmd_params(self, args):
        start = time.time()
        if args.all:
            rows = [params_row(family, unfrozen, args.base_width,
                               (total, trainable) if args.base_width == 64 else None)
                    for family, unfrozen, total, trainable in REFERENCE_PARAMS]
        else:
            rows = [params_row(args.family, args.freeze, args.base_width)]

        print(params_table(rows))
        print(f"Completed. Time spent: {time.time() - start:.2f}s")
        return 0 if all(row.get("ok", True) for row in rows) else 1

    def cmd_report(self, args):
        flags = {"train.seed": (args.seed, "--seed"), "train.epochs": (args.epochs, "--epochs")}
        run_config = load_config(args.config, flags)
        run_dir = self._start_run(run_config, args)

        if args.replot:
            results = benchmark.read_results(args.replot)
        else:
            results = benchmark.full_test(args.config, self._manifest_path(run_config, args), run_dir,
                                          args.families, flags)
            benchmark.save_test_result(results, run_dir)

        benchmark.generate_graphs(results, run_dir)
        benchmark.write_summary(results, run_dir)
        print(benchmark.format_results(results))
        print(f"Report: {run_dir}")
        failed = [r["family"] for r in results if "error" in r]
        return 1 if failed else 0


def main(argv=None) -> int:
    return App().run(argv)


if __name__ == "__main__":
    sys.exit(main())
