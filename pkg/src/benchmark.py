#!/usr/bin/env python3
"""
Modality comparison: train every family on one dataset under one recipe and
compare validation F1 against the single-image baseline
"""

import argparse
import json
import os
import sys
import time

# Add src to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from logzero import logger
from tabulate import tabulate

import evaluation
import training
from config import load_config
from models import FAMILIES, build_model
from render_report import plot_modality_comparison
from seqdataset import load_manifest

BASELINE_FAMILY = "image_resnet18"
RESULTS_FILE = "results.json"


def benchmark_family(config_path, family, manifest, out_dir, flags=None) -> dict:
    """Train one family, reload its best checkpoint and evaluate on val"""
    print(f"\n{family}:")
    flags = dict(flags or {})
    flags["model.family"] = (family, "--families")

    try:
        run_config = load_config(config_path, flags)
        train_config = run_config.train_config()
        model = build_model(run_config.model_spec(), run_config.freeze_policy())
        family_dir = os.path.join(out_dir, family)

        start = time.time()
        state = training.train(model, manifest, train_config, family_dir)
        train_time = time.time() - start

        best, _, _ = training.load_checkpoint(os.path.join(family_dir, training.BEST_CHECKPOINT),
                                              train_config.device)
        eval_section = run_config.section("eval")
        report = evaluation.evaluate(best, manifest, eval_section["split"], eval_section["granularity"],
                                     eval_section["windows"], train_config.eval_batch_size,
                                     train_config.input_size, train_config.num_frames,
                                     train_config.clip_seconds, train_config.device)
        print(f"  {state.epoch} epochs in {train_time:.1f}s, val macro F1 {report.f1_macro:.3f}")

        result = report.to_dict()
        result.update({"name": evaluation.ARCHITECTURE_NAMES[family][0], "family": family,
                       "train_seconds": round(train_time, 3), "best_epoch": state.best_epoch})
        return result

    except (ValueError, RuntimeError, FileNotFoundError) as e:
        logger.exception(f"{family} failed: {e}")
        return {"name": family, "family": family, "error": str(e)}


def relative_improvements(results, baseline=BASELINE_FAMILY) -> dict:
    """Percent change of bird and macro F1 over the baseline family, per family"""
    by_family = {r["family"]: r for r in results if "error" not in r}
    if baseline not in by_family:
        return {}

    base = by_family[baseline]
    improvements = {}
    for family, r in by_family.items():
        if family == baseline:
            continue
        improvements[family] = {}
        for key, metric in (("bird", "f1_bird"), ("macro", "f1_macro")):
            improvements[family][key] = (100 * (r[metric] - base[metric]) / base[metric]
                                         if base[metric] > 0 else None)
    return improvements


def full_test(config_path, manifest_path, out_dir, families=FAMILIES, flags=None):
    manifest = load_manifest(manifest_path)
    ordered = [f for f in FAMILIES if f in families]
    results = [benchmark_family(config_path, family, manifest, out_dir, flags) for family in ordered]
    return results


def format_results(results) -> str:
    reports = [evaluation.EvalReport.from_dict({k: r[k] for k in r if k in evaluation.EvalReport.__dataclass_fields__})
               for r in results if "error" not in r]
    table = evaluation.format_table(reports)

    rows = []
    for family, change in relative_improvements(results).items():
        rows.append([evaluation.ARCHITECTURE_NAMES[family][0],
                     "-" if change["bird"] is None else f"{change['bird']:+.1f}%",
                     "-" if change["macro"] is None else f"{change['macro']:+.1f}%"])
    if rows:
        table += "\n\nChange vs single-image baseline\n"
        table += tabulate(rows, headers=["Architecture", "F1_bird", "F1_macro"], tablefmt="github")
    return table


def generate_graphs(results, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    filename = os.path.join(out_dir, "modality_comparison.png")
    return plot_modality_comparison([r for r in results if "error" not in r], filename)


def save_test_result(results, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESULTS_FILE)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(results, f, indent=2)
    return path


def read_results(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_summary(results, out_dir):
    path = os.path.join(out_dir, "table.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_results(results) + "\n")
    return path


def main():
    parser = argparse.ArgumentParser(description="Compare classifier modalities on one dataset")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--manifest", help="manifest.json of the dataset to train on")
    parser.add_argument("--out", default="benchmarks", help="output directory")
    parser.add_argument("--families", nargs="+", default=list(FAMILIES), choices=FAMILIES)
    parser.add_argument("--replot", default=None, help="re-render graphs and table from a results.json")
    args = parser.parse_args()

    if args.replot:
        results = read_results(args.replot)
    else:
        if not args.manifest:
            parser.error("--manifest is required unless --replot is given")
        results = full_test(args.config, args.manifest, args.out, args.families)
        save_test_result(results, args.out)

    generate_graphs(results, args.out)
    write_summary(results, args.out)
    print(format_results(results))
    return 0


if __name__ == "__main__":
    exit(main())
