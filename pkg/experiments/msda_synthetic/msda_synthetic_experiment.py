# msda_synthetic/msda_synthetic_experiment.py

import os
import sys
import logging
import argparse

# --- Logging Setup ---
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)]
)
# ------------------------------

# --- External Utility Imports ---
try:
    from wgmm_tools.dataset_utils import gen_msda_synthetic, save_csv
    from wgmm_tools.env_utils import load_project_env, resolve_output_dir
    from wgmm_tools.io_utils import write_json
    from pipeline_tools.fold_runner import run_folds, summarize
    from pipeline_tools.run_config import MsdaConfig, load_yaml
except ImportError as e:
    logging.critical(f"FATAL ERROR: Could not import wgmm_tools. Did you run 'pip install -e .' from the project root? Details: {e}")
    sys.exit(1)

# Load environment variables from project root and local .env
load_project_env(__file__)
os.environ.setdefault("WGMM_WORKERS", "1")

CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "msda_synthetic_config.yaml")


def run_msda_experiment(config: dict, out_dir: str) -> dict:
    data_cfg = config["data"]
    logging.info(f"Generating synthetic MSDA benchmark: {data_cfg}")
    sources, target = gen_msda_synthetic(**data_cfg)

    os.makedirs(out_dir, exist_ok=True)
    source_paths = []
    for dataset in sources:
        path = os.path.join(out_dir, f"{dataset.domain_id}.csv")
        save_csv(dataset, path)
        source_paths.append(path)
    target_path = os.path.join(out_dir, "target.csv")
    save_csv(target, target_path)

    cfg = MsdaConfig(sources=source_paths, target=target_path, **config["msda"])
    results = run_folds(sources, target, cfg)
    ok = [r for r in results if r["status"] == "SUCCESS"]
    summary = summarize(results)

    gaps = [abs(r["final_loss"] - r["offline"]["final_loss"]) / r["offline"]["final_loss"] for r in ok]
    online_acc = summary.get("online", {}).get("mean", float("nan"))
    source_acc = summary.get("source_only", {}).get("mean", float("nan"))
    oracle_acc = summary.get("oracle", {}).get("mean", float("nan"))
    checks = {
        "all_folds_succeeded": len(ok) == len(results),
        "online_loss_within_10pct_of_offline": all(g <= config["max_relative_loss_gap"] for g in gaps),
        "shift_costs_source_only_10_points": oracle_acc - source_acc >= config["min_oracle_headroom"],
        "online_beats_source_only_by_5_points": online_acc - source_acc >= config["min_gain_over_source_only"],
    }

    report = {
        "folds": [{k: v for k, v in r.items() if k not in ("metrics", "dictionary")} for r in results],
        "relative_loss_gaps": gaps,
        "accuracy": summary,
        "checks": checks,
        "config": cfg.model_dump(),
    }
    write_json(os.path.join(out_dir, "msda_synthetic_results.json"), report)

    for method, stats in summary.items():
        logging.info(f"  {method:<12} {stats['mean']:.4f} +/- {2 * stats['std']:.4f}")
    for name, passed in checks.items():
        (logging.info if passed else logging.error)(f"  {'PASS' if passed else 'FAIL'}  {name}")
    return report


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Online GMM-DaDiL on the synthetic multi-source benchmark.")
    parser.add_argument('--config', default=CONFIG_PATH, help='YAML configuration of the experiment.')
    parser.add_argument('--out', default=None, help='Output directory (default: $WGMM_OUTPUT_DIR or ./outputs).')
    args = parser.parse_args()

    config = load_yaml(args.config)
    out_dir = os.path.join(resolve_output_dir(args.out), "msda_synthetic")
    report = run_msda_experiment(config, out_dir)
    sys.exit(0 if all(report["checks"].values()) else 1)
