# src/pipeline_tools/commands.py

import argparse
import json
import logging
import os
import time
from typing import Any, Dict, List, Optional, Sequence
from pydantic import ValidationError

from wgmm_tools.dataset_utils import as_stream, gen_msda_synthetic, gen_toy_clusters, load_csv, save_csv
from wgmm_tools.env_utils import default_log_level, resolve_output_dir
from wgmm_tools.errors import EXIT_DATA, EXIT_OK, EXIT_USAGE, DataError, WgmmError
from wgmm_tools.gmm_utils import LabeledGmm, bic, em_fit, log_likelihood
from wgmm_tools.io_utils import (
    MetricsWriter, load_any, load_checkpoint, save_checkpoint, save_gmm, write_json, file_meta
)
from wgmm_tools.online_utils import iter_stream
from wgmm_tools.ot_utils import mw2_sq, smw2_sq
from pipeline_tools.fold_runner import run_folds, summarize
from pipeline_tools.run_config import (
    EvalConfig, FitOfflineConfig, FitStreamConfig, GenConfig, InspectConfig, MsdaConfig, resolve_config
)

logger = logging.getLogger(__name__)


def _out_dir(cfg) -> str:
    out = resolve_output_dir(cfg.out)
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out: str, command: str, cfg, outputs: List[str], summary: Optional[Dict[str, Any]] = None) -> None:
    manifest = {"command": command, "config": cfg.model_dump(), "outputs": outputs}
    if summary is not None:
        manifest["summary"] = summary
    manifest["meta"] = file_meta(None)
    write_json(os.path.join(out, "manifest.json"), manifest)


# ==============================================================================
# COMMANDS
# ==============================================================================

def cmd_gen(cfg: GenConfig) -> int:
    out = _out_dir(cfg)
    if cfg.dataset == "toy":
        datasets = {"toy.csv": gen_toy_clusters(cfg.seed, cfg.shuffle, cfg.n_per_cluster, cfg.noise)}
    else:
        sources, target = gen_msda_synthetic(cfg.domains, cfg.classes, cfg.dim, cfg.shift_scale,
                                             cfg.n_per_domain, cfg.seed)
        datasets = {f"source_{ell}.csv": s for ell, s in enumerate(sources)}
        datasets["target.csv"] = target

    outputs = []
    for name, dataset in datasets.items():
        path = os.path.join(out, name)
        save_csv(dataset, path)
        outputs.append(path)
        logger.info(f"Wrote {path} ({dataset.n} rows, d={dataset.d})")
    _write_manifest(out, "gen", cfg, outputs)
    return EXIT_OK


def cmd_fit_stream(cfg: FitStreamConfig) -> int:
    data = load_csv(cfg.input, cfg.label_column, cfg.header, require_labels=False)
    out = _out_dir(cfg)
    metrics_path = os.path.join(out, "metrics.jsonl")

    with MetricsWriter(metrics_path, append=bool(cfg.resume) and not cfg.offline) as writer:
        started = time.perf_counter()
        if cfg.offline:
            model = em_fit(data.X, cfg.kmax, seed=cfg.seed)
            writer.write({"step": 1, "K": model.K, "loglik_on_batch": log_likelihood(model, data.X),
                          "wall_ms": (time.perf_counter() - started) * 1000.0})
            n_steps = 1
        else:
            state = load_checkpoint(cfg.resume) if cfg.resume else None
            if state is not None:
                if state.model.d != data.d:
                    raise DataError(f"Checkpoint has d={state.model.d}, data has d={data.d}")
                logger.info(f"Resuming at batch {state.step_index + 1} ({state.n_seen} samples already seen)")
            stream = as_stream(data, cfg.batch, start=state.n_seen if state else 0)
            for state, batch in iter_stream(stream, cfg.kmin, cfg.kmax, cfg.dk, cfg.seed, cfg.forgetting, state=state):
                writer.write({"step": state.step_index, "K": state.model.K, "n_seen": state.n_seen,
                              "loglik_on_batch": log_likelihood(state.model, batch),
                              "wall_ms": (time.perf_counter() - started) * 1000.0})
                if cfg.checkpoint:
                    save_checkpoint(state, cfg.checkpoint, {"seed": cfg.seed})
                started = time.perf_counter()
            model, n_steps = state.model, state.step_index

    model_path = os.path.join(out, "gmm.json")
    save_gmm(model, model_path, {"seed": cfg.seed})
    logger.info(f"Wrote {model_path} (K={model.K}) after {n_steps} step(s)")
    _write_manifest(out, "fit-stream", cfg, [model_path, metrics_path], {"K": model.K, "steps": n_steps})
    return EXIT_OK


def cmd_fit_offline(cfg: FitOfflineConfig) -> int:
    data = load_csv(cfg.input, cfg.label_column, cfg.header, require_labels=False)
    out = _out_dir(cfg)
    history: List[float] = []
    model = em_fit(data.X, cfg.k, seed=cfg.seed, history=history)
    model_path = os.path.join(out, "gmm.json")
    save_gmm(model, model_path, {"seed": cfg.seed})
    summary = {"K": model.K, "loglik": log_likelihood(model, data.X), "bic": bic(model, data.X),
               "em_iterations": len(history) - 1, "loglik_history": history}
    logger.info(f"Offline fit: K={model.K}, avg loglik={summary['loglik']:.6f}, BIC={summary['bic']:.3f}")
    _write_manifest(out, "fit-offline", cfg, [model_path], summary)
    return EXIT_OK


def cmd_msda(cfg: MsdaConfig) -> int:
    sources = [load_csv(path, cfg.label_column, cfg.header, require_labels=True) for path in cfg.sources]
    target = load_csv(cfg.target, cfg.label_column, cfg.header, require_labels=False)
    for dataset in sources:
        if dataset.d != target.d:
            raise DataError(f"{dataset.domain_id} has d={dataset.d}, target has d={target.d}")
    if not target.labeled:
        logger.warning("Target file has no labels: accuracies will not be reported")

    out = _out_dir(cfg)
    results = run_folds(sources, target, cfg)

    outputs = []
    metrics_path = os.path.join(out, "metrics.jsonl")
    with MetricsWriter(metrics_path) as writer:
        for r in results:
            for record in r.get("metrics", []):
                writer.write({"fold": r["fold"], **record})
    outputs.append(metrics_path)

    folds = []
    for r in results:
        if r["status"] == "SUCCESS":
            path = os.path.join(out, f"dictionary_fold{r['fold']}.json")
            write_json(path, r["dictionary"])
            outputs.append(path)
        folds.append({k: v for k, v in r.items() if k not in ("metrics", "dictionary")})

    report = {"folds": folds, "accuracy": summarize(results)}
    report_path = os.path.join(out, "report.json")
    write_json(report_path, report)
    outputs.append(report_path)
    for method, stats in report["accuracy"].items():
        logger.info(f"{method}: accuracy {stats['mean']:.4f} +/- {2 * stats['std']:.4f} (2 std)")
    _write_manifest(out, "msda", cfg, outputs)

    failed = [r for r in results if r["status"] == "FAILED"]
    if failed:
        logger.error(f"{len(failed)} of {len(results)} folds failed")
        return failed[0]["exit_code"]
    return EXIT_OK


def _as_model(path):
    kind, obj = load_any(path)
    if kind == "dictionary":
        raise DataError(f"{path} holds a dictionary, expected a GMM")
    return obj.model if kind == "checkpoint" else obj


def cmd_eval(cfg: EvalConfig) -> int:
    a, b = _as_model(cfg.model_a), _as_model(cfg.model_b)
    report: Dict[str, Any] = {"mw2_sq": mw2_sq(a, b)[0]}
    if cfg.beta is not None:
        if not (isinstance(a, LabeledGmm) and isinstance(b, LabeledGmm)):
            raise DataError("SMW2 needs two labeled GMM files")
        report["beta"] = cfg.beta
        report["smw2_sq"] = smw2_sq(a, b, cfg.beta)[0]
    print(json.dumps(report, indent=2))
    if cfg.out:
        write_json(os.path.join(_out_dir(cfg), "eval.json"), report)
    return EXIT_OK


def cmd_inspect(cfg: InspectConfig) -> int:
    kind, obj = load_any(cfg.model)
    summary: Dict[str, Any] = {"kind": kind}
    if kind == "dictionary":
        dictionary, beta = obj
        summary.update({"C": dictionary.C, "K": dictionary.K, "d": dictionary.d, "n_c": dictionary.n_c,
                        "beta": beta, "Lambda": dictionary.Lambda.tolist()})
        model = None
    else:
        model = obj.model if kind == "checkpoint" else obj
        summary.update({"K": model.K, "d": model.d, "weights": model.weights.tolist()})
        if isinstance(model, LabeledGmm):
            summary["n_c"] = model.n_c
        if kind == "checkpoint":
            summary.update({"n_seen": obj.n_seen, "step_index": obj.step_index})

    if cfg.data:
        if model is None:
            raise DataError("--data needs a GMM or checkpoint file")
        data = load_csv(cfg.data, cfg.label_column, cfg.header, require_labels=False)
        summary["loglik"] = log_likelihood(model, data.X)
        summary["bic"] = bic(model, data.X)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "fit-stream": cmd_fit_stream,
    "fit-offline": cmd_fit_offline,
    "msda": cmd_msda,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


# ==============================================================================
# PARSER
# ==============================================================================

def _stream_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kmin", type=int, default=None, help="K_min (default 5)")
    p.add_argument("--kmax", type=int, default=None, help="K_max (default 15)")
    p.add_argument("--dk", type=int, default=None, help="delta_K (default 3)")
    p.add_argument("--batch", type=int, default=None, help="batch size n_b (default 32)")
    p.add_argument("--forgetting", type=float, default=None, help="optional forgetting factor in (0, 1)")


def _csv_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--label-column", dest="label_column", default=None)
    p.add_argument("--no-header", dest="header", action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML file with one section per command")
    common.add_argument("--log-level", dest="log_level", default=None,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory (default: $WGMM_OUTPUT_DIR or ./outputs)")

    parser = argparse.ArgumentParser(prog="wgmm", description="Online Wasserstein GMMs and GMM dictionary learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="Generate toy or synthetic MSDA datasets as CSV.")
    p.add_argument("dataset", nargs="?", default=None, choices=["toy", "msda"])
    p.add_argument("--shuffle", action="store_true", default=None)
    p.add_argument("--n-per-cluster", dest="n_per_cluster", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--domains", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--shift-scale", dest="shift_scale", type=float, default=None)
    p.add_argument("--n-per-domain", dest="n_per_domain", type=int, default=None)

    p = sub.add_parser("fit-stream", parents=[common], help="Online GMM fit over a CSV stream.")
    p.add_argument("--input", default=None)
    _csv_flags(p)
    _stream_flags(p)
    p.add_argument("--offline", action="store_true", default=None, help="single EM fit with K_max components")
    p.add_argument("--checkpoint", default=None, help="write a resumable checkpoint after every batch")
    p.add_argument("--resume", default=None, help="continue from a checkpoint file")

    p = sub.add_parser("fit-offline", parents=[common], help="One EM fit on a full CSV.")
    p.add_argument("--input", default=None)
    _csv_flags(p)
    p.add_argument("--k", type=int, default=None, help="component count (default 15)")

    p = sub.add_parser("msda", parents=[common], help="Online GMM-DaDiL with k-fold evaluation.")
    p.add_argument("--sources", nargs="+", default=None)
    p.add_argument("--target", default=None)
    _csv_flags(p)
    _stream_flags(p)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--k-per-class", dest="k_per_class", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--atoms", dest="n_atoms", type=int, default=None)
    p.add_argument("--components", dest="n_components", type=int, default=None)
    p.add_argument("--lr-atoms", dest="lr_atoms", type=float, default=None)
    p.add_argument("--lr-lambda", dest="lr_lambda", type=float, default=None)
    p.add_argument("--steps-per-batch", dest="steps_per_batch", type=int, default=None)
    p.add_argument("--post-stream-iters", dest="post_stream_iters", type=int, default=None)
    p.add_argument("--offline", action="store_true", default=None, help="also run the offline reference")
    p.add_argument("--baseline", action="store_true", default=None, help="also evaluate the source-only classifier")
    p.add_argument("--oracle", action="store_true", default=None, help="also evaluate the within-domain oracle")
    p.add_argument("--n-replay", dest="n_replay", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="MW2 (and SMW2) between two GMM files.")
    p.add_argument("model_a", nargs="?", default=None)
    p.add_argument("model_b", nargs="?", default=None)
    p.add_argument("--beta", type=float, default=None)

    p = sub.add_parser("inspect", parents=[common], help="Summarize a GMM, checkpoint or dictionary file.")
    p.add_argument("model", nargs="?", default=None)
    p.add_argument("--data", default=None, help="CSV to score (log-likelihood and BIC)")
    _csv_flags(p)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logging.getLogger().setLevel(args.log_level or default_log_level())
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}

    try:
        cfg = resolve_config(args.command, flags, args.config)
    except ValidationError as e:
        logger.error(f"Invalid '{args.command}' configuration:\n{e}")
        return EXIT_USAGE
    except WgmmError as e:
        logger.error(str(e))
        return e.exit_code

    try:
        return COMMANDS[args.command](cfg)
    except WgmmError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_DATA
